# handlers/gradcheck.py
"""
Central finite differences against the analytic gradients, over random small
instances that cycle through both representation kinds and both losses.
"""

import logging

import numpy as np

import model
from errors import InvalidArgumentError
from utils import io_utils
from utils.rng import PHASE_ESTIMATE, SHARED, substream

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-5
DEFAULT_INSTANCES = 200

COMBOS = [
    (model.LINEAR, model.SQUARED),
    (model.NONLINEAR, model.SQUARED),
    (model.LINEAR, model.CROSS_ENTROPY),
    (model.NONLINEAR, model.CROSS_ENTROPY),
]


def random_instance(instance_seed, kind, loss_kind):
    rng = substream(instance_seed, SHARED, 0, PHASE_ESTIMATE)
    d = int(rng.integers(2, 7))
    z = int(rng.integers(1, d + 1))
    m = int(rng.integers(1, 6))
    spec = model.LossSpec(loss_kind)
    c = int(rng.integers(2, 5)) if spec.is_classification else int(rng.integers(1, 4))
    hidden = int(rng.integers(z, z + 4)) if kind == model.NONLINEAR else None

    phi = model.init_representation(kind, d, z, rng, hidden=hidden)
    theta = model.init_head(z, c, rng)
    X = rng.standard_normal((m, d))
    if spec.is_classification:
        y = rng.integers(0, c, size=m).astype(np.int64)
    else:
        y = rng.standard_normal((m, c))
    return phi, theta, model.Batch(X, y), spec


def _fd(f, x, h):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def _rel_err(fd, analytic):
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(fd - analytic) / denom)) if fd.size else 0.0


def instance_error(phi, theta, batch, spec, h=FD_STEP):
    """Worst relative error over every phi and theta coordinate."""
    _, g_phi, g_theta = model.loss_and_grads(phi, theta, batch, spec)
    fd_phi = _fd(lambda v: model.loss(phi.unflatten(v), theta, batch, spec), phi.flatten(), h)
    fd_theta = _fd(lambda v: model.loss(phi, theta.unflatten(v), batch, spec), theta.flatten(), h)
    return max(_rel_err(fd_phi, g_phi.flatten()), _rel_err(fd_theta, g_theta.flatten()))


def gradcheck(seed, instances, tolerance=DEFAULT_TOLERANCE):
    if instances < 1:
        raise InvalidArgumentError(f"instances must be at least 1, got {instances}")
    if seed < 0:
        raise InvalidArgumentError(f"seed must be non-negative, got {seed}")
    worst, worst_seed, failing = 0.0, None, []
    for i in range(instances):
        instance_seed = seed + i
        kind, loss_kind = COMBOS[i % len(COMBOS)]
        err = instance_error(*random_instance(instance_seed, kind, loss_kind))
        logger.debug("instance %d (%s, %s): %.3g", instance_seed, kind, loss_kind, err)
        if err > worst or worst_seed is None:
            worst, worst_seed = err, instance_seed
        if err > tolerance:
            failing.append(instance_seed)
    return {"instances": instances, "worst": worst, "worst_seed": worst_seed, "tolerance": tolerance, "failing_seeds": failing}


def gradcheck_cmd(args) -> int:
    report = gradcheck(args.seed, args.instances, args.tolerance)
    print(f"worst relative error: {report['worst']:.3e} (instance seed {report['worst_seed']}, {report['instances']} instances)")
    if report["failing_seeds"]:
        shown = ", ".join(str(s) for s in report["failing_seeds"][:20])
        more = "" if len(report["failing_seeds"]) <= 20 else f" ... ({len(report['failing_seeds'])} total)"
        io_utils.print_status(f"tolerance {report['tolerance']:g} exceeded; failing seeds: {shown}{more}", ok=False)
        return 1
    io_utils.print_status(f"all within {report['tolerance']:g}", ok=True)
    return 0
