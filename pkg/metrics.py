"""
metrics.py

Convergence diagnostics: consensus error, full-batch global partial gradients,
M(k), the right-hand side of the convergence bound, empirical estimates of its
constants, similarity matrices, accuracy and time-to-threshold.

All functions are read-only over worker snapshots; "states" is any sequence of
objects with .phi (RepresentationParams) and .theta (HeadParams).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import model
from data import Shard, class_proportions, sample_batch
from errors import InvalidArgumentError
from model import LossSpec
from topology import MixingParams
from utils.rng import PHASE_ESTIMATE, substream

logger = logging.getLogger(__name__)

NORM_OF_MEAN = "norm-of-mean"
MEAN_OF_NORMS = "mean-of-norms"
THETA_NORM_MODES = (NORM_OF_MEAN, MEAN_OF_NORMS)

USER_SUPPLIED = "user-supplied"
ESTIMATED = "empirically-estimated"


@dataclass
class MetricsRecord:
    k: int
    grad_phi_sq: float
    grad_theta_sq: float
    consensus_err: float
    m_k: float
    avg_train_loss: float
    avg_test_accuracy: Optional[float] = None
    avg_test_loss: Optional[float] = None
    running_avg_m: Optional[float] = None

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TheoryConstants:
    lipschitz_l: float
    sigma: float
    varsigma: float
    provenance: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("lipschitz_l", "sigma", "varsigma"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be non-negative")
        for name in ("lipschitz_l", "sigma", "varsigma"):
            self.provenance.setdefault(name, USER_SUPPLIED)

    @property
    def is_estimated(self) -> bool:
        return ESTIMATED in self.provenance.values()

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TheoremBound:
    total: float
    terms: Dict[str, float]
    indicative: bool = False

    def to_json(self) -> dict:
        return asdict(self)


# ---------------------------
# Helpers
# ---------------------------
def _phi_matrix(states) -> np.ndarray:
    """(N, p) stacked flattened representations."""
    rows = [s.phi.flatten() if hasattr(s, "phi") else np.atleast_1d(np.asarray(s, dtype=np.float64)) for s in states]
    if not rows:
        raise InvalidArgumentError("need at least one worker")
    if len({r.shape for r in rows}) != 1:
        raise InvalidArgumentError("representations have different shapes")
    return np.stack(rows)


def mean_phi(states) -> model.RepresentationParams:
    return states[0].phi.unflatten(_phi_matrix(states).mean(axis=0))


def _check_heads_congruent(states):
    shapes = {s.theta.A.shape for s in states}
    if len(shapes) != 1:
        raise InvalidArgumentError(f"heads have different shapes {sorted(shapes)}; cannot average head gradients")


# ---------------------------
# Diagnostics
# ---------------------------
def consensus_error(states) -> float:
    """(1/N) sum_i ||phi_i - phi_bar||^2."""
    X = _phi_matrix(states)
    dev = X - X.mean(axis=0)
    return float(np.sum(dev * dev) / X.shape[0])


def global_partial_grads(
    states,
    shards: Sequence[Shard],
    spec: LossSpec,
    next_states=None,
    theta_norm: str = NORM_OF_MEAN,
) -> Tuple[float, float]:
    """
    Full-batch partial gradients of the global loss at phi_bar.

    grad_theta_sq uses the heads of `states` (theta_i(k)); grad_phi_sq uses the
    heads of `next_states` (theta_i(k+1)) when given, else the same heads.
    """
    if len(states) != len(shards):
        raise InvalidArgumentError(f"{len(states)} workers but {len(shards)} shards")
    if theta_norm not in THETA_NORM_MODES:
        raise InvalidArgumentError(f"unknown theta_norm mode '{theta_norm}'")
    after = next_states if next_states is not None else states
    _check_heads_congruent(states)
    _check_heads_congruent(after)

    phi_bar = mean_phi(states)
    g_theta = [model.grad_theta(phi_bar, s.theta, sh.train, spec).flatten() for s, sh in zip(states, shards)]
    g_phi = [model.grad_phi(phi_bar, s.theta, sh.train, spec).flatten() for s, sh in zip(after, shards)]

    mean_gphi = np.mean(g_phi, axis=0)
    grad_phi_sq = float(mean_gphi @ mean_gphi)
    if theta_norm == NORM_OF_MEAN:
        mean_gtheta = np.mean(g_theta, axis=0)
        grad_theta_sq = float(mean_gtheta @ mean_gtheta)
    else:
        grad_theta_sq = float(np.mean([g @ g for g in g_theta]))
    return grad_phi_sq, grad_theta_sq


def m_of_k(grad_phi_sq: float, grad_theta_sq: float, consensus_err: float, alpha: float, tau: int, beta: float) -> float:
    """||grad_phi f||^2 + (alpha tau / beta) ||grad_theta f||^2 + consensus error."""
    if beta <= 0:
        raise InvalidArgumentError(f"beta must be positive, got {beta}")
    return grad_phi_sq + (alpha * tau / beta) * grad_theta_sq + consensus_err


def average_loss(states, shards: Sequence[Shard], spec: LossSpec, split: str = "train") -> float:
    """Unweighted mean over workers of each worker's loss with its own parameters."""
    values = []
    for s, sh in zip(states, shards):
        batch = getattr(sh, split)
        if len(batch):
            values.append(model.loss(s.phi, s.theta, batch, spec))
    return float(np.mean(values)) if values else float("nan")


def global_loss(states, shards: Sequence[Shard], spec: LossSpec) -> float:
    """f(phi_bar, {theta_i}) on the train sets."""
    phi_bar = mean_phi(states)
    return float(np.mean([model.loss(phi_bar, s.theta, sh.train, spec) for s, sh in zip(states, shards)]))


def accuracy(states, shards: Sequence[Shard], spec: LossSpec) -> Tuple[List[float], float]:
    """Each worker scored with its own (phi_i, theta_i) on its own test set."""
    if not spec.is_classification:
        raise InvalidArgumentError("accuracy needs a classification loss; use test loss for regression")
    per_worker = []
    for s, sh in zip(states, shards):
        if len(sh.test) == 0:
            raise InvalidArgumentError(f"worker {sh.worker_id} has an empty test set")
        per_worker.append(model.accuracy_on(s.phi, s.theta, sh.test))
    return per_worker, float(np.mean(per_worker))


def make_record(k, states, next_states, shards, spec, alpha, tau, beta, theta_norm=NORM_OF_MEAN) -> MetricsRecord:
    """Diagnostics for round k: phi(k) and theta(k) from `states`,
    theta(k+1) and the reported losses from `next_states`."""
    grad_phi_sq, grad_theta_sq = global_partial_grads(states, shards, spec, next_states, theta_norm)
    cons = consensus_error(states)
    has_test = all(len(sh.test) for sh in shards)
    return MetricsRecord(
        k=k,
        grad_phi_sq=grad_phi_sq,
        grad_theta_sq=grad_theta_sq,
        consensus_err=cons,
        m_k=m_of_k(grad_phi_sq, grad_theta_sq, cons, alpha, tau, beta),
        avg_train_loss=average_loss(next_states, shards, spec, "train"),
        avg_test_accuracy=accuracy(next_states, shards, spec)[1] if spec.is_classification and has_test else None,
        avg_test_loss=average_loss(next_states, shards, spec, "test") if has_test else None,
    )


# ---------------------------
# Bound
# ---------------------------
def _times(coef: float, value: float) -> float:
    return 0.0 if value == 0 else coef * value


def theorem_bound(
    f0: float,
    fstar: float,
    constants: TheoryConstants,
    mix: Optional[MixingParams],
    n: int,
    k_rounds: int,
    alpha: float,
    beta: float,
    tau: int,
) -> TheoremBound:
    """
    Right-hand side of the bound on (1/K) sum_k E[M(k)]:
      4 (f0 - f*) / (K beta)
      + 2 beta L sigma^2 / N
      + 12 alpha^3 L^2 tau (tau - 1)(6 tau + 1) sigma^2 / beta
      + 2 alpha^2 tau L sigma^2 / beta
      + 2 beta (1 + 1/L^2) sigma^2 / (3 N)
      + 2 beta (1 + 1/L^2) varsigma^2 / N
    The mixing constants enter only through the learning-rate conditions, so
    `mix` is accepted for symmetry with the feasibility check and not used.
    """
    if beta <= 0:
        raise InvalidArgumentError(f"beta must be positive, got {beta}")
    if k_rounds < 1:
        raise InvalidArgumentError(f"K must be at least 1, got {k_rounds}")

    L = constants.lipschitz_l
    s2 = constants.sigma**2
    v2 = constants.varsigma**2
    inv_l2 = math.inf if L == 0 else 1.0 / (L * L)

    terms = {
        "vanishing": 4.0 * (f0 - fstar) / (k_rounds * beta),
        "repr_noise": _times(2.0 * beta * L / n, s2),
        "head_drift": _times(12.0 * alpha**3 * L**2 * tau * (tau - 1) * (6 * tau + 1) / beta, s2),
        "head_noise": _times(2.0 * alpha**2 * tau * L / beta, s2),
        "consensus_noise": _times(2.0 * beta * (1.0 + inv_l2) / (3.0 * n), s2),
        "variability": _times(2.0 * beta * (1.0 + inv_l2) / n, v2),
    }
    return TheoremBound(total=sum(terms.values()), terms=terms, indicative=constants.is_estimated)


# ---------------------------
# Constant estimation
# ---------------------------
def _block_ratio(grad_fn, base: np.ndarray, radius: float, rng: np.random.Generator) -> float:
    a = base + radius * rng.standard_normal(base.shape)
    b = base + radius * rng.standard_normal(base.shape)
    return float(np.linalg.norm(grad_fn(a) - grad_fn(b)) / np.linalg.norm(a - b))


def estimate_constants(
    states,
    shards: Sequence[Shard],
    spec: LossSpec,
    samples: int,
    seed: int,
    batch_size: Optional[int] = None,
    radius: float = 0.1,
) -> TheoryConstants:
    """
    Empirical lower bounds for (L, sigma, varsigma).

    L: max ratio ||grad(a) - grad(b)|| / ||a - b|| over random pairs around each
    worker's parameters, perturbing the representation block (head fixed) and
    the head block (representation fixed) separately.
    sigma^2: max over workers of the mean ||g_batch - g_full||^2.
    varsigma^2: (1/N) sum_i ||grad_phi F_i(phi_bar, theta_i) - mean_j grad_phi F_j||^2.
    """
    if samples < 2:
        raise InvalidArgumentError(f"samples must be at least 2, got {samples}")
    if len(states) != len(shards):
        raise InvalidArgumentError(f"{len(states)} workers but {len(shards)} shards")

    lip = 0.0
    sigma_sq = 0.0
    for i, (s, sh) in enumerate(zip(states, shards)):
        full = sh.train

        def g_phi(vec, s=s, full=full):
            return model.grad_phi(s.phi.unflatten(vec), s.theta, full, spec).flatten()

        def g_theta(vec, s=s, full=full):
            return model.grad_theta(s.phi, s.theta.unflatten(vec), full, spec).flatten()

        for p in range(samples):
            rng = substream(seed, i, p, PHASE_ESTIMATE)
            lip = max(lip, _block_ratio(g_phi, s.phi.flatten(), radius, rng), _block_ratio(g_theta, s.theta.flatten(), radius, rng))

        _, gp, gt = model.loss_and_grads(s.phi, s.theta, full, spec)
        g_full = np.concatenate([gp.flatten(), gt.flatten()])
        dev = []
        for p in range(samples):
            rng = substream(seed, i, samples + p, PHASE_ESTIMATE)
            batch = sample_batch(full, batch_size, rng)
            _, bp, bt = model.loss_and_grads(s.phi, s.theta, batch, spec)
            diff = np.concatenate([bp.flatten(), bt.flatten()]) - g_full
            dev.append(float(diff @ diff))
        sigma_sq = max(sigma_sq, float(np.mean(dev)))

    phi_bar = mean_phi(states)
    local = np.stack([model.grad_phi(phi_bar, s.theta, sh.train, spec).flatten() for s, sh in zip(states, shards)])
    spread = local - local.mean(axis=0)
    varsigma_sq = float(np.sum(spread * spread) / len(states))

    return TheoryConstants(
        lipschitz_l=lip,
        sigma=math.sqrt(sigma_sq),
        varsigma=math.sqrt(varsigma_sq),
        provenance={"lipschitz_l": ESTIMATED, "sigma": ESTIMATED, "varsigma": ESTIMATED},
    )


# ---------------------------
# Similarity / speed
# ---------------------------
def cosine_similarity_matrix(vectors) -> np.ndarray:
    V = np.stack([np.asarray(v, dtype=np.float64).ravel() for v in vectors])
    norms = np.linalg.norm(V, axis=1)
    for i, nrm in enumerate(norms):
        if nrm == 0:
            raise InvalidArgumentError(f"vector {i} is zero; cosine similarity undefined")
    U = V / norms[:, None]
    S = np.clip(U @ U.T, -1.0, 1.0)
    np.fill_diagonal(S, 1.0)
    return S


def _similarity_or_none(vectors, what: str):
    try:
        return cosine_similarity_matrix(vectors).tolist()
    except InvalidArgumentError as e:
        logger.warning("%s similarity skipped: %s", what, e)
        return None


def similarity_report(states, shards: Sequence[Shard]) -> dict:
    """
    Worker-by-worker cosine matrices of the local class distributions
    (classification shards only, else None), the heads and the local
    representations.
    """
    if len(states) != len(shards):
        raise InvalidArgumentError(f"{len(states)} workers but {len(shards)} shards")
    labelled = all(s.is_classification for s in shards)
    return {
        "data": _similarity_or_none(list(class_proportions(shards)), "data") if labelled else None,
        "heads": _similarity_or_none([s.theta.flatten() for s in states], "head"),
        "representations": _similarity_or_none([s.phi.flatten() for s in states], "representation"),
    }


def _field_values(trace, field_name: str):
    records = getattr(trace, "records", trace)
    ks, values = [], []
    for pos, r in enumerate(records):
        if isinstance(r, MetricsRecord):
            ks.append(r.k)
            values.append(getattr(r, field_name))
        else:
            ks.append(pos)
            values.append(float(r))
    return ks, np.array(values, dtype=np.float64)


def running_average(values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return np.cumsum(values) / np.arange(1, len(values) + 1)


def rounds_to_threshold(trace, epsilon: float, field_name: str = "m_k") -> Optional[int]:
    """Smallest k whose running average of `field_name` is <= epsilon."""
    if epsilon <= 0:
        raise InvalidArgumentError(f"epsilon must be positive, got {epsilon}")
    if field_name not in ("m_k", "avg_train_loss"):
        raise InvalidArgumentError(f"unsupported field '{field_name}'")
    ks, values = _field_values(trace, field_name)
    if not len(values):
        return None
    hits = np.flatnonzero(running_average(values) <= epsilon)
    return int(ks[hits[0]]) if hits.size else None
