# handlers/run.py

import logging

import numpy as np

import engine
import metrics
import topology
from errors import InvalidArgumentError, SpecError
from utils import io_utils
from utils.job_queue import JobQueue
from utils.spec_utils import build_graph, build_run_config, build_task, parse_spec, spec_to_json, validate_spec

logger = logging.getLogger(__name__)

SUMMARY_FIELDS = (
    "running_avg_m",
    "final_avg_train_loss",
    "final_avg_test_loss",
    "final_avg_test_accuracy",
    "final_consensus_err",
)


def _mixing(p_mat):
    try:
        return topology.mixing_params(p_mat), None
    except InvalidArgumentError as e:
        return None, str(e)


def theory_constants(spec, states, shards, cfg, seed):
    """User-supplied constants win; otherwise estimate them when asked to."""
    th = spec.theory
    given = {"lipschitz_l": th.lipschitz_l, "sigma": th.sigma, "varsigma": th.varsigma}
    if all(v is not None for v in given.values()):
        return metrics.TheoryConstants(**given)
    if not th.estimate:
        missing = [f"theory.{name}" for name, v in given.items() if v is None]
        if len(missing) < len(given):
            raise InvalidArgumentError(f"missing {', '.join(missing)}; give all three constants or set theory.estimate = true")
        return None
    est = metrics.estimate_constants(states, shards, cfg.loss, th.samples, seed, batch_size=cfg.batch_size)
    for name, value in given.items():
        if value is not None:
            setattr(est, name, value)
            est.provenance[name] = metrics.USER_SUPPLIED
    return est


def bound_trace(trace, constants, mix, f0, fstar, n, cfg):
    """Bound at every logged K that is a power of two, and at the final K.

    The compared running average covers recorded rounds only (see
    run.diagnostic_every).
    """
    if constants is None or not trace.records:
        return []
    alpha, beta = cfg.rates(0, n)
    if beta <= 0:
        return []
    last = trace.records[-1].k
    rows = []
    for rec in trace.records:
        big_k = rec.k + 1
        if big_k & (big_k - 1) and rec.k != last:
            continue
        bound = metrics.theorem_bound(f0, fstar, constants, mix, n, big_k, alpha, beta, cfg.tau)
        holds = rec.running_avg_m <= bound.total
        if not holds:
            logger.warning("K=%d: running avg M=%.6g above bound %.6g (terms %s)", big_k, rec.running_avg_m, bound.total, bound.terms)
        rows.append({"K": big_k, "running_avg_m": rec.running_avg_m, "holds": holds, **bound.to_json()})
    return rows


def run_seed(spec, seed, out_dir, threads=1, checkpoint_every=None, resume=None):
    """One full run for one seed; returns the per-seed summary block."""
    shards, _ = build_task(spec, seed)
    n = len(shards)
    graph = build_graph(spec, n, seed)
    p_mat = topology.metropolis_weights(graph)
    mix, mix_reason = _mixing(p_mat)
    cfg = build_run_config(spec, seed, shards)

    init = engine.init_states(n, shards[0].dim, shards[0].n_outputs, cfg, shared_head=True if spec.algorithm == engine.DPSGD else None)
    f0 = metrics.global_loss(init, shards, cfg.loss)
    constants = theory_constants(spec, init, shards, cfg, seed)
    lip = constants.lipschitz_l if constants is not None else None

    trace = engine.run_algorithm(
        spec.algorithm,
        graph,
        shards,
        cfg,
        threads=threads,
        checkpoint_every=checkpoint_every,
        on_checkpoint=lambda ck: io_utils.save_checkpoint(out_dir, ck),
        resume=resume,
        lipschitz_estimate=lip,
    )

    csv_path = io_utils.output_path(out_dir, f"metrics_seed{seed}.csv")
    io_utils.write_metrics_csv(csv_path, trace.records, append=resume is not None)

    a0, b0 = cfg.rates(0, n)
    block = {
        "seed": seed,
        "metrics_csv": csv_path,
        "n_workers": n,
        "tau": cfg.tau,
        "graph": graph.to_json(),
        "consensus_weights": p_mat.to_json(),
        "mixing": mix.to_json() if mix is not None else None,
        "mixing_unavailable": mix_reason,
        "f0": f0,
        "final": trace.summary,
        "theory_constants": constants.to_json() if constants is not None else None,
        "feasibility_warnings": engine.rate_feasibility(a0, b0, cfg.tau, n, mix, lip) if lip is not None else [],
        "theorem_bound": bound_trace(trace, constants, mix, f0, spec.theory.fstar, n, cfg),
    }
    if mix is not None and mix.is_vacuous:
        block["mixing_unavailable"] = "q rounds to 1 or C overflows: consensus terms of the bound are vacuous"
        block["corollary_k_floor"] = None
    elif lip is not None and lip > 0 and mix is not None:
        block["corollary_k_floor"] = engine.corollary_k_floor(n, mix.big_c, mix.q, lip)
    block["similarity"] = metrics.similarity_report(trace.final_states, shards)
    return block


def aggregate(blocks):
    """Mean and sample standard deviation across seeds of each final metric."""
    out = {}
    for name in SUMMARY_FIELDS:
        values = [b["final"][name] for b in blocks if b["final"].get(name) is not None]
        if not values:
            out[name] = {"mean": None, "stdev": None}
            continue
        arr = np.array(values, dtype=np.float64)
        out[name] = {"mean": float(arr.mean()), "stdev": float(arr.std(ddof=1)) if len(arr) > 1 else None}
    return out


def _first_failure(jobs):
    """The first failed seed's error; the others are logged here, the first by the caller's handler."""
    failed = [job for job in jobs if job["error"] is not None]
    for job in failed[1:]:
        logger.error("seed %s failed: %s", job["payload"]["seed"], job["error"])
    return failed[0]["error"] if failed else None


def run_cmd(args) -> int:
    spec = parse_spec(args.spec)
    validate_spec(spec)
    out_dir = args.out or spec.output.dir
    io_utils.ensure_dir(out_dir)
    started = io_utils.get_utc_time()

    resume = None
    seeds = list(spec.seeds)
    if getattr(args, "resume", None):
        resume = io_utils.load_checkpoint(args.resume)
        if resume.seed not in seeds:
            raise SpecError(f"checkpoint seed {resume.seed} is not among the spec's seeds", field="seeds")
        if resume.algorithm != spec.algorithm:
            raise SpecError(f"checkpoint is a {resume.algorithm} run", field="algorithm")
        seeds = [resume.seed]

    def process(payload):
        return run_seed(spec, payload["seed"], out_dir, args.threads, args.checkpoint_every, resume)

    with JobQueue(process, workers=getattr(args, "seed_workers", 1)) as jobs_queue:
        for seed in seeds:
            jobs_queue.create_job({"seed": seed})
        jobs = jobs_queue.wait()

    err = _first_failure(jobs)
    if err is not None:
        raise err

    blocks = [job["result"] for job in jobs]
    summary = {
        "schema_version": io_utils.SCHEMA_VERSION,
        "started_at_utc": started,
        "algorithm": spec.algorithm,
        "seeds": seeds,
        "config": spec_to_json(spec),
        "per_seed": blocks,
        "across_seeds": aggregate(blocks),
    }
    path = io_utils.output_path(out_dir, "summary.json")
    io_utils.write_json(path, summary)

    for b in blocks:
        ram = b["final"]["running_avg_m"]
        io_utils.print_status(f"seed {b['seed']}: running avg M = {ram if ram is not None else 'n/a'} -> {b['metrics_csv']}", ok=True)
    io_utils.print_status(f"summary written to {path}", ok=True)
    return 0
