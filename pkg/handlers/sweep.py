# handlers/sweep.py
"""
sweep-speedup: how many rounds DePRL needs to bring the running average of
M(k) under epsilon, as the number of workers grows with per-worker data fixed.
"""

import logging
import math
from dataclasses import replace

import numpy as np

import engine
import metrics
from errors import SpecError
from utils import io_utils
from utils.spec_utils import build_graph, build_run_config, build_task, parse_spec, validate_spec

logger = logging.getLogger(__name__)

SPEEDUP_COLUMNS = ["schema_version", "n_workers", "rounds_to_threshold", "speedup", "seeds_reached"]


def parse_counts(text):
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise SpecError(f"worker counts must be integers, got {text!r}", field="sweep.worker_counts") from None


def rounds_needed(spec, n_workers, seed, epsilon, threads=1):
    """Rounds (k + 1) until the running average of M(k) reaches epsilon, or None."""
    shards, _ = build_task(spec, seed, n_workers=n_workers)
    graph = build_graph(spec, n_workers, seed)
    cfg = replace(build_run_config(spec, seed, shards), schedule=engine.COROLLARY, diagnostic_every=1)
    trace = engine.run_algorithm(spec.algorithm, graph, shards, cfg, threads=threads)
    k = metrics.rounds_to_threshold(trace, epsilon)
    return None if k is None else k + 1


def median_rounds(values):
    """Median over seeds, an unreached seed counting as infinitely slow."""
    arr = np.array([math.inf if v is None else float(v) for v in values])
    med = float(np.median(arr))
    return None if math.isinf(med) else med


def speedup_table(spec, counts, epsilon, threads=1):
    base = None
    rows = []
    for n in counts:
        per_seed = [rounds_needed(spec, n, seed, epsilon, threads) for seed in spec.seeds]
        med = median_rounds(per_seed)
        reached = sum(v is not None for v in per_seed)
        logger.info("N=%d: rounds per seed %s, median %s", n, per_seed, med)
        if base is None:
            base = med
            ratio = 1.0
        else:
            ratio = base / med if base is not None and med is not None else None
        rows.append([io_utils.SCHEMA_VERSION, n, med, ratio, reached])
    return rows


def sweep_cmd(args) -> int:
    spec = parse_spec(args.spec)
    validate_spec(spec)
    if spec.task.kind != "planted":
        raise SpecError("the speedup sweep needs a planted task so per-worker data can stay fixed", field="task.kind")

    counts = parse_counts(args.counts) if args.counts is not None else list(spec.sweep.worker_counts)
    if not counts:
        raise SpecError("no worker counts given", field="sweep.worker_counts")
    if any(n < 1 for n in counts):
        raise SpecError("worker counts must be positive", field="sweep.worker_counts")
    counts = sorted(set(counts))

    epsilon = args.epsilon if args.epsilon is not None else spec.sweep.epsilon
    if epsilon is None or epsilon <= 0:
        raise SpecError("a positive epsilon is required", field="sweep.epsilon")

    out_dir = args.out or spec.output.dir
    io_utils.ensure_dir(out_dir)
    rows = speedup_table(spec, counts, epsilon, args.threads)
    path = io_utils.output_path(out_dir, "speedup.csv")
    io_utils.write_table_csv(path, SPEEDUP_COLUMNS, rows)

    print(f"{'N':>5} {'rounds':>10} {'speedup':>9}")
    for _, n, med, ratio, _reached in rows:
        med_text = "absent" if med is None else f"{med:g}"
        ratio_text = "-" if ratio is None else f"{ratio:.3f}"
        print(f"{n:>5} {med_text:>10} {ratio_text:>9}")
    io_utils.print_status(f"speedup table written to {path}", ok=True)
    return 0
