# handlers/generalize.py
"""
generalize: train on the first N workers, then freeze the averaged
representation and fit fresh heads for M workers that never took part.
The same head fitting on top of a random representation is the reference.
"""

import logging

import numpy as np

import data
import engine
import metrics
import model
from errors import SpecError
from utils import io_utils
from utils.rng import PHASE_GENERALIZE, SHARED, substream
from utils.spec_utils import build_graph, build_run_config, build_task, parse_spec, validate_spec

logger = logging.getLogger(__name__)


def split_workers(spec, seed):
    """(training shards, new-worker shards)."""
    m = spec.generalize.new_workers
    if m < 1:
        raise SpecError("need at least one new worker", field="generalize.new_workers")
    if spec.generalize.shard_file:
        shards, _ = build_task(spec, seed)
        return shards, data.load_shards(spec.resolve(spec.generalize.shard_file))
    if spec.task.kind == "shard-file":
        raise SpecError("a shard-file task needs generalize.shard_file for the new workers", field="generalize.shard_file")
    n = spec.task.n_workers
    shards, _ = build_task(spec, seed, n_workers=n + m)
    train, new = list(shards[:n]), list(shards[n:])
    # renumber so training worker ids stay 0..N-1
    return [data.Shard(i, s.train, s.test, s.n_classes) for i, s in enumerate(train)], new


def generalize_seed(spec, seed, threads=1):
    shards, new_shards = split_workers(spec, seed)
    graph = build_graph(spec, len(shards), seed)
    cfg = build_run_config(spec, seed, shards)
    trace = engine.run_algorithm(spec.algorithm, graph, shards, cfg, threads=threads)

    g = spec.generalize
    learned_phi = metrics.mean_phi(trace.final_states)
    random_phi = model.init_representation(
        cfg.model_kind, learned_phi.input_dim, learned_phi.output_dim, substream(seed, SHARED, 2, PHASE_GENERALIZE), hidden=cfg.hidden
    )
    kwargs = dict(batch_size=cfg.batch_size, seed=seed, weight_decay=cfg.weight_decay)
    learned = engine.generalize_to_new_workers(learned_phi, new_shards, g.head_steps, g.alpha, cfg.loss, **kwargs)
    baseline = engine.generalize_to_new_workers(random_phi, new_shards, g.head_steps, g.alpha, cfg.loss, **kwargs)

    similarity = metrics.similarity_report(trace.final_states, shards)
    logger.info("seed %d: %d new workers fitted on learned and random representations", seed, len(new_shards))

    return {
        "seed": seed,
        "learned": {
            "mean_accuracy": learned.mean_accuracy,
            "accuracies": learned.accuracies,
            "mean_test_loss": learned.mean_test_loss,
            "test_losses": learned.test_losses,
        },
        "random": {
            "mean_accuracy": baseline.mean_accuracy,
            "accuracies": baseline.accuracies,
            "mean_test_loss": baseline.mean_test_loss,
            "test_losses": baseline.test_losses,
        },
        "training_similarity": similarity,
    }


def _better(row):
    if row["learned"]["mean_accuracy"] is not None:
        return row["learned"]["mean_accuracy"] > row["random"]["mean_accuracy"]
    return row["learned"]["mean_test_loss"] < row["random"]["mean_test_loss"]


def generalize_cmd(args) -> int:
    spec = parse_spec(args.spec)
    validate_spec(spec)
    out_dir = args.out or spec.output.dir
    io_utils.ensure_dir(out_dir)

    rows = [generalize_seed(spec, seed, args.threads) for seed in spec.seeds]
    wins = sum(_better(r) for r in rows)
    learned_means = [r["learned"]["mean_test_loss"] for r in rows]
    doc = {
        "schema_version": io_utils.SCHEMA_VERSION,
        "started_at_utc": io_utils.get_utc_time(),
        "new_workers": spec.generalize.new_workers,
        "head_steps": spec.generalize.head_steps,
        "per_seed": rows,
        "learned_beats_random": wins,
        "mean_learned_test_loss": float(np.mean(learned_means)),
    }
    path = io_utils.output_path(out_dir, "generalization.json")
    io_utils.write_json(path, doc)

    for r in rows:
        la, ra = r["learned"]["mean_accuracy"], r["random"]["mean_accuracy"]
        if la is not None:
            print(f"seed {r['seed']}: accuracy learned {la:.4f} vs random {ra:.4f}")
        else:
            print(f"seed {r['seed']}: test loss learned {r['learned']['mean_test_loss']:.6g} vs random {r['random']['mean_test_loss']:.6g}")
    io_utils.print_status(f"learned representation better on {wins}/{len(rows)} seeds -> {path}", ok=wins == len(rows))
    return 0
