"""
data.py

Synthetic multi-worker tasks with a planted shared representation, Dirichlet
label-skew partitioning, and the shard file format.

Shard file (JSON, one document):

    {
      "format": "deprl-shards",
      "version": 1,
      "n_workers": N,
      "d": d,
      "c": c,                      # classes, or output dimension for regression
      "task": "classification" | "regression",
      "counts": [[n_train, n_test], ...],     # one pair per worker
      "workers": [
        {"worker_id": i,
         "train": {"inputs": [[...], ...], "targets": [...]},
         "test":  {"inputs": [[...], ...], "targets": [...]}},
        ...
      ]
    }

Class targets are integers; regression targets are lists of c reals. Reals are
written by the json module, which uses the shortest repr that round-trips.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

import model
from errors import InvalidArgumentError, MalformedShardFileError, ShardIOError
from model import Batch, HeadParams, RepresentationParams
from utils.rng import PHASE_PARTITION, PHASE_TASK, SHARED, substream

logger = logging.getLogger(__name__)

SHARD_FORMAT = "deprl-shards"
SHARD_VERSION = 1
TEST_FRACTION = 0.2

REGRESSION = "regression"
CLASSIFICATION = "classification"


@dataclass(frozen=True)
class Shard:
    worker_id: int
    train: Batch
    test: Batch
    n_classes: Optional[int] = None  # None for regression

    def __post_init__(self):
        if len(self.train) == 0:
            raise InvalidArgumentError(f"worker {self.worker_id} has an empty train set")

    @property
    def is_classification(self) -> bool:
        return self.n_classes is not None

    @property
    def dim(self) -> int:
        return self.train.dim

    @property
    def n_outputs(self) -> int:
        return self.n_classes if self.is_classification else self.train.targets.shape[1]

    @property
    def class_histogram(self) -> Optional[np.ndarray]:
        if not self.is_classification:
            return None
        return np.bincount(self.train.targets, minlength=self.n_classes)

    def __len__(self) -> int:
        return len(self.train) + len(self.test)


@dataclass
class PlantedTask:
    phi_star: RepresentationParams
    heads_star: List[HeadParams]
    noise_std: float
    shards: List[Shard]
    heterogeneity: float = 0.0
    output: str = REGRESSION
    extra: dict = field(default_factory=dict)


# ---------------------------
# Planted tasks
# ---------------------------
def orthonormal_rows(z: int, d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, z)))
    # sign fix so the draw is a deterministic function of the rng state
    q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    return q.T.copy()


def _split_count(m: int, test_fraction: float) -> int:
    """Test examples for a worker holding m, leaving at least one for training."""
    n_test = int(round(test_fraction * m))
    if test_fraction > 0 and m >= 2:
        n_test = max(1, n_test)
    return min(n_test, m - 1)


def generate_planted(
    n_workers: int,
    d: int,
    z: int,
    samples_per_worker: int,
    noise_std: float,
    heterogeneity: float,
    seed: int,
    output: str = REGRESSION,
    n_outputs: int = 1,
    test_fraction: float = TEST_FRACTION,
) -> PlantedTask:
    """
    phi* has orthonormal rows; theta_i* = (1 - h) theta_bar + h xi_i.
    Regression targets are theta_i* phi* x + noise_std * eps. For the
    classification variant, labels are the argmax of the noisy logits and
    n_outputs is the number of classes.
    """
    if z > d:
        raise InvalidArgumentError(f"z={z} exceeds d={d}")
    if samples_per_worker < 2:
        raise InvalidArgumentError("samples_per_worker must be at least 2")
    if n_workers < 1:
        raise InvalidArgumentError("n_workers must be positive")
    if not 0.0 <= heterogeneity <= 1.0:
        raise InvalidArgumentError(f"heterogeneity must be in [0, 1], got {heterogeneity}")
    if noise_std < 0:
        raise InvalidArgumentError("noise_std must be non-negative")
    if output not in (REGRESSION, CLASSIFICATION):
        raise InvalidArgumentError(f"unknown task output '{output}'")
    if output == CLASSIFICATION and n_outputs < 2:
        raise InvalidArgumentError("classification needs at least 2 classes")

    shared_rng = substream(seed, SHARED, 0, PHASE_TASK)
    phi_star = RepresentationParams(model.LINEAR, {"B": orthonormal_rows(z, d, shared_rng)})
    theta_bar = shared_rng.standard_normal((n_outputs, z))

    heads, shards = [], []
    n_test = _split_count(samples_per_worker, test_fraction)
    for i in range(n_workers):
        rng = substream(seed, i, 0, PHASE_TASK)
        xi = rng.standard_normal((n_outputs, z))
        head = HeadParams((1.0 - heterogeneity) * theta_bar + heterogeneity * xi, np.zeros(n_outputs))
        heads.append(head)

        X = rng.standard_normal((samples_per_worker, d))
        clean = model.predict(phi_star, head, X)
        if noise_std > 0:
            noisy = clean + noise_std * rng.standard_normal(clean.shape)
        else:
            noisy = clean
        Y = np.argmax(noisy, axis=1) if output == CLASSIFICATION else noisy

        cut = samples_per_worker - n_test
        shards.append(
            Shard(
                worker_id=i,
                train=Batch(X[:cut], Y[:cut]),
                test=Batch(X[cut:], Y[cut:]),
                n_classes=n_outputs if output == CLASSIFICATION else None,
            )
        )

    return PlantedTask(phi_star, heads, noise_std, shards, heterogeneity=heterogeneity, output=output)


def generate_labeled_pool(n_examples: int, d: int, z: int, n_classes: int, noise_std: float, seed: int):
    """One planted classifier over a pooled dataset, for Dirichlet partitioning."""
    if z > d:
        raise InvalidArgumentError(f"z={z} exceeds d={d}")
    rng = substream(seed, SHARED, 1, PHASE_TASK)
    phi_star = RepresentationParams(model.LINEAR, {"B": orthonormal_rows(z, d, rng)})
    head = HeadParams(rng.standard_normal((n_classes, z)), np.zeros(n_classes))
    X = rng.standard_normal((n_examples, d))
    logits = model.predict(phi_star, head, X)
    if noise_std > 0:
        logits = logits + noise_std * rng.standard_normal(logits.shape)
    return X, np.argmax(logits, axis=1).astype(np.int64)


# ---------------------------
# Dirichlet partition
# ---------------------------
def largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to total; leftover units go to the largest
    fractional parts, ties to the lower index."""
    raw = np.asarray(shares, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    left = total - int(counts.sum())
    frac = raw - counts
    if left > 0:
        order = sorted(range(len(frac)), key=lambda i: (-frac[i], i))
        for i in order[:left]:
            counts[i] += 1
    while left < 0:
        # shares summing a hair above 1
        i = int(np.argmax(counts))
        counts[i] -= 1
        left += 1
    return counts


def dirichlet_partition(
    inputs: np.ndarray,
    labels: np.ndarray,
    n_workers: int,
    pi: float,
    seed: int,
    n_classes: Optional[int] = None,
    test_fraction: float = TEST_FRACTION,
) -> List[Shard]:
    """
    For each class, draw worker proportions from Dir(pi, ..., pi) and hand out
    that class's examples by largest remainder. Empty workers are then filled
    one example at a time from the largest shard, and each worker's examples
    are split train/test stratified by class.
    """
    X = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if n_workers < 2:
        raise InvalidArgumentError("dirichlet_partition needs at least 2 workers")
    if pi <= 0:
        raise InvalidArgumentError(f"pi must be positive, got {pi}")
    if len(y) < n_workers:
        raise InvalidArgumentError(f"{len(y)} examples cannot cover {n_workers} workers")
    if X.shape[0] != len(y):
        raise InvalidArgumentError("inputs and labels differ in length")

    c = int(n_classes) if n_classes is not None else int(y.max()) + 1
    class_counts = np.bincount(y, minlength=c)
    if (class_counts == 0).any():
        empty = int(np.flatnonzero(class_counts == 0)[0])
        raise InvalidArgumentError(f"class {empty} has no examples")

    # owned[w][o] = example indices of class o held by worker w
    owned = [[[] for _ in range(c)] for _ in range(n_workers)]
    for o in range(c):
        rng = substream(seed, SHARED, o, PHASE_PARTITION)
        idx = np.flatnonzero(y == o)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(n_workers, float(pi)))
        counts = largest_remainder(props, len(idx))
        at = 0
        for w in range(n_workers):
            owned[w][o] = list(idx[at : at + counts[w]])
            at += counts[w]

    sizes = [sum(len(cls) for cls in owned[w]) for w in range(n_workers)]
    for w in range(n_workers):
        if sizes[w] == 0:
            donor = max(range(n_workers), key=lambda v: (sizes[v], -v))
            o = next(o for o in range(c) if owned[donor][o])
            owned[w][o].append(owned[donor][o].pop())
            sizes[donor] -= 1
            sizes[w] += 1
            logger.debug("worker %d was empty; took one class-%d example from worker %d", w, o, donor)

    shards = []
    for w in range(n_workers):
        per_class = np.array([len(owned[w][o]) for o in range(c)], dtype=np.float64)
        n_test = _split_count(int(per_class.sum()), test_fraction)
        test_quota = largest_remainder(per_class / per_class.sum(), n_test) if n_test else np.zeros(c, dtype=np.int64)
        train_idx, test_idx = [], []
        for o in range(c):
            test_idx.extend(owned[w][o][: test_quota[o]])
            train_idx.extend(owned[w][o][test_quota[o] :])
        train_idx = np.array(train_idx, dtype=np.int64)
        test_idx = np.array(test_idx, dtype=np.int64)
        shards.append(
            Shard(
                worker_id=w,
                train=Batch(X[train_idx].reshape(-1, X.shape[1]), y[train_idx]),
                test=Batch(X[test_idx].reshape(-1, X.shape[1]), y[test_idx]),
                n_classes=c,
            )
        )
    return shards


def class_proportions(shards: Sequence[Shard]) -> np.ndarray:
    """(N, c) per-worker class distribution over train+test."""
    rows = []
    for s in shards:
        counts = np.bincount(np.concatenate([s.train.targets, s.test.targets]), minlength=s.n_classes)
        rows.append(counts / counts.sum())
    return np.array(rows)


# ---------------------------
# Shard files
# ---------------------------
def _batch_to_json(batch: Batch, classification: bool) -> dict:
    targets = batch.targets.tolist()
    return {"inputs": batch.inputs.tolist(), "targets": targets if classification else [list(map(float, t)) for t in targets]}


def shards_to_json(shards: Sequence[Shard]) -> dict:
    if not shards:
        raise InvalidArgumentError("no shards to save")
    first = shards[0]
    classification = first.is_classification
    return {
        "format": SHARD_FORMAT,
        "version": SHARD_VERSION,
        "n_workers": len(shards),
        "d": first.dim,
        "c": first.n_outputs,
        "task": CLASSIFICATION if classification else REGRESSION,
        "counts": [[len(s.train), len(s.test)] for s in shards],
        "workers": [
            {
                "worker_id": s.worker_id,
                "train": _batch_to_json(s.train, classification),
                "test": _batch_to_json(s.test, classification),
            }
            for s in shards
        ],
    }


def save_shards(shards: Sequence[Shard], path: str) -> None:
    doc = shards_to_json(shards)
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(doc, f)
        os.replace(tmp, path)
    except OSError as e:
        raise ShardIOError(path, e.strerror or str(e)) from e


def _batch_from_json(doc: dict, d: int, c: int, classification: bool, n_expected: int) -> Batch:
    inputs = np.array(doc["inputs"], dtype=np.float64).reshape(-1, d) if doc["inputs"] else np.zeros((0, d))
    if classification:
        targets = np.array(doc["targets"], dtype=np.int64).reshape(-1)
    else:
        targets = np.array(doc["targets"], dtype=np.float64).reshape(-1, c)
    if len(inputs) != n_expected or len(targets) != n_expected:
        raise ValueError(f"expected {n_expected} examples, found {len(inputs)} inputs / {len(targets)} targets")
    return Batch(inputs, targets)


def shards_from_json(doc: dict, path: str = "<memory>") -> List[Shard]:
    try:
        if doc.get("format") != SHARD_FORMAT:
            raise ValueError(f"unexpected format tag {doc.get('format')!r}")
        if doc.get("version") != SHARD_VERSION:
            raise ValueError(f"unsupported version {doc.get('version')!r}")
        n, d, c = int(doc["n_workers"]), int(doc["d"]), int(doc["c"])
        classification = doc["task"] == CLASSIFICATION
        workers, counts = doc["workers"], doc["counts"]
        if len(workers) != n or len(counts) != n:
            raise ValueError(f"header says {n} workers, found {len(workers)} blocks / {len(counts)} counts")
        shards = []
        for block, (n_train, n_test) in zip(workers, counts):
            shards.append(
                Shard(
                    worker_id=int(block["worker_id"]),
                    train=_batch_from_json(block["train"], d, c, classification, n_train),
                    test=_batch_from_json(block["test"], d, c, classification, n_test),
                    n_classes=c if classification else None,
                )
            )
        return shards
    except (KeyError, TypeError, ValueError, InvalidArgumentError) as e:
        raise MalformedShardFileError(path, str(e)) from e


def load_shards(path: str) -> List[Shard]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ShardIOError(path, e.strerror or str(e)) from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise MalformedShardFileError(path, f"invalid JSON ({e.msg} at line {e.lineno})") from e
    if not isinstance(doc, dict):
        raise MalformedShardFileError(path, "top level is not an object")
    return shards_from_json(doc, path)


def steps_for_epochs(shard_size: int, batch_size: int, epochs: int) -> int:
    """tau for a head update of `epochs` passes over a shard."""
    return max(1, math.ceil(shard_size / batch_size) * epochs)


def sample_batch(train: Batch, batch_size: Optional[int], rng: np.random.Generator) -> Batch:
    """Minibatch drawn without replacement; the whole set, in order, when
    batch_size is None or covers it."""
    if batch_size is None or batch_size >= len(train):
        return train
    if batch_size < 1:
        raise InvalidArgumentError(f"batch_size must be positive, got {batch_size}")
    idx = rng.choice(len(train), size=batch_size, replace=False)
    return train.subset(idx)
