"""
engine.py

DePRL rounds (tau head steps, one representation half-step, gossip of the
representation), the D-PSGD baseline, learning-rate schedules, checkpoints and
the new-worker generalization protocol.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

import metrics
import model
from data import Shard, sample_batch
from errors import InvalidArgumentError, MalformedShardFileError, RunAbortedError
from model import HeadParams, LossSpec, RepresentationParams
from topology import ConsensusMatrix, Graph, MixingParams, metropolis_weights, mixing_params
from utils.rng import PHASE_DPSGD, PHASE_GENERALIZE, PHASE_HEAD, PHASE_INIT, PHASE_PHI, SHARED, substream

logger = logging.getLogger(__name__)

CONSTANT = "constant"
DECAY = "decay"
COROLLARY = "corollary"
SCHEDULES = (CONSTANT, DECAY, COROLLARY)

DEPRL = "deprl"
DPSGD = "dpsgd"

CHECKPOINT_FORMAT = "deprl-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class WorkerState:
    worker_id: int
    phi: RepresentationParams
    theta: HeadParams
    seed: int = 0  # rng stream key is (seed, worker_id, round, phase, step)

    def stream(self, round_index: int, phase: int, step: int = 0) -> np.random.Generator:
        return substream(self.seed, self.worker_id, round_index, phase, step)

    def copy(self) -> "WorkerState":
        return WorkerState(self.worker_id, self.phi.copy(), self.theta.copy(), self.seed)


@dataclass
class RunConfig:
    alpha: float = 0.005
    beta: float = 0.01
    tau: int = 2
    rounds: int = 100
    batch_size: Optional[int] = 16
    loss: LossSpec = field(default_factory=LossSpec)
    schedule: str = CONSTANT
    decay: float = 0.96
    seed: int = 0
    model_kind: str = model.LINEAR
    z: int = 2
    hidden: Optional[int] = None
    weight_decay: float = 0.0
    phi_steps: int = 1
    shared_head_init: bool = False
    # M(k) is only evaluated on recorded rounds, so with a stride above 1
    # running_avg_m is the mean over recorded rounds, not over every round
    diagnostic_every: int = 1
    theta_norm: str = metrics.NORM_OF_MEAN

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise InvalidArgumentError(f"unknown schedule '{self.schedule}'")
        if self.schedule != COROLLARY and (self.alpha < 0 or self.beta < 0):
            raise InvalidArgumentError("learning rates must be non-negative")
        if self.tau < 1 or self.phi_steps < 1:
            raise InvalidArgumentError("tau and phi_steps must be at least 1")
        if self.rounds < 0:
            raise InvalidArgumentError("rounds must be non-negative")
        if not 0.0 < self.decay <= 1.0:
            raise InvalidArgumentError(f"decay rate must be in (0, 1], got {self.decay}")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be positive")
        if self.diagnostic_every < 1:
            raise InvalidArgumentError("diagnostic_every must be at least 1")
        if self.theta_norm not in metrics.THETA_NORM_MODES:
            raise InvalidArgumentError(f"unknown theta_norm mode '{self.theta_norm}'")
        if self.weight_decay < 0:
            raise InvalidArgumentError("weight_decay must be non-negative")

    def rates(self, k: int, n_workers: int) -> Tuple[float, float]:
        """(alpha_k, beta_k) for round k."""
        if self.schedule == COROLLARY:
            return corollary_rates(n_workers, max(self.rounds, 1), self.tau)
        if self.schedule == DECAY:
            g = self.decay**k
            return self.alpha * g, self.beta * g
        return self.alpha, self.beta


@dataclass
class MetricsTrace:
    records: List[metrics.MetricsRecord]
    summary: dict
    final_states: List[WorkerState]

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class Checkpoint:
    algorithm: str
    seed: int
    round_index: int
    states: List[WorkerState]
    m_sum: float = 0.0
    m_count: int = 0

    def to_json(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "algorithm": self.algorithm,
            "seed": self.seed,
            "round_index": self.round_index,
            "m_sum": self.m_sum,
            "m_count": self.m_count,
            "workers": [{"worker_id": s.worker_id, "phi": s.phi.to_json(), "theta": s.theta.to_json()} for s in self.states],
        }

    @classmethod
    def from_json(cls, doc: dict, path: str = "<memory>") -> "Checkpoint":
        try:
            if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
                raise ValueError("not a version-1 checkpoint")
            seed = int(doc["seed"])
            states = [
                WorkerState(int(w["worker_id"]), RepresentationParams.from_json(w["phi"]), HeadParams.from_json(w["theta"]), seed)
                for w in doc["workers"]
            ]
            return cls(doc["algorithm"], seed, int(doc["round_index"]), states, float(doc["m_sum"]), int(doc["m_count"]))
        except (KeyError, TypeError, ValueError, InvalidArgumentError) as e:
            raise MalformedShardFileError(path, str(e)) from e


@dataclass
class GeneralizationResult:
    heads: List[HeadParams]
    accuracies: Optional[List[float]]
    test_losses: List[float]

    @property
    def mean_accuracy(self) -> Optional[float]:
        return None if self.accuracies is None else float(np.mean(self.accuracies))

    @property
    def mean_test_loss(self) -> float:
        return float(np.mean(self.test_losses))


# ---------------------------
# Learning rates
# ---------------------------
def corollary_rates(n_workers: int, rounds: int, tau: int) -> Tuple[float, float]:
    """alpha = 1 / (tau sqrt(K)), beta = sqrt(N / K)."""
    if n_workers <= 0 or rounds <= 0 or tau <= 0:
        raise InvalidArgumentError("n_workers, rounds and tau must be positive")
    return 1.0 / (tau * math.sqrt(rounds)), math.sqrt(n_workers / rounds)


def corollary_k_terms(n_workers: int, big_c: float, q: float, lipschitz_l: float) -> Tuple[float, float, float]:
    n, L = n_workers, lipschitz_l
    return (
        18.0 * big_c**2 * L**2 * n**3 / (1.0 - q) ** 2,
        (2.0 * L**2 + 2.0) ** 2 / (n * L**4),
        n * L**2,
    )


def corollary_k_floor(n_workers: int, big_c: float, q: float, lipschitz_l: float) -> int:
    """Smallest K allowed by the corollary."""
    if n_workers <= 0 or lipschitz_l <= 0 or not 0.0 <= q < 1.0:
        raise InvalidArgumentError("need positive N and L and q in [0, 1)")
    if not math.isfinite(big_c):
        raise InvalidArgumentError("C is infinite; no finite K satisfies the corollary")
    return math.ceil(max(corollary_k_terms(n_workers, big_c, q, lipschitz_l)))


def rate_feasibility(alpha: float, beta: float, tau: int, n_workers: int, mix: Optional[MixingParams], lipschitz_l: float) -> List[str]:
    """Violated step-size conditions of the convergence bound.

    Uses alpha <= 1 / (tau L (1 + 36 tau^2)) and beta <= N L^2 / (2 L^2 + 2),
    the forms the derivation actually needs.
    """
    L = lipschitz_l
    if L <= 0:
        return []
    out = []
    a_max = 1.0 / (tau * L * (1.0 + 36.0 * tau * tau))
    if alpha > a_max:
        out.append(f"alpha={alpha:.6g} exceeds 1/(tau L (1+36 tau^2))={a_max:.6g}")
    caps = {"1/L": 1.0 / L, "N L^2/(2L^2+2)": n_workers * L * L / (2.0 * L * L + 2.0)}
    if mix is not None and mix.is_vacuous:
        out.append("mixing constants vacuous: no beta meets (1-q)/(3 sqrt2 C L N)")
    elif mix is not None:
        caps["(1-q)/(3 sqrt2 C L N)"] = (1.0 - mix.q) / (3.0 * math.sqrt(2.0) * mix.big_c * L * n_workers)
    for name, cap in caps.items():
        if beta > cap:
            out.append(f"beta={beta:.6g} exceeds {name}={cap:.6g}")
    return out


# ---------------------------
# Initialization
# ---------------------------
def init_states(n_workers: int, d: int, c: int, cfg: RunConfig, shared_head: Optional[bool] = None) -> List[WorkerState]:
    """Same phi(0) everywhere; heads independent unless shared_head."""
    shared_head = cfg.shared_head_init if shared_head is None else shared_head
    phi0 = model.init_representation(cfg.model_kind, d, cfg.z, substream(cfg.seed, SHARED, 0, PHASE_INIT), cfg.hidden)
    states = []
    for i in range(n_workers):
        rng = substream(cfg.seed, SHARED, 1, PHASE_INIT) if shared_head else substream(cfg.seed, i, 0, PHASE_INIT)
        states.append(WorkerState(i, phi0.copy(), model.init_head(cfg.z, c, rng), cfg.seed))
    return states


def _check_inputs(graph_or_n, shards: Sequence[Shard]):
    n = graph_or_n.n_workers if hasattr(graph_or_n, "n_workers") else int(graph_or_n)
    if n != len(shards):
        raise InvalidArgumentError(f"graph has {n} workers but {len(shards)} shards were given")
    dims = {sh.dim for sh in shards}
    outs = {sh.n_outputs for sh in shards}
    if len(dims) != 1 or len(outs) != 1:
        raise InvalidArgumentError("shards disagree on input or output dimension")


# ---------------------------
# Rounds
# ---------------------------
def _sgd(params, grad, rate: float, weight_decay: float):
    vec = params.flatten()
    g = grad.flatten()
    if weight_decay:
        g = g + weight_decay * vec
    return params.unflatten(vec - rate * g)


def _require_finite(vec: np.ndarray, worker: int, k: int, what: str):
    if not np.all(np.isfinite(vec)):
        raise RunAbortedError(worker, k, what)


def _consensus(P: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Row i <- sum_j P(i,j) X_j, written as X_i + sum_{j != i} P(i,j)(X_j - X_i)
    so that rows already in agreement stay bit-identical."""
    out = np.empty_like(X)
    for i in range(X.shape[0]):
        w = P[i].copy()
        w[i] = 0.0
        out[i] = X[i] + w @ (X - X[i])
    return out


def _map(fn, items, executor: Optional[ThreadPoolExecutor]):
    if executor is None:
        return [fn(x) for x in items]
    return list(executor.map(fn, items))


def _deprl_local(state: WorkerState, shard: Shard, cfg: RunConfig, k: int, alpha: float, beta: float):
    """Steps (1) and (2) for one worker; touches nothing but its own state."""
    i = state.worker_id
    theta = state.theta
    for s in range(cfg.tau):
        batch = sample_batch(shard.train, cfg.batch_size, state.stream(k, PHASE_HEAD, s))
        theta = _sgd(theta, model.grad_theta(state.phi, theta, batch, cfg.loss), alpha, cfg.weight_decay)
    _require_finite(theta.flatten(), i, k, "head")

    phi = state.phi
    for t in range(cfg.phi_steps):
        batch = sample_batch(shard.train, cfg.batch_size, state.stream(k, PHASE_PHI, t))
        phi = _sgd(phi, model.grad_phi(phi, theta, batch, cfg.loss), beta, cfg.weight_decay)
    _require_finite(phi.flatten(), i, k, "representation")
    return theta, phi


def deprl_round(
    states: Sequence[WorkerState],
    p_mat: ConsensusMatrix,
    shards: Sequence[Shard],
    cfg: RunConfig,
    k: int,
    alpha: Optional[float] = None,
    beta: Optional[float] = None,
    executor: Optional[ThreadPoolExecutor] = None,
) -> List[WorkerState]:
    """One synchronous round. The consensus step reads only the half-step
    representations of this round."""
    n = len(states)
    if len(shards) != n or p_mat.n_workers != n:
        raise InvalidArgumentError(f"{n} states, {len(shards)} shards, {p_mat.n_workers}x{p_mat.n_workers} consensus matrix")
    if len({s.phi.shape_key() for s in states}) != 1:
        raise InvalidArgumentError("workers hold representations of different shapes")
    if alpha is None or beta is None:
        alpha, beta = cfg.rates(k, n)

    half = _map(lambda pair: _deprl_local(pair[0], pair[1], cfg, k, alpha, beta), list(zip(states, shards)), executor)

    # barrier: every half-step is in before anyone mixes
    X = np.stack([phi.flatten() for _, phi in half])
    mixed = _consensus(p_mat.weights, X)
    out = []
    for i, (theta, phi) in enumerate(half):
        _require_finite(mixed[i], states[i].worker_id, k, "representation after consensus")
        out.append(WorkerState(states[i].worker_id, phi.unflatten(mixed[i]), theta, states[i].seed))
    return out


def _dpsgd_local(state: WorkerState, shard: Shard, cfg: RunConfig, k: int, rate: float):
    batch = sample_batch(shard.train, cfg.batch_size, state.stream(k, PHASE_DPSGD))
    _, g_phi, g_theta = model.loss_and_grads(state.phi, state.theta, batch, cfg.loss)
    phi = _sgd(state.phi, g_phi, rate, cfg.weight_decay)
    theta = _sgd(state.theta, g_theta, rate, cfg.weight_decay)
    vec = np.concatenate([phi.flatten(), theta.flatten()])
    _require_finite(vec, state.worker_id, k, "model")
    return vec


def dpsgd_round(
    states: Sequence[WorkerState],
    p_mat: ConsensusMatrix,
    shards: Sequence[Shard],
    cfg: RunConfig,
    k: int,
    rate: Optional[float] = None,
    executor: Optional[ThreadPoolExecutor] = None,
) -> List[WorkerState]:
    """Adapt-then-combine on the whole model (phi and theta as one vector)."""
    n = len(states)
    if len(shards) != n or p_mat.n_workers != n:
        raise InvalidArgumentError(f"{n} states, {len(shards)} shards, {p_mat.n_workers}x{p_mat.n_workers} consensus matrix")
    if rate is None:
        rate = cfg.rates(k, n)[1]
    X = np.stack(_map(lambda pair: _dpsgd_local(pair[0], pair[1], cfg, k, rate), list(zip(states, shards)), executor))
    mixed = _consensus(p_mat.weights, X)
    p = states[0].phi.size
    return [
        WorkerState(s.worker_id, s.phi.unflatten(mixed[i, :p]), s.theta.unflatten(mixed[i, p:]), s.seed)
        for i, s in enumerate(states)
    ]


# ---------------------------
# Runs
# ---------------------------
def _summary(records, states, shards, cfg, m_sum, m_count, wall_time) -> dict:
    spec = cfg.loss
    has_test = all(len(sh.test) for sh in shards)
    return {
        "rounds": cfg.rounds,
        "records": len(records),
        "running_avg_m": (m_sum / m_count) if m_count else None,
        "running_avg_m_rounds": m_count,
        "final_avg_train_loss": metrics.average_loss(states, shards, spec, "train"),
        "final_avg_test_loss": metrics.average_loss(states, shards, spec, "test") if has_test else None,
        "final_avg_test_accuracy": metrics.accuracy(states, shards, spec)[1] if spec.is_classification and has_test else None,
        "final_consensus_err": metrics.consensus_error(states),
        "wall_time_s": wall_time,
    }


def _run(
    algorithm: str,
    graph: Graph,
    shards: Sequence[Shard],
    cfg: RunConfig,
    threads: int,
    checkpoint_every: Optional[int],
    on_checkpoint: Optional[Callable[[Checkpoint], None]],
    resume: Optional[Checkpoint],
    lipschitz_estimate: Optional[float],
) -> MetricsTrace:
    _check_inputs(graph, shards)
    n = graph.n_workers
    P = metropolis_weights(graph)

    if resume is not None:
        if resume.algorithm != algorithm or len(resume.states) != n or resume.seed != cfg.seed:
            raise InvalidArgumentError("checkpoint does not match this run (algorithm, worker count or seed)")
        states = [s.copy() for s in resume.states]
        start, m_sum, m_count = resume.round_index, resume.m_sum, resume.m_count
    else:
        states = init_states(n, shards[0].dim, shards[0].n_outputs, cfg, shared_head=True if algorithm == DPSGD else None)
        start, m_sum, m_count = 0, 0.0, 0

    if lipschitz_estimate is not None:
        try:
            mix = mixing_params(P)
        except InvalidArgumentError:
            mix = None
        a0, b0 = cfg.rates(0, n)
        for msg in rate_feasibility(a0, b0, cfg.tau, n, mix, lipschitz_estimate):
            logger.warning("step size outside the analysed range: %s", msg)

    logger.info("%s: %d workers, %d rounds, schedule=%s, seed=%d", algorithm, n, cfg.rounds, cfg.schedule, cfg.seed)
    records = []
    t0 = time.perf_counter()
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for k in range(start, cfg.rounds):
            alpha, beta = cfg.rates(k, n)
            if algorithm == DEPRL:
                new_states = deprl_round(states, P, shards, cfg, k, alpha, beta, executor)
                w_alpha, w_tau = alpha, cfg.tau
            else:
                new_states = dpsgd_round(states, P, shards, cfg, k, beta, executor)
                w_alpha, w_tau = beta, 1

            if k % cfg.diagnostic_every == 0 or k == cfg.rounds - 1:
                rec = metrics.make_record(k, states, new_states, shards, cfg.loss, w_alpha, w_tau, beta, cfg.theta_norm)
                m_sum += rec.m_k
                m_count += 1
                rec.running_avg_m = m_sum / m_count
                records.append(rec)
                logger.debug("round %d: M=%.6g consensus=%.3g loss=%.6g", k, rec.m_k, rec.consensus_err, rec.avg_train_loss)

            states = new_states
            if checkpoint_every and on_checkpoint and (k + 1) % checkpoint_every == 0:
                on_checkpoint(Checkpoint(algorithm, cfg.seed, k + 1, [s.copy() for s in states], m_sum, m_count))
    finally:
        if executor is not None:
            executor.shutdown()

    summary = _summary(records, states, shards, cfg, m_sum, m_count, time.perf_counter() - t0)
    logger.info("%s finished: running avg M=%s", algorithm, summary["running_avg_m"])
    return MetricsTrace(records, summary, states)


def run_deprl(
    graph: Graph,
    shards: Sequence[Shard],
    cfg: RunConfig,
    threads: int = 1,
    checkpoint_every: Optional[int] = None,
    on_checkpoint: Optional[Callable[[Checkpoint], None]] = None,
    resume: Optional[Checkpoint] = None,
    lipschitz_estimate: Optional[float] = None,
) -> MetricsTrace:
    return _run(DEPRL, graph, shards, cfg, threads, checkpoint_every, on_checkpoint, resume, lipschitz_estimate)


def run_dpsgd(
    graph: Graph,
    shards: Sequence[Shard],
    cfg: RunConfig,
    threads: int = 1,
    checkpoint_every: Optional[int] = None,
    on_checkpoint: Optional[Callable[[Checkpoint], None]] = None,
    resume: Optional[Checkpoint] = None,
    lipschitz_estimate: Optional[float] = None,
) -> MetricsTrace:
    """Every worker starts from the same (phi, theta); one SGD step with the
    representation rate beta on the whole model, then gossip of the whole model."""
    return _run(DPSGD, graph, shards, cfg, threads, checkpoint_every, on_checkpoint, resume, lipschitz_estimate)


def run_algorithm(algorithm: str, graph: Graph, shards: Sequence[Shard], cfg: RunConfig, **kwargs) -> MetricsTrace:
    if algorithm == DEPRL:
        return run_deprl(graph, shards, cfg, **kwargs)
    if algorithm == DPSGD:
        return run_dpsgd(graph, shards, cfg, **kwargs)
    raise InvalidArgumentError(f"unknown algorithm '{algorithm}'")


# ---------------------------
# New workers
# ---------------------------
def generalize_to_new_workers(
    frozen_phi: RepresentationParams,
    new_shards: Sequence[Shard],
    head_steps: int,
    alpha: float,
    spec: LossSpec,
    batch_size: Optional[int] = None,
    seed: int = 0,
    weight_decay: float = 0.0,
) -> GeneralizationResult:
    """Fresh heads trained on top of a fixed representation; phi never moves."""
    if head_steps < 0:
        raise InvalidArgumentError("head_steps must be non-negative")
    z = frozen_phi.output_dim
    heads, accs, losses = [], [], []
    for j, shard in enumerate(new_shards):
        if shard.dim != frozen_phi.input_dim:
            raise InvalidArgumentError(f"new worker {j} has {shard.dim} features, representation expects {frozen_phi.input_dim}")
        theta = model.init_head(z, shard.n_outputs, substream(seed, j, 0, PHASE_GENERALIZE, 0))
        for s in range(head_steps):
            batch = sample_batch(shard.train, batch_size, substream(seed, j, s, PHASE_GENERALIZE, 1))
            theta = _sgd(theta, model.grad_theta(frozen_phi, theta, batch, spec), alpha, weight_decay)
        heads.append(theta)
        eval_set = shard.test if len(shard.test) else shard.train
        losses.append(model.loss(frozen_phi, theta, eval_set, spec))
        if spec.is_classification:
            accs.append(model.accuracy_on(frozen_phi, theta, eval_set))
    return GeneralizationResult(heads, accs if spec.is_classification else None, losses)
