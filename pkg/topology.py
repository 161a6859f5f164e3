"""
topology.py

Communication graphs, Metropolis-Hastings consensus weights and the mixing
constants (p, q, C) of the convergence bound.

Neighborhoods include self: adjacency always has a true diagonal. Degrees used
for the Metropolis weights exclude the self-loop.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Tuple

import networkx as nx
import numpy as np

from errors import ConstructionError, InvalidArgumentError
from utils.rng import PHASE_GRAPH, SHARED, substream

logger = logging.getLogger(__name__)

DEFAULT_RETRY_CAP = 10_000
STOCHASTIC_TOL = 1e-12
# exp() of anything above this is not a finite float64
_LOG_FLOAT_MAX = math.log(np.finfo(np.float64).max)


@dataclass(frozen=True)
class Graph:
    n_workers: int
    adjacency: np.ndarray  # (N, N) bool, symmetric, true diagonal

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        if self.n_workers < 1 or adj.shape != (self.n_workers, self.n_workers):
            raise InvalidArgumentError(f"adjacency must be {self.n_workers}x{self.n_workers}, got {adj.shape}")
        if not np.array_equal(adj, adj.T):
            raise InvalidArgumentError("adjacency must be symmetric")
        if not adj.diagonal().all():
            raise InvalidArgumentError("adjacency diagonal must be all true (self-loops)")
        adj = adj.copy()
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)

    def neighbors(self, i: int) -> List[int]:
        """N_i, self included."""
        return [int(j) for j in np.flatnonzero(self.adjacency[i])]

    def degree(self, i: int) -> int:
        return int(self.adjacency[i].sum()) - 1

    def edges(self) -> List[Tuple[int, int]]:
        """Undirected edges (i < j), self-loops left out."""
        rows, cols = np.nonzero(np.triu(self.adjacency, k=1))
        return [(int(i), int(j)) for i, j in zip(rows, cols)]

    def to_nx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n_workers))
        g.add_edges_from(self.edges())
        return g

    def is_connected(self) -> bool:
        return nx.is_connected(self.to_nx())

    def to_json(self) -> dict:
        return {"n_workers": self.n_workers, "edges": [list(e) for e in self.edges()]}

    @classmethod
    def from_edges(cls, n_workers: int, edges) -> "Graph":
        adj = np.eye(n_workers, dtype=bool)
        for i, j in edges:
            adj[i, j] = adj[j, i] = True
        return cls(n_workers, adj)

    @classmethod
    def from_nx(cls, g: nx.Graph) -> "Graph":
        """Nodes must be 0..N-1; self-loops are added."""
        n = g.number_of_nodes()
        adj = nx.to_numpy_array(g, nodelist=list(range(n)), weight=None) > 0
        np.fill_diagonal(adj, True)
        return cls(n, adj)


@dataclass(frozen=True)
class ConsensusMatrix:
    weights: np.ndarray  # (N, N) float64

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise InvalidArgumentError(f"consensus matrix must be square, got shape {w.shape}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n_workers(self) -> int:
        return self.weights.shape[0]

    def to_json(self) -> list:
        return [float(x) for x in self.weights.ravel()]


@dataclass(frozen=True)
class MixingParams:
    p: float
    q: float
    big_c: float  # math.inf once p^-N leaves the float range

    @property
    def is_vacuous(self) -> bool:
        """True when q rounds to 1 or C is infinite: the consensus conditions cannot be met."""
        return self.q >= 1.0 or not math.isfinite(self.big_c)

    def to_json(self) -> dict:
        return {"p": self.p, "q": self.q, "C": self.big_c if math.isfinite(self.big_c) else None}


def _check_size(n: int):
    if not isinstance(n, (int, np.integer)) or n < 2:
        raise InvalidArgumentError(f"graph needs at least 2 workers, got {n}")


def build_ring(n: int) -> Graph:
    _check_size(n)
    return Graph.from_nx(nx.cycle_graph(n))


def build_complete(n: int) -> Graph:
    _check_size(n)
    return Graph.from_nx(nx.complete_graph(n))


def build_single() -> Graph:
    """One isolated worker; used for single-machine reductions."""
    return Graph(1, np.ones((1, 1), dtype=bool))


def build_random_connected(n: int, edge_prob: float, seed: int, max_attempts: int = DEFAULT_RETRY_CAP) -> Graph:
    """Erdos-Renyi draws, one derived seed per attempt, until the graph is connected."""
    _check_size(n)
    if not 0.0 < edge_prob <= 1.0:
        raise InvalidArgumentError(f"edge_prob must be in (0, 1], got {edge_prob}")

    for attempt in range(max_attempts):
        draw_seed = int(substream(seed, SHARED, attempt, PHASE_GRAPH).integers(2**32))
        g = nx.erdos_renyi_graph(n, edge_prob, seed=draw_seed)
        if nx.is_connected(g):
            if attempt:
                logger.debug("random graph n=%d p=%.3f connected after %d redraws", n, edge_prob, attempt)
            return Graph.from_nx(g)

    raise ConstructionError(
        f"no connected graph after {max_attempts} draws (n={n}, edge_prob={edge_prob}, seed={seed})"
    )


def metropolis_weights(g: Graph) -> ConsensusMatrix:
    if not g.is_connected():
        raise InvalidArgumentError("metropolis_weights needs a connected graph")

    n = g.n_workers
    deg = g.adjacency.sum(axis=1) - 1
    w = np.zeros((n, n))
    for i, j in g.edges():
        w[i, j] = w[j, i] = 1.0 / (1 + max(deg[i], deg[j]))
    for i in range(n):
        w[i, i] = 1.0 - sum(w[i, j] for j in range(n) if j != i)
    return ConsensusMatrix(w)


def verify_doubly_stochastic(p: ConsensusMatrix, tol: float = STOCHASTIC_TOL) -> bool:
    w = np.asarray(p.weights if isinstance(p, ConsensusMatrix) else p, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise InvalidArgumentError(f"expected a square matrix, got shape {w.shape}")
    if (w < -tol).any():
        return False
    return bool(np.all(np.abs(w.sum(axis=1) - 1.0) <= tol) and np.all(np.abs(w.sum(axis=0) - 1.0) <= tol))


def respects_support(p: ConsensusMatrix, g: Graph) -> bool:
    """Nonzero weights only on edges (self-loops included)."""
    return not np.any((p.weights != 0) & ~g.adjacency)


def mixing_params(p_mat: ConsensusMatrix) -> MixingParams:
    """
    p = smallest strictly positive weight, q = (1 - p^N)^(1/N),
    C = 2 (1 + p^-N) / (1 - p^N).

    Worked in log space: on large graphs p^-N overflows, C is then math.inf
    and the result reports is_vacuous.
    """
    w = p_mat.weights
    n = w.shape[0]
    positive = w[w > 0]
    if positive.size == 0:
        raise InvalidArgumentError("consensus matrix has no positive entry")

    p = float(positive.min())
    if p >= 1.0:
        # p = 1 means P is a permutation: nobody mixes, the constants are undefined
        raise InvalidArgumentError(f"mixing constants undefined for p={p} (1 - p^N = 0)")

    log_p_n = n * math.log(p)
    gap = -math.expm1(log_p_n)
    q = math.exp(math.log1p(-math.exp(log_p_n)) / n)
    if -log_p_n >= _LOG_FLOAT_MAX:
        big_c = math.inf
    else:
        big_c = 2.0 * (1.0 + math.exp(-log_p_n)) / gap
    mix = MixingParams(p=p, q=q, big_c=big_c)
    if mix.is_vacuous:
        logger.warning("mixing constants vacuous for N=%d, p=%.3g (q=%r, C=%r)", n, p, q, big_c)
    return mix


def build_graph(kind: str, n: int, edge_prob: float = 0.5, seed: int = 0) -> Graph:
    """Dispatch on the topology names used in experiment specs."""
    if n == 1:
        return build_single()
    if kind == "ring":
        return build_ring(n)
    if kind == "complete":
        return build_complete(n)
    if kind == "random":
        return build_random_connected(n, edge_prob, seed)
    raise InvalidArgumentError(f"unknown topology kind '{kind}'")
