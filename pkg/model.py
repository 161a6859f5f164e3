"""
model.py

Shared representation phi (linear, or one tanh hidden layer), per-worker heads
theta, the two losses and their exact partial gradients.

Shapes:
  linear     phi: B (z, d)
  nonlinear  phi: W1 (h, d), b1 (h,), W2 (z, h), b2 (z,)
  head       theta: A (c, z), bias (c,)
Batches hold inputs (m, d) and targets: (m,) int class indices for
cross-entropy, (m, c) reals for squared loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from errors import InvalidArgumentError

LINEAR = "linear"
NONLINEAR = "nonlinear"
REPRESENTATION_KINDS = (LINEAR, NONLINEAR)

SQUARED = "squared"
CROSS_ENTROPY = "cross-entropy"
LOSS_KINDS = (SQUARED, CROSS_ENTROPY)

_REP_FIELDS = {LINEAR: ("B",), NONLINEAR: ("W1", "b1", "W2", "b2")}


@dataclass(frozen=True)
class LossSpec:
    kind: str = SQUARED

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise InvalidArgumentError(f"unknown loss kind '{self.kind}'")

    @property
    def is_classification(self) -> bool:
        return self.kind == CROSS_ENTROPY


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        if x.ndim != 2:
            raise InvalidArgumentError(f"batch inputs must be (m, d), got shape {x.shape}")
        y = np.asarray(self.targets)
        if y.dtype.kind in "iu":
            y = y.astype(np.int64)
        else:
            y = y.astype(np.float64)
            if y.ndim == 1:
                y = y[:, None]
        if y.shape[0] != x.shape[0]:
            raise InvalidArgumentError(f"{x.shape[0]} inputs but {y.shape[0]} targets")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.targets[idx])


@dataclass
class RepresentationParams:
    """phi. Also used to hold gradients w.r.t. phi."""

    kind: str
    arrays: Dict[str, np.ndarray]

    def __post_init__(self):
        if self.kind not in REPRESENTATION_KINDS:
            raise InvalidArgumentError(f"unknown representation kind '{self.kind}'")
        missing = [k for k in _REP_FIELDS[self.kind] if k not in self.arrays]
        if missing:
            raise InvalidArgumentError(f"{self.kind} representation is missing {missing}")
        self.arrays = {k: np.asarray(self.arrays[k], dtype=np.float64) for k in _REP_FIELDS[self.kind]}

        if self.kind == LINEAR:
            z, d = self.arrays["B"].shape
        else:
            h, d = self.arrays["W1"].shape
            z = self.arrays["W2"].shape[0]
            if self.arrays["b1"].shape != (h,) or self.arrays["W2"].shape != (z, h) or self.arrays["b2"].shape != (z,):
                raise InvalidArgumentError("inconsistent nonlinear representation shapes")
        if z > d:
            raise InvalidArgumentError(f"representation size z={z} exceeds input size d={d}")

    @property
    def input_dim(self) -> int:
        key = "B" if self.kind == LINEAR else "W1"
        return self.arrays[key].shape[1]

    @property
    def output_dim(self) -> int:
        key = "B" if self.kind == LINEAR else "W2"
        return self.arrays[key].shape[0]

    @property
    def hidden_dim(self) -> Optional[int]:
        return None if self.kind == LINEAR else self.arrays["W1"].shape[0]

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in _REP_FIELDS[self.kind]])

    def unflatten(self, vec: np.ndarray) -> "RepresentationParams":
        """New params with this one's kind and shapes, values taken from vec."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise InvalidArgumentError(f"expected {self.size} values, got shape {vec.shape}")
        out, at = {}, 0
        for k in _REP_FIELDS[self.kind]:
            shape = self.arrays[k].shape
            n = self.arrays[k].size
            out[k] = vec[at : at + n].reshape(shape).copy()
            at += n
        return RepresentationParams(self.kind, out)

    def copy(self) -> "RepresentationParams":
        return RepresentationParams(self.kind, {k: v.copy() for k, v in self.arrays.items()})

    def shape_key(self) -> Tuple:
        return (self.kind,) + tuple(self.arrays[k].shape for k in _REP_FIELDS[self.kind])

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "shapes": {k: list(v.shape) for k, v in self.arrays.items()},
            "values": {k: [float(x) for x in v.ravel()] for k, v in self.arrays.items()},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RepresentationParams":
        arrays = {k: np.array(doc["values"][k], dtype=np.float64).reshape(doc["shapes"][k]) for k in doc["shapes"]}
        return cls(doc["kind"], arrays)


@dataclass
class HeadParams:
    """theta. Also used to hold gradients w.r.t. theta."""

    A: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.A.ndim != 2 or self.bias.shape != (self.A.shape[0],):
            raise InvalidArgumentError(f"head shapes A{self.A.shape} / bias{self.bias.shape} are inconsistent")

    @property
    def n_outputs(self) -> int:
        return self.A.shape[0]

    @property
    def input_dim(self) -> int:
        return self.A.shape[1]

    @property
    def size(self) -> int:
        return self.A.size + self.bias.size

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.A.ravel(), self.bias])

    def unflatten(self, vec: np.ndarray) -> "HeadParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise InvalidArgumentError(f"expected {self.size} values, got shape {vec.shape}")
        n = self.A.size
        return HeadParams(vec[:n].reshape(self.A.shape).copy(), vec[n:].copy())

    def copy(self) -> "HeadParams":
        return HeadParams(self.A.copy(), self.bias.copy())

    def to_json(self) -> dict:
        return {"shape": list(self.A.shape), "A": [float(x) for x in self.A.ravel()], "bias": [float(x) for x in self.bias]}

    @classmethod
    def from_json(cls, doc: dict) -> "HeadParams":
        return cls(np.array(doc["A"], dtype=np.float64).reshape(doc["shape"]), np.array(doc["bias"], dtype=np.float64))


# ---------------------------
# Initialization
# ---------------------------
def init_representation(kind: str, d: int, z: int, rng: np.random.Generator, hidden: Optional[int] = None) -> RepresentationParams:
    """Entries i.i.d. uniform on [-1/sqrt(d), 1/sqrt(d)]."""
    if z > d:
        raise InvalidArgumentError(f"representation size z={z} exceeds input size d={d}")
    r = 1.0 / math.sqrt(d)
    if kind == LINEAR:
        return RepresentationParams(LINEAR, {"B": rng.uniform(-r, r, size=(z, d))})
    h = hidden if hidden is not None else max(z, d // 2)
    return RepresentationParams(
        NONLINEAR,
        {
            "W1": rng.uniform(-r, r, size=(h, d)),
            "b1": rng.uniform(-r, r, size=h),
            "W2": rng.uniform(-r, r, size=(z, h)),
            "b2": rng.uniform(-r, r, size=z),
        },
    )


def init_head(z: int, c: int, rng: np.random.Generator) -> HeadParams:
    """Entries i.i.d. uniform on [-1/sqrt(z), 1/sqrt(z)]."""
    r = 1.0 / math.sqrt(z)
    return HeadParams(rng.uniform(-r, r, size=(c, z)), rng.uniform(-r, r, size=c))


# ---------------------------
# Forward
# ---------------------------
def _check_compatible(phi: RepresentationParams, theta: HeadParams, d: int):
    if phi.input_dim != d:
        raise InvalidArgumentError(f"input has {d} features, representation expects {phi.input_dim}")
    if theta.input_dim != phi.output_dim:
        raise InvalidArgumentError(f"head expects {theta.input_dim} features, representation gives {phi.output_dim}")


def _represent(phi: RepresentationParams, X: np.ndarray):
    """(H, hidden activations or None)."""
    if phi.kind == LINEAR:
        return X @ phi.arrays["B"].T, None
    a = phi.arrays
    H1 = np.tanh(X @ a["W1"].T + a["b1"])
    return H1 @ a["W2"].T + a["b2"], H1


def predict(phi: RepresentationParams, theta: HeadParams, X: np.ndarray) -> np.ndarray:
    """Outputs (m, c) for inputs (m, d)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidArgumentError(f"inputs must be (m, d), got shape {X.shape}")
    _check_compatible(phi, theta, X.shape[1])
    H, _ = _represent(phi, X)
    return H @ theta.A.T + theta.bias


def forward(phi: RepresentationParams, theta: HeadParams, x: np.ndarray) -> np.ndarray:
    """theta o phi applied to one d-vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidArgumentError(f"forward takes a single d-vector, got shape {x.shape}")
    return predict(phi, theta, x[None, :])[0]


# ---------------------------
# Losses
# ---------------------------
def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_targets(batch: Batch, spec: LossSpec, c: int):
    if len(batch) == 0:
        raise InvalidArgumentError("batch is empty")
    if spec.is_classification:
        if batch.targets.ndim != 1 or batch.targets.dtype.kind not in "iu":
            raise InvalidArgumentError("cross-entropy needs integer class targets")
        if batch.targets.min() < 0 or batch.targets.max() >= c:
            raise InvalidArgumentError(f"class targets must lie in [0, {c})")
    elif batch.targets.ndim != 2 or batch.targets.shape[1] != c:
        raise InvalidArgumentError(f"squared loss needs (m, {c}) real targets, got {batch.targets.shape}")


def _loss_and_output_grad(out: np.ndarray, batch: Batch, spec: LossSpec):
    """Mean loss and d(loss)/d(outputs)."""
    m = out.shape[0]
    if spec.kind == SQUARED:
        resid = out - batch.targets
        return 0.5 * float(np.sum(resid * resid)) / m, resid / m

    logp = _log_softmax(out)
    rows = np.arange(m)
    value = -float(logp[rows, batch.targets].sum()) / m
    dout = np.exp(logp)
    dout[rows, batch.targets] -= 1.0
    return value, dout / m


def loss(phi: RepresentationParams, theta: HeadParams, batch: Batch, spec: LossSpec) -> float:
    """F_i restricted to the batch: mean per-example loss."""
    _check_compatible(phi, theta, batch.dim)
    _check_targets(batch, spec, theta.n_outputs)
    out = predict(phi, theta, batch.inputs)
    return _loss_and_output_grad(out, batch, spec)[0]


def loss_and_grads(phi: RepresentationParams, theta: HeadParams, batch: Batch, spec: LossSpec):
    """(loss, grad wrt phi, grad wrt theta) in one pass."""
    _check_compatible(phi, theta, batch.dim)
    _check_targets(batch, spec, theta.n_outputs)
    X = batch.inputs
    H, H1 = _represent(phi, X)
    out = H @ theta.A.T + theta.bias
    value, dout = _loss_and_output_grad(out, batch, spec)

    g_theta = HeadParams(dout.T @ H, dout.sum(axis=0))

    dH = dout @ theta.A
    if phi.kind == LINEAR:
        g_phi = RepresentationParams(LINEAR, {"B": dH.T @ X})
    else:
        dZ1 = (dH @ phi.arrays["W2"]) * (1.0 - H1 * H1)
        g_phi = RepresentationParams(
            NONLINEAR,
            {"W1": dZ1.T @ X, "b1": dZ1.sum(axis=0), "W2": dH.T @ H1, "b2": dH.sum(axis=0)},
        )
    return value, g_phi, g_theta


def grad_theta(phi: RepresentationParams, theta: HeadParams, batch: Batch, spec: LossSpec) -> HeadParams:
    return loss_and_grads(phi, theta, batch, spec)[2]


def grad_phi(phi: RepresentationParams, theta: HeadParams, batch: Batch, spec: LossSpec) -> RepresentationParams:
    return loss_and_grads(phi, theta, batch, spec)[1]


def accuracy_on(phi: RepresentationParams, theta: HeadParams, batch: Batch) -> float:
    """Fraction of argmax hits; np.argmax breaks ties toward the lowest class."""
    if len(batch) == 0:
        raise InvalidArgumentError("cannot score an empty test set")
    pred = np.argmax(predict(phi, theta, batch.inputs), axis=1)
    return float(np.mean(pred == batch.targets))
