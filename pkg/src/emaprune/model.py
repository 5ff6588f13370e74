"""Multilayer perceptron over a flat float64 parameter vector.

Every parameter vector is laid out layer by layer, each layer as its weight
matrix ``W`` (``out x in``, row-major) followed by its bias ``b``. The heavy
lifting (forward pass, per-sample backprop) happens in the kernel backend
selected by :mod:`emaprune._backend`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._backend import kernels
from .errors import DimensionError, NumericalOverflowError, PreconditionError

TASKS = ("classification", "regression")
ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple = ()
    output_dim: int = 2
    task: str = "classification"
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.task not in TASKS:
            raise PreconditionError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.activation not in ACTIVATIONS:
            raise PreconditionError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise PreconditionError("layer widths must be positive")
        if self.task == "classification" and self.output_dim < 2:
            raise PreconditionError("classification needs output_dim >= 2")
        if self.task == "regression" and self.output_dim != 1:
            raise PreconditionError("regression needs output_dim == 1")

    @property
    def sizes(self) -> tuple:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def n_params(self) -> int:
        s = self.sizes
        return sum(a * b + b for a, b in zip(s[:-1], s[1:]))

    @property
    def task_code(self) -> int:
        return 0 if self.task == "classification" else 1

    @property
    def act_code(self) -> int:
        return 0 if self.activation == "tanh" else 1

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "task": self.task,
            "activation": self.activation,
        }


@dataclass
class Sample:
    id: int
    features: np.ndarray
    target: float
    score: float = 1.0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.score < 0:
            raise PreconditionError("sample score must be non-negative")


def unflatten(params, spec: ModelSpec) -> list:
    """Split a flat vector into ``[(W, b), ...]`` views."""
    params = check_params(params, spec)
    layers = []
    off = 0
    for n_in, n_out in zip(spec.sizes[:-1], spec.sizes[1:]):
        W = params[off:off + n_in * n_out].reshape(n_out, n_in)
        off += n_in * n_out
        layers.append((W, params[off:off + n_out]))
        off += n_out
    return layers


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([np.ravel(W), np.ravel(b)]) for W, b in layers])


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Fan-in scaled uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    parts = []
    for n_in, n_out in zip(spec.sizes[:-1], spec.sizes[1:]):
        bound = 1.0 / np.sqrt(n_in)
        parts.append(rng.uniform(-bound, bound, size=n_in * n_out))
        parts.append(np.zeros(n_out))
    return np.concatenate(parts)


def check_params(params, spec: ModelSpec) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise DimensionError("n_params", spec.n_params, params.shape)
    return params


def check_batch(X, y, spec: ModelSpec):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise DimensionError("input_dim", spec.input_dim, X.shape[-1] if X.ndim else None)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != X.shape[0]:
        raise DimensionError("n_targets", X.shape[0], y.shape[0])
    if spec.task == "classification":
        bad = (y < 0) | (y >= spec.output_dim) | (y != np.floor(y))
        if bad.any():
            raise DimensionError("output_dim", f"class index in [0, {spec.output_dim})", y[bad][0])
    return X, y


def _finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericalOverflowError(f"non-finite {what}")
    return arr


def logits(params, X, spec: ModelSpec) -> np.ndarray:
    """Raw network outputs for a batch, shape ``(B, output_dim)``."""
    params = check_params(params, spec)
    X = _as_2d(X, spec)
    with np.errstate(over="ignore", invalid="ignore"):
        out = kernels.forward_logits(params, X, spec.sizes, spec.act_code)
    return _finite(out, "logits")


def _as_2d(X, spec):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise DimensionError("input_dim", spec.input_dim, X.shape[-1] if X.ndim else None)
    return X


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def losses_from_logits(out: np.ndarray, y, spec: ModelSpec) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if spec.task == "classification":
        m = out.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(out - m).sum(axis=1))
        loss = lse - out[np.arange(out.shape[0]), y.astype(np.int64)]
        # lse >= the chosen logit; clip the rounding-level negatives
        return np.maximum(loss, 0.0)
    err = out[:, 0] - y
    return err * err


def losses(params, X, y, spec: ModelSpec) -> np.ndarray:
    """Per-sample losses for a batch."""
    params = check_params(params, spec)
    X, y = check_batch(X, y, spec)
    with np.errstate(over="ignore", invalid="ignore"):
        out = kernels.forward_logits(params, X, spec.sizes, spec.act_code)
        loss = losses_from_logits(_finite(out, "logits"), y, spec)
    return _finite(loss, "loss")


def sample_gradients(params, X, y, spec: ModelSpec):
    """Per-sample losses ``(B,)`` and gradients ``(B, n_params)``."""
    params = check_params(params, spec)
    X, y = check_batch(X, y, spec)
    with np.errstate(over="ignore", invalid="ignore"):
        loss, grads = kernels.sample_grads(params, X, y, spec.sizes, spec.task_code, spec.act_code)
    _finite(loss, "loss")
    return loss, _finite(grads, "gradient")


def mean_gradient(params, X, y, spec: ModelSpec):
    """Per-sample losses and the batch-average gradient."""
    params = check_params(params, spec)
    X, y = check_batch(X, y, spec)
    if X.shape[0] == 0:
        raise PreconditionError("batch must be non-empty")
    with np.errstate(over="ignore", invalid="ignore"):
        loss, g = kernels.mean_grad(params, X, y, spec.sizes, spec.task_code, spec.act_code)
    _finite(loss, "loss")
    return loss, _finite(g, "gradient")


def _one(sample: Sample, spec: ModelSpec):
    x = np.asarray(sample.features, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != spec.input_dim:
        raise DimensionError("input_dim", spec.input_dim, x.shape)
    return x[None, :], np.array([sample.target], dtype=np.float64)


def forward_loss(params, sample: Sample, spec: ModelSpec) -> float:
    X, y = _one(sample, spec)
    return float(losses(params, X, y, spec)[0])


def per_sample_gradient(params, sample: Sample, spec: ModelSpec) -> np.ndarray:
    X, y = _one(sample, spec)
    return sample_gradients(params, X, y, spec)[1][0]


def batch_gradient(params, batch: Sequence[Sample], spec: ModelSpec) -> np.ndarray:
    if len(batch) == 0:
        raise PreconditionError("batch must be non-empty")
    X = np.stack([np.asarray(s.features, dtype=np.float64) for s in batch])
    y = np.array([s.target for s in batch], dtype=np.float64)
    return mean_gradient(params, X, y, spec)[1]


def predict(params, X, spec: ModelSpec) -> np.ndarray:
    """Class indices (classification) or scalar predictions (regression)."""
    out = logits(params, X, spec)
    if spec.task == "classification":
        return out.argmax(axis=1)
    return out[:, 0]
