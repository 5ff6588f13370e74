"""Parameter update rules over flat float64 vectors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, PreconditionError


def _same_shape(params, gradient):
    params = np.asarray(params, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if params.shape != gradient.shape:
        raise DimensionError("gradient", params.shape, gradient.shape)
    return params, gradient


def sgd_step(params, gradient, alpha: float) -> np.ndarray:
    params, gradient = _same_shape(params, gradient)
    if alpha < 0:
        raise PreconditionError(f"learning rate must be non-negative, got {alpha}")
    return params - alpha * gradient


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n_params: int) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), t=0)


def adam_step(state: AdamState, params, gradient, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8):
    """Bias-corrected Adam update. Returns ``(new_state, new_params)``."""
    params, gradient = _same_shape(params, gradient)
    if state.m.shape != params.shape:
        raise DimensionError("adam_state", params.shape, state.m.shape)
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * gradient
    v = b2 * state.v + (1.0 - b2) * gradient * gradient
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(m=m, v=v, t=t), new_params
