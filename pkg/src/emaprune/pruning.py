"""Online/reference model pair, loss-discrepancy scoring and top-k selection.

The reference parameters trail the online ones by an exponential moving
average with pace ``beta``. A sample's importance is the absolute difference
of its loss under the two parameter vectors; each step keeps the highest
scoring fraction of the batch. Baseline scorers share the same batch
interface so the trainer can swap them freely.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from . import model as M
from .errors import DimensionError, PreconditionError, UnsupportedTaskError


class ScorerKind(str, Enum):
    MOLPEG = "molpeg"
    SOFT_RANDOM = "soft_random"
    LOSS_MAGNITUDE = "loss_magnitude"
    GRAND = "grand"
    EL2N = "el2n"
    FORGETTING = "forgetting"
    ENTROPY = "entropy"
    LEAST_CONFIDENCE = "least_confidence"

    @classmethod
    def parse(cls, value) -> "ScorerKind":
        try:
            return cls(value)
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise PreconditionError(f"unknown scorer {value!r}; expected one of: {names}") from None


CLASSIFICATION_ONLY = {ScorerKind.EL2N, ScorerKind.ENTROPY,
                       ScorerKind.LEAST_CONFIDENCE, ScorerKind.FORGETTING}


@dataclass(frozen=True)
class ModelPair:
    online: np.ndarray
    reference: np.ndarray
    beta: float
    step: int = 0

    def __post_init__(self):
        if self.online.shape != self.reference.shape:
            raise DimensionError("reference", self.online.shape, self.reference.shape)
        if not 0.0 <= self.beta <= 1.0:
            raise PreconditionError(f"beta must lie in [0, 1], got {self.beta}")

    @classmethod
    def from_pretrained(cls, params, beta: float) -> "ModelPair":
        params = np.array(params, dtype=np.float64)
        return cls(online=params, reference=params.copy(), beta=float(beta), step=0)


def ema_update(pair: ModelPair) -> ModelPair:
    """Move the reference towards the online parameters by ``beta``."""
    b = pair.beta
    if b == 1.0:
        ref = pair.online.copy()
    elif b == 0.0:
        ref = pair.reference.copy()
    else:
        ref = b * pair.online + (1.0 - b) * pair.reference
    return replace(pair, reference=ref)


@dataclass
class GradientHistory:
    """Selected-subset average gradients, weighted by ``(1 - beta)**age`` on query."""

    beta: float
    truncation_tol: float = 1e-9
    entries: deque = field(default_factory=deque)

    @property
    def last_step(self):
        return self.entries[-1][1] if self.entries else None

    def steps(self) -> list:
        return [s for _, s in self.entries]


def _weight(beta: float, age: int) -> float:
    return (1.0 - beta) ** age


def accumulate_ema_gradient(history: GradientHistory, selected_batch_avg_gradient,
                            step: int) -> GradientHistory:
    """Return a new history with ``gradient`` recorded at ``step``.

    Entries whose weight at the next query step (``step + 1``) falls below
    the truncation tolerance are dropped.
    """
    last = history.last_step
    if last is not None and step <= last:
        raise PreconditionError(f"step {step} must exceed last recorded step {last}")
    entries = deque(history.entries)
    entries.append((np.asarray(selected_batch_avg_gradient, dtype=np.float64), int(step)))
    query = step + 1
    while entries and _weight(history.beta, query - entries[0][1]) < history.truncation_tol:
        entries.popleft()
    return GradientHistory(beta=history.beta, truncation_tol=history.truncation_tol,
                           entries=entries)


def ema_gradient(history: GradientHistory, current_step: int, n_params: int | None = None):
    """Weighted sum of the recorded gradients as seen from ``current_step``."""
    if not history.entries:
        if n_params is None:
            raise PreconditionError("empty history needs n_params to size the zero vector")
        return np.zeros(n_params)
    if current_step < history.last_step + 1:
        raise PreconditionError("current_step must come after every recorded step")
    total = np.zeros_like(history.entries[0][0])
    for g, s in history.entries:
        w = _weight(history.beta, current_step - s)
        if w != 0.0:
            total += w * g
    return total


@dataclass(frozen=True)
class PruneDecision:
    selected_ids: tuple
    delta: float
    scores: Mapping[int, float]

    @property
    def keep_count(self) -> int:
        return len(self.selected_ids)


def keep_count(n: int, keep_fraction: float) -> int:
    """``ceil(keep_fraction * n)``, ignoring float noise below 1e-9.

    ``(1 - 0.7) * 10`` is ``3.0000000000000004`` in binary floating point;
    the rounding keeps it at 3.
    """
    return max(1, math.ceil(round(keep_fraction * n, 9)))


def rank_select(scores: np.ndarray, ids: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Positions of the ``keep_count`` best scores, returned in input order.

    Higher scores win; equal scores go to the smaller id.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise PreconditionError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    n = len(ids)
    if n == 0:
        raise PreconditionError("batch must be non-empty")
    k = keep_count(n, keep_fraction)
    order = np.lexsort((ids, -scores))
    return np.sort(order[:k])


def select_topk(scores: Mapping[int, float], batch_ids: Sequence[int],
                keep_fraction: float) -> PruneDecision:
    ids = np.asarray(list(batch_ids), dtype=np.int64)
    if len(ids) == 0:
        raise PreconditionError("batch_ids must be non-empty")
    missing = [i for i in ids.tolist() if i not in scores]
    if missing:
        raise PreconditionError(f"no score for ids {missing[:5]}")
    vals = np.array([scores[i] for i in ids.tolist()], dtype=np.float64)
    pos = rank_select(vals, ids, keep_fraction)
    return PruneDecision(
        selected_ids=tuple(ids[pos].tolist()),
        delta=float(vals[pos].min()),
        scores={int(i): float(v) for i, v in zip(ids, vals)},
    )


class ForgettingState:
    """Per-sample count of correct -> incorrect prediction flips."""

    def __init__(self):
        self.last_correct: dict = {}
        self.counts: dict = {}

    def observe(self, ids, correct) -> np.ndarray:
        out = np.empty(len(ids), dtype=np.float64)
        for k, (i, c) in enumerate(zip(np.asarray(ids).tolist(), np.asarray(correct).tolist())):
            if self.last_correct.get(i, False) and not c:
                self.counts[i] = self.counts.get(i, 0) + 1
            self.last_correct[i] = bool(c)
            out[k] = self.counts.get(i, 0)
        return out


# --- batch scorers -------------------------------------------------------------

def molpeg_scores(pair: ModelPair, X, y, spec: M.ModelSpec) -> np.ndarray:
    """``|L(x, online) - L(x, reference)|`` for each row of ``X``."""
    return np.abs(M.losses(pair.online, X, y, spec) - M.losses(pair.reference, X, y, spec))


def batch_scores(kind, pair: ModelPair, X, y, ids, spec: M.ModelSpec,
                 rng: np.random.Generator | None = None,
                 forgetting_state: ForgettingState | None = None) -> np.ndarray:
    kind = ScorerKind.parse(kind)
    if kind in CLASSIFICATION_ONLY and spec.task != "classification":
        raise UnsupportedTaskError(f"scorer {kind.value} needs a classification task")
    if kind is ScorerKind.MOLPEG:
        return molpeg_scores(pair, X, y, spec)
    if kind is ScorerKind.SOFT_RANDOM:
        if rng is None:
            raise PreconditionError("soft_random needs an rng stream")
        return rng.random(len(ids))
    if kind is ScorerKind.LOSS_MAGNITUDE:
        return M.losses(pair.online, X, y, spec)
    if kind is ScorerKind.GRAND:
        _, grads = M.sample_gradients(pair.online, X, y, spec)
        return np.sqrt(np.einsum("ij,ij->i", grads, grads))
    out = M.logits(pair.online, X, spec)
    probs = M.softmax(out)
    y_int = np.asarray(y).astype(np.int64)
    if kind is ScorerKind.EL2N:
        err = probs.copy()
        err[np.arange(len(y_int)), y_int] -= 1.0
        return np.sqrt(np.einsum("ij,ij->i", err, err))
    if kind is ScorerKind.ENTROPY:
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(probs > 0.0, probs * np.log(probs), 0.0)
        return -plogp.sum(axis=1)
    if kind is ScorerKind.LEAST_CONFIDENCE:
        return 1.0 - probs.max(axis=1)
    if kind is ScorerKind.FORGETTING:
        if forgetting_state is None:
            raise PreconditionError("forgetting scorer needs a ForgettingState")
        return forgetting_state.observe(ids, out.argmax(axis=1) == y_int)
    raise AssertionError(kind)


# --- single-sample entry points ------------------------------------------------

def _row(sample: M.Sample):
    return (np.asarray(sample.features, dtype=np.float64)[None, :],
            np.array([sample.target], dtype=np.float64),
            np.array([sample.id], dtype=np.int64))


def score_molpeg(sample: M.Sample, pair: ModelPair, spec: M.ModelSpec) -> float:
    X, y, _ = _row(sample)
    return float(molpeg_scores(pair, X, y, spec)[0])


def score_baseline(kind, sample: M.Sample, pair: ModelPair, spec: M.ModelSpec,
                   rng_stream=None, forgetting_state=None) -> float:
    X, y, ids = _row(sample)
    return float(batch_scores(kind, pair, X, y, ids, spec, rng=rng_stream,
                              forgetting_state=forgetting_state)[0])
