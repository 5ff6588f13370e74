"""Dynamic-pruning training loop.

Each batch step scores the candidate samples, keeps the top fraction,
updates the online parameters on the kept subset, pulls the reference
parameters towards them by EMA and records the kept-subset gradient.

``selection_mode="batch"`` re-scores and prunes every mini-batch.
``selection_mode="epoch"`` keeps a persistent score table: at the start of
each epoch the top fraction of the whole train split is chosen from the
table, and only the samples actually trained on get fresh scores.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import model as M
from .data import Dataset
from .errors import NumericalOverflowError, PreconditionError, TrainingAbort
from .metrics import accuracy, mae, roc_auc
from .optim import AdamState, adam_step, sgd_step
from .pruning import (ForgettingState, GradientHistory, ModelPair, PruneDecision,
                      ScorerKind, accumulate_ema_gradient, batch_scores, ema_gradient,
                      ema_update, rank_select)

logger = logging.getLogger(__name__)

METRICS = ("auto", "accuracy", "roc_auc", "mae")


@dataclass
class TrainConfig:
    pruning_ratio: float = 0.0
    beta: float = 0.5
    learning_rate: float = 0.01
    epochs: int = 10
    batch_size: int = 64
    scorer: str = "molpeg"
    optimizer: str = "sgd"
    selection_mode: str = "batch"
    seed: int = 0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    metric: str = "auto"
    history_tol: float = 1e-9

    def validate(self):
        if not 0.0 <= self.pruning_ratio < 1.0:
            raise PreconditionError(f"pruning_ratio must lie in [0, 1), got {self.pruning_ratio}")
        if not 0.0 <= self.beta <= 1.0:
            raise PreconditionError(f"beta must lie in [0, 1], got {self.beta}")
        # zero is allowed so a frozen run can be verified
        if self.learning_rate < 0:
            raise PreconditionError("learning_rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise PreconditionError("epochs and batch_size must be positive")
        ScorerKind.parse(self.scorer)
        if self.optimizer not in ("sgd", "adam"):
            raise PreconditionError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.selection_mode not in ("batch", "epoch"):
            raise PreconditionError(f"selection_mode must be batch or epoch, got {self.selection_mode!r}")
        if self.metric not in METRICS:
            raise PreconditionError(f"metric must be one of {METRICS}")
        self.adam_betas = tuple(self.adam_betas)
        return self

    @property
    def keep_fraction(self) -> float:
        return 1.0 - self.pruning_ratio

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float
    test_metric: float
    selected_count: int
    wall_time_seconds: float
    delta_stats: tuple

    def to_dict(self) -> dict:
        d = asdict(self)
        d["delta_stats"] = list(self.delta_stats)
        return d


@dataclass
class StepRecord:
    """Everything the theory checks need about one batch step."""

    step: int
    batch_ids: np.ndarray
    scores: np.ndarray
    selected: np.ndarray          # positions into batch_ids
    theta: np.ndarray             # online params used for scoring
    xi: np.ndarray                # reference params used for scoring
    v_ema: np.ndarray             # EMA gradient as of this step
    selected_grad: np.ndarray     # mean gradient over the kept samples
    theta_next: np.ndarray


@dataclass
class Instrumentation:
    dataset: Dataset
    spec: M.ModelSpec
    config: TrainConfig
    steps: list = field(default_factory=list)

    @property
    def alpha(self) -> float:
        return self.config.learning_rate

    @property
    def beta(self) -> float:
        return self.config.beta

    def deltas(self) -> np.ndarray:
        """``theta_{t+1} - theta_t`` for every recorded step."""
        return np.stack([s.theta_next - s.theta for s in self.steps])

    def batch(self, step: int):
        rec = self.steps[step]
        return rec, self.dataset.X[rec.batch_ids], self.dataset.y[rec.batch_ids]


@dataclass
class TrainResult:
    records: list
    pair: ModelPair
    history: GradientHistory
    instrumentation: Optional[Instrumentation] = None
    steps: int = 0
    scores: Optional[np.ndarray] = None


def time_efficiency(runtime_seconds: float) -> float:
    """Runs per thousand seconds: ``1000 / runtime``."""
    if not runtime_seconds > 0:
        raise PreconditionError(f"runtime must be positive, got {runtime_seconds}")
    return 1000.0 / runtime_seconds


def evaluate(params, X, y, spec: M.ModelSpec, metric: str = "auto") -> float:
    if len(y) == 0:
        return float("nan")
    if metric == "auto":
        if spec.task == "regression":
            metric = "mae"
        else:
            metric = "roc_auc" if spec.output_dim == 2 else "accuracy"
    out = M.logits(params, X, spec)
    if metric == "mae":
        return mae(out[:, 0], y)
    if metric == "accuracy":
        return accuracy(out.argmax(axis=1), y)
    probs = M.softmax(out)
    return roc_auc(probs[:, 1], y)


def _rngs(seed: int):
    shuffle_ss, scorer_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(shuffle_ss), np.random.default_rng(scorer_ss)


class _Optimizer:
    def __init__(self, config: TrainConfig, n_params: int):
        self.config = config
        self.adam = AdamState.zeros(n_params) if config.optimizer == "adam" else None

    def step(self, params, grad):
        c = self.config
        if self.adam is None:
            return sgd_step(params, grad, c.learning_rate)
        self.adam, new = adam_step(self.adam, params, grad, c.learning_rate, c.adam_betas, c.adam_eps)
        return new


def train(dataset: Dataset, config: TrainConfig, spec: M.ModelSpec, init,
          *, instrument: bool = False, max_steps: Optional[int] = None,
          on_decision: Optional[Callable[[PruneDecision], None]] = None) -> TrainResult:
    """Run dynamic-pruning training and return per-epoch records.

    ``max_steps`` stops after that many batch steps (mid-epoch if needed).
    ``on_decision`` receives every :class:`PruneDecision` as it is made.
    """
    config.validate()
    init = M.check_params(init, spec)
    if dataset.split is None:
        raise PreconditionError("dataset must be split into train/val/test")
    kind = ScorerKind.parse(config.scorer)
    train_ids = dataset.split_ids("train")
    val_ids = dataset.split_ids("val")
    test_ids = dataset.split_ids("test")
    if len(train_ids) == 0:
        raise PreconditionError("train split is empty")

    X, y = dataset.X, dataset.y
    shuffle_rng, scorer_rng = _rngs(config.seed)
    forgetting = ForgettingState() if kind is ScorerKind.FORGETTING else None
    pair = ModelPair.from_pretrained(init, config.beta)
    history = GradientHistory(beta=config.beta, truncation_tol=config.history_tol)
    opt = _Optimizer(config, spec.n_params)
    inst = Instrumentation(dataset, spec, config) if instrument else None
    table = dataset.scores.astype(np.float64).copy()
    keep = config.keep_fraction
    t = 0
    records = []

    def run_step(ids, epoch, b, prune):
        nonlocal pair, history, t
        Xb, yb = X[ids], y[ids]
        try:
            scores = batch_scores(kind, pair, Xb, yb, ids, spec,
                                  rng=scorer_rng, forgetting_state=forgetting)
        except NumericalOverflowError as exc:
            raise TrainingAbort(f"non-finite score: {exc}", epoch, b) from exc
        table[ids] = scores
        if prune:
            pos = rank_select(scores, ids, keep)
            delta = float(scores[pos].min())
            if on_decision is not None:
                on_decision(PruneDecision(tuple(ids[pos].tolist()), delta,
                                          dict(zip(ids.tolist(), scores.tolist()))))
        else:
            pos = np.arange(len(ids))
            delta = float("nan")
        sel = ids[pos]
        try:
            loss, g = M.mean_gradient(pair.online, X[sel], y[sel], spec)
        except NumericalOverflowError as exc:
            raise TrainingAbort(f"non-finite loss: {exc}", epoch, b) from exc
        theta_next = opt.step(pair.online, g)
        if not np.all(np.isfinite(theta_next)):
            raise TrainingAbort("non-finite parameters after update", epoch, b)
        if inst is not None:
            v = ema_gradient(history, t, spec.n_params)
            inst.steps.append(StepRecord(step=t, batch_ids=ids.copy(), scores=scores, selected=pos,
                                         theta=pair.online, xi=pair.reference, v_ema=v,
                                         selected_grad=g, theta_next=theta_next))
        pair = ema_update(ModelPair(theta_next, pair.reference, pair.beta, t + 1))
        history = accumulate_ema_gradient(history, g, t)
        t += 1
        return float(loss.sum()), len(sel), delta

    stop = False
    for epoch in range(config.epochs):
        start = time.perf_counter()
        loss_sum = 0.0
        n_sel = 0
        deltas = []
        if config.selection_mode == "batch":
            order = train_ids[shuffle_rng.permutation(len(train_ids))]
            batches = [(order[i:i + config.batch_size], True)
                       for i in range(0, len(order), config.batch_size)]
        else:
            pos = rank_select(table[train_ids], train_ids, keep)
            chosen = train_ids[pos]
            if on_decision is not None:
                on_decision(PruneDecision(tuple(chosen.tolist()), float(table[chosen].min()),
                                          {int(i): float(table[i]) for i in train_ids}))
            deltas.append(float(table[chosen].min()))
            chosen = chosen[shuffle_rng.permutation(len(chosen))]
            batches = [(chosen[i:i + config.batch_size], False)
                       for i in range(0, len(chosen), config.batch_size)]
        for b, (ids, prune) in enumerate(batches):
            if max_steps is not None and t >= max_steps:
                stop = True
                break
            ls, ns, d = run_step(ids, epoch, b, prune)
            loss_sum += ls
            n_sel += ns
            if prune:
                deltas.append(d)
        if n_sel == 0:
            break
        val = evaluate(pair.online, X[val_ids], y[val_ids], spec, config.metric)
        test = evaluate(pair.online, X[test_ids], y[test_ids], spec, config.metric)
        elapsed = time.perf_counter() - start
        records.append(EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / n_sel,
            val_metric=val,
            test_metric=test,
            selected_count=n_sel,
            wall_time_seconds=elapsed,
            delta_stats=(min(deltas), float(np.mean(deltas)), max(deltas)) if deltas else (0.0, 0.0, 0.0),
        ))
        logger.debug("epoch %d loss %.4f val %.4f test %.4f", epoch, loss_sum / n_sel, val, test)
        if stop:
            break
    return TrainResult(records=records, pair=pair, history=history, instrumentation=inst,
                       steps=t, scores=table)
