"""Dynamic data pruning with an EMA reference model.

Online parameters train on the kept part of each batch; a reference copy
follows them by exponential moving average, and samples are ranked by the
absolute gap between their losses under the two.
"""
from ._backend import BACKEND
from .data import Dataset, ShiftSpec, apply_shift, generate_gaussian_mixture, load_csv, split_dataset, write_csv
from .metrics import accuracy, aggregate_seeds, average_precision, mae, roc_auc
from .model import ModelSpec, Sample, batch_gradient, forward_loss, init_params, per_sample_gradient
from .optim import AdamState, adam_step, sgd_step
from .pruning import (GradientHistory, ModelPair, PruneDecision, ScorerKind, accumulate_ema_gradient,
                      ema_gradient, ema_update, score_baseline, score_molpeg, select_topk)
from .trainer import EpochRecord, TrainConfig, time_efficiency, train

__version__ = "0.1.0"
