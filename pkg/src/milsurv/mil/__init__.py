"""Multiple-instance survival model: encoder, loss, optimizer, training, ensembling."""

from milsurv.mil.ensemble import Ensemble, ensemble_top, infer_case
from milsurv.mil.loss import batch_cox_loss, cox_loss
from milsurv.mil.model import ArchConfig, MilModel, forward, init_model
from milsurv.mil.optim import AdamState, LrSchedule, adam_step
from milsurv.mil.search import hyperparam_search
from milsurv.mil.training import Checkpoint, TrainConfig, best_checkpoint, grad, sample_bag, select_checkpoint, train

__all__ = [
    "AdamState",
    "ArchConfig",
    "Checkpoint",
    "Ensemble",
    "LrSchedule",
    "MilModel",
    "TrainConfig",
    "adam_step",
    "best_checkpoint",
    "batch_cox_loss",
    "cox_loss",
    "ensemble_top",
    "forward",
    "grad",
    "hyperparam_search",
    "infer_case",
    "init_model",
    "sample_bag",
    "select_checkpoint",
    "train",
]
