"""Survival losses over a training batch of case scores.

Only the Cox partial likelihood is provided; any callable with the
``(scores, times, events) -> (loss, dloss/dscores)`` signature can be passed to
the trainer instead.
"""

from __future__ import annotations

from typing import Protocol, Sequence

import numpy as np

from milsurv.errors import ValidationError
from milsurv.records import SurvivalRecord, survival_arrays
from milsurv.survival import breslow_loglik


class SurvivalLoss(Protocol):
    def __call__(self, scores: np.ndarray, times: np.ndarray, events: np.ndarray) -> tuple[float, np.ndarray]:
        ...


def cox_loss(scores, times, events) -> tuple[float, np.ndarray]:
    """Negative Breslow partial log-likelihood with risk sets restricted to the batch."""
    if not np.any(events):
        raise ValidationError("uninformative batch")
    loglik, grad = breslow_loglik(scores, times, events, with_grad=True)
    return -loglik, -grad


def batch_cox_loss(case_scores, records: Sequence[SurvivalRecord]) -> float:
    times, events = survival_arrays(records)
    return cox_loss(np.asarray(case_scores, dtype=float), times, events)[0]


def l2_penalty(params: Sequence[np.ndarray], weight: float) -> tuple[float, list[np.ndarray]]:
    value = weight * sum(float(np.sum(p * p)) for p in params)
    return value, [2.0 * weight * p for p in params]
