"""Percentile bootstrap intervals: case-level, paired, and slide-blocked."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from milsurv.errors import NumericalError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BootstrapCI:
    estimate: float
    lower: float
    upper: float
    n_used: int
    n_skipped: int


def _resample_indices(n: int, n_samples: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, n, size=(n_samples, n))


def _percentile_ci(values, alpha):
    lo, hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(lo), float(hi)


def bootstrap_ci(
    metric: Callable[[np.ndarray], float],
    n: int,
    n_samples: int = 9999,
    seed=0,
    alpha: float = 0.05,
) -> BootstrapCI:
    """Percentile CI of ``metric(idx)`` over case-level resamples of ``range(n)``.

    ``metric`` receives an index array drawn with replacement. Replicates on
    which it raises :class:`ValidationError` (e.g. one-class AUC) are skipped;
    more than half skipped is an error.
    """
    if n < 2:
        raise ValidationError("bootstrap needs at least 2 cases")
    estimate = float(metric(np.arange(n)))
    values = []
    skipped = 0
    for idx in _resample_indices(n, n_samples, seed):
        try:
            values.append(float(metric(idx)))
        except ValidationError:
            skipped += 1
    return _finish(estimate, values, skipped, n_samples, alpha)


def paired_bootstrap_ci(
    metric_a: Callable[[np.ndarray], float],
    metric_b: Callable[[np.ndarray], float],
    n: int,
    n_samples: int = 9999,
    seed=0,
    alpha: float = 0.05,
) -> dict[str, BootstrapCI]:
    """CIs for two metrics and their difference ``a - b`` on shared resamples."""
    if n < 2:
        raise ValidationError("bootstrap needs at least 2 cases")
    full = np.arange(n)
    est_a, est_b = float(metric_a(full)), float(metric_b(full))
    va, vb = [], []
    skipped = 0
    for idx in _resample_indices(n, n_samples, seed):
        try:
            a, b = float(metric_a(idx)), float(metric_b(idx))
        except ValidationError:
            skipped += 1
            continue
        va.append(a)
        vb.append(b)
    va_arr, vb_arr = np.asarray(va), np.asarray(vb)
    return {
        "a": _finish(est_a, va_arr, skipped, n_samples, alpha),
        "b": _finish(est_b, vb_arr, skipped, n_samples, alpha),
        "delta": _finish(est_a - est_b, va_arr - vb_arr, skipped, n_samples, alpha),
    }


def _finish(estimate, values, skipped, n_samples, alpha) -> BootstrapCI:
    if skipped:
        log.info("bootstrap skipped %d of %d degenerate replicates", skipped, n_samples)
    if skipped * 2 > n_samples or len(values) == 0:
        raise NumericalError(f"bootstrap: {skipped} of {n_samples} replicates undefined")
    lo, hi = _percentile_ci(np.asarray(values, dtype=float), alpha)
    return BootstrapCI(estimate, lo, hi, len(values), skipped)


def blocked_bootstrap_mean(
    values,
    block_id,
    n_samples: int = 9999,
    seed=0,
    alpha: float = 0.05,
) -> BootstrapCI:
    """Pooled mean with a CI from resampling whole blocks (e.g. slides)."""
    values = np.asarray(values, dtype=float)
    block_id = np.asarray(block_id)
    if values.size == 0:
        raise ValidationError("empty input")
    if block_id.shape != values.shape:
        raise ValidationError("values and block ids must align")
    estimate = float(values.mean())
    n_blocks = np.unique(block_id).size
    reps = blocked_replicates(values, block_id, n_samples, seed)
    if n_blocks == 1:
        # every replicate is the original block; report the exact point
        return BootstrapCI(estimate, estimate, estimate, n_samples, 0)
    lo, hi = _percentile_ci(reps, alpha)
    return BootstrapCI(estimate, lo, hi, n_samples, 0)


def blocked_replicates(values, block_id, n_samples: int, seed=0) -> np.ndarray:
    """Raw replicate means, exposed for distributional checks."""
    values = np.asarray(values, dtype=float)
    _, inverse = np.unique(np.asarray(block_id), return_inverse=True)
    sums = np.bincount(inverse, weights=values)
    counts = np.bincount(inverse).astype(float)
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, sums.size, size=(n_samples, sums.size))
    return sums[draws].sum(axis=1) / counts[draws].sum(axis=1)
