"""Survival statistics: Kaplan-Meier, log-rank, Breslow Cox regression,
Harrell's c-index, horizon AUC, risk stratification and Spearman correlation.

All functions accept :class:`~milsurv.records.SurvivalRecord` lists; the
``_array`` variants underneath work on plain ``times``/``events`` arrays and
are what the bootstrap and training loops call in their inner loops.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from milsurv.errors import NumericalError, ValidationError
from milsurv.records import CovariateMatrix, SurvivalRecord, survival_arrays

Z95 = float(stats.norm.ppf(0.975))


# Kaplan-Meier ------------------------------------------------------------


@dataclass(frozen=True)
class KmCurve:
    times: np.ndarray
    survival: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    censored: np.ndarray

    def at(self, t: float) -> float:
        """Survival probability at time ``t`` (right-continuous step function)."""
        i = np.searchsorted(self.times, t, side="right") - 1
        return 1.0 if i < 0 else float(self.survival[i])

    def ci_at(self, t: float) -> tuple[float, float]:
        i = np.searchsorted(self.times, t, side="right") - 1
        if i < 0:
            return 1.0, 1.0
        return float(self.ci_lower[i]), float(self.ci_upper[i])


def km_estimate(records: Sequence[SurvivalRecord], alpha: float = 0.05) -> KmCurve:
    """Product-limit estimate with Greenwood / log(-log) confidence bands.

    The curve is reported at every distinct observed time (event or censoring);
    censorings only shrink the risk set.
    """
    if len(records) == 0:
        raise ValidationError("empty cohort")
    times, events = survival_arrays(records)
    return km_arrays(times, events, alpha)


def km_arrays(times, events, alpha: float = 0.05) -> KmCurve:
    times = np.asarray(times)
    events = np.asarray(events, dtype=bool)
    if times.size == 0:
        raise ValidationError("empty cohort")
    uniq, inverse = np.unique(times, return_inverse=True)
    d = np.bincount(inverse, weights=events, minlength=uniq.size)
    total = np.bincount(inverse, minlength=uniq.size)
    n = times.size - np.concatenate([[0], np.cumsum(total)[:-1]])
    surv = np.cumprod(1.0 - d / n)

    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(n > d, d / (n * (n - d)), np.inf)
        greenwood = np.cumsum(terms)
        log_s = np.log(surv)
        se = np.sqrt(greenwood) / np.abs(log_s)
    z = float(stats.norm.ppf(1 - alpha / 2))
    lower = surv.copy()
    upper = surv.copy()
    inner = (surv > 0) & (surv < 1) & np.isfinite(se)
    lower[inner] = surv[inner] ** np.exp(z * se[inner])
    upper[inner] = surv[inner] ** np.exp(-z * se[inner])
    return KmCurve(
        times=uniq,
        survival=surv,
        ci_lower=lower,
        ci_upper=upper,
        at_risk=n.astype(np.int64),
        events=d.astype(np.int64),
        censored=(total - d).astype(np.int64),
    )


# log-rank ----------------------------------------------------------------


@dataclass(frozen=True)
class LogRankResult:
    chi2: float
    p_value: float
    observed_a: float
    expected_a: float


def logrank_test(
    group_a: Sequence[SurvivalRecord], group_b: Sequence[SurvivalRecord]
) -> LogRankResult:
    """Two-sample log-rank test (1 degree of freedom, hypergeometric variance)."""
    if len(group_a) == 0 or len(group_b) == 0:
        raise ValidationError("log-rank needs two nonempty groups")
    ta = np.array([r.time_months for r in group_a])
    ea = np.array([r.event for r in group_a], dtype=bool)
    tb = np.array([r.time_months for r in group_b])
    eb = np.array([r.event for r in group_b], dtype=bool)
    return logrank_arrays(ta, ea, tb, eb)


def logrank_arrays(ta, ea, tb, eb) -> LogRankResult:
    ta, tb = np.asarray(ta), np.asarray(tb)
    ea, eb = np.asarray(ea, dtype=bool), np.asarray(eb, dtype=bool)
    if ta.size == 0 or tb.size == 0:
        raise ValidationError("log-rank needs two nonempty groups")
    if not (ea.any() or eb.any()):
        raise ValidationError("no events")
    event_times = np.unique(np.concatenate([ta[ea], tb[eb]]))
    ta_sorted, tb_sorted = np.sort(ta), np.sort(tb)
    # at risk: T >= t
    n_a = ta.size - np.searchsorted(ta_sorted, event_times, side="left")
    n_b = tb.size - np.searchsorted(tb_sorted, event_times, side="left")
    d_a = _count_at(ta[ea], event_times)
    d_b = _count_at(tb[eb], event_times)
    n = n_a + n_b
    d = d_a + d_b
    expected = d * n_a / n
    with np.errstate(divide="ignore", invalid="ignore"):
        var = np.where(n > 1, d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1), 0.0)
    o_minus_e = d_a.sum() - expected.sum()
    v = var.sum()
    chi2 = float(o_minus_e**2 / v) if v > 0 else 0.0
    return LogRankResult(chi2, float(stats.chi2.sf(chi2, 1)), float(d_a.sum()), float(expected.sum()))


def _count_at(values, grid) -> np.ndarray:
    values = np.sort(values)
    return np.searchsorted(values, grid, side="right") - np.searchsorted(values, grid, side="left")


# Breslow partial likelihood --------------------------------------------------


class _RiskSets:
    """Precomputed sort order and tie groups for Breslow sums."""

    def __init__(self, times, events):
        times = np.asarray(times)
        events = np.asarray(events, dtype=bool)
        self.order = np.argsort(times, kind="stable")
        t_sorted = times[self.order]
        self.events_sorted = events[self.order]
        uniq, first, inverse = np.unique(t_sorted, return_index=True, return_inverse=True)
        self.first = first
        self.group = inverse
        self.d = np.bincount(inverse, weights=self.events_sorted, minlength=uniq.size)
        self.has_event = self.d > 0
        self.n_events = int(self.events_sorted.sum())

    def reverse_cumsum(self, values):
        return np.cumsum(values[::-1], axis=0)[::-1]


def breslow_loglik(eta, times, events, with_grad: bool = False):
    """Breslow partial log-likelihood of linear predictors ``eta``.

    Returns the log-likelihood, or ``(loglik, d loglik / d eta)`` when
    ``with_grad``. Risk sets are ``{j : T_j >= t}``; tied events at ``t`` share
    one denominator.
    """
    rs = _RiskSets(times, events)
    if rs.n_events == 0:
        raise ValidationError("no events")
    return _breslow_from(rs, np.asarray(eta, dtype=float), with_grad)


def _breslow_from(rs: _RiskSets, eta, with_grad):
    e = eta[rs.order]
    shift = e.max()
    w = np.exp(e - shift)
    s0 = rs.reverse_cumsum(w)[rs.first]
    d = rs.d
    ev = rs.has_event
    loglik = float(e[rs.events_sorted].sum() - np.sum(d[ev] * (np.log(s0[ev]) + shift)))
    if not with_grad:
        return loglik
    hazard_increments = np.where(ev, d / s0, 0.0)
    cum = np.cumsum(hazard_increments)
    grad_sorted = rs.events_sorted - w * cum[rs.group]
    grad = np.empty_like(grad_sorted)
    grad[rs.order] = grad_sorted
    return loglik, grad


def _cox_derivatives(rs: _RiskSets, x_sorted, beta):
    eta = x_sorted @ beta
    shift = eta.max()
    w = np.exp(eta - shift)
    s0 = rs.reverse_cumsum(w)[rs.first]
    wx = w[:, None] * x_sorted
    s1 = rs.reverse_cumsum(wx)[rs.first]
    s2 = rs.reverse_cumsum(wx[:, :, None] * x_sorted[:, None, :])[rs.first]
    ev = rs.has_event
    d = rs.d[ev]
    s0, s1, s2 = s0[ev], s1[ev], s2[ev]
    loglik = float(eta[rs.events_sorted].sum() - np.sum(d * (np.log(s0) + shift)))
    mean = s1 / s0[:, None]
    grad = x_sorted[rs.events_sorted].sum(axis=0) - (d[:, None] * mean).sum(axis=0)
    info = np.einsum("t,tij->ij", d, s2 / s0[:, None, None]) - np.einsum(
        "t,ti,tj->ij", d, mean, mean
    )
    return loglik, grad, info


# Cox regression --------------------------------------------------------------


@dataclass(frozen=True)
class CoxFit:
    names: tuple[str, ...]
    coefficients: np.ndarray
    std_errors: np.ndarray
    loglik: float
    loglik_null: float
    converged: bool
    iterations: int

    @property
    def hazard_ratios(self) -> np.ndarray:
        return np.exp(self.coefficients)

    @property
    def p_values(self) -> np.ndarray:
        """Two-sided Wald p-values (normal approximation)."""
        return 2 * stats.norm.sf(np.abs(self.coefficients / self.std_errors))

    def hazard_ratio_ci(self, alpha: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
        z = stats.norm.ppf(1 - alpha / 2)
        return (
            np.exp(self.coefficients - z * self.std_errors),
            np.exp(self.coefficients + z * self.std_errors),
        )

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])

    def linear_predictor(self, x: CovariateMatrix) -> np.ndarray:
        if x.names != self.names:
            x = x.select(self.names)
        return x.values @ self.coefficients


def cox_partial_loglik(beta, records: Sequence[SurvivalRecord], x: CovariateMatrix) -> float:
    times, events = survival_arrays(records)
    return breslow_loglik(x.values @ np.asarray(beta, dtype=float), times, events)


def cox_gradient(beta, records: Sequence[SurvivalRecord], x: CovariateMatrix) -> np.ndarray:
    """Score vector of the Breslow partial log-likelihood w.r.t. ``beta``."""
    times, events = survival_arrays(records)
    rs = _RiskSets(times, events)
    _, grad, _ = _cox_derivatives(rs, x.values[rs.order], np.asarray(beta, dtype=float))
    return grad


def cox_fit(
    records: Sequence[SurvivalRecord],
    x: CovariateMatrix,
    max_iter: int = 100,
    tol: float = 1e-7,
    max_halvings: int = 20,
    separation_bound: float = 20.0,
) -> CoxFit:
    """Maximise the Breslow partial likelihood by damped Newton-Raphson.

    Starts at zero. Converged means ``max|score| < tol`` and the pending Newton
    step is negligible; the second condition stops a monotone likelihood (whose
    score decays geometrically while the step stays O(1)) from passing as
    converged before the separation bound is hit.
    """
    if x.n_rows != len(records):
        raise ValidationError("covariate rows do not match record count")
    times, events = survival_arrays(records)
    if not events.any():
        raise ValidationError("no events")
    rs = _RiskSets(times, events)
    xs = x.values[rs.order]
    p = x.n_cols
    beta = np.zeros(p)
    loglik, grad, info = _cox_derivatives(rs, xs, beta)
    loglik_null = loglik
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        step = _solve_information(info, grad)
        if np.max(np.abs(grad), initial=0.0) < tol and np.max(np.abs(step), initial=0.0) < 1e-6:
            converged = True
            it -= 1
            break
        # a step this small sits inside the quadratic basin, where the expected
        # gain (about 1e-16) is below the rounding noise of the log-likelihood,
        # so it is taken without the ascent test
        tiny = np.max(np.abs(step), initial=0.0) < 1e-6
        scale = 1.0
        for _ in range(max_halvings + 1):
            candidate = beta + scale * step
            new = _cox_derivatives(rs, xs, candidate)
            if new[0] >= loglik or tiny:
                break
            scale *= 0.5
        else:
            # no ascent possible along the Newton direction: we are at the optimum
            # up to floating point
            converged = np.max(np.abs(grad), initial=0.0) < tol
            break
        improved = new[0] > loglik
        beta = candidate
        loglik, grad, info = new
        if improved and np.max(np.abs(beta), initial=0.0) > separation_bound:
            raise NumericalError("complete separation")
    else:
        step = _solve_information(info, grad)
        converged = bool(
            np.max(np.abs(grad), initial=0.0) < tol and np.max(np.abs(step), initial=0.0) < 1e-6
        )
    cov = np.linalg.inv(info)
    return CoxFit(
        names=x.names,
        coefficients=beta,
        std_errors=np.sqrt(np.diag(cov)),
        loglik=loglik,
        loglik_null=loglik_null,
        converged=bool(converged),
        iterations=it,
    )


def _solve_information(info, grad):
    if info.size == 0:
        return np.zeros(0)
    eig = np.linalg.eigvalsh(info)
    if eig[0] <= 1e-10 * max(eig[-1], 1e-300):
        raise NumericalError("collinear covariates")
    return np.linalg.solve(info, grad)


# concordance -------------------------------------------------------------------


def concordance_index(scores, records: Sequence[SurvivalRecord]) -> float:
    """Harrell's c for risk scores (higher score = earlier expected event).

    A pair is comparable when the earlier time is an event and the times
    differ; tied scores earn half credit.
    """
    times, events = survival_arrays(records)
    return concordance_arrays(scores, times, events)


def concordance_arrays(scores, times, events) -> float:
    numer, denom = concordance_counts(scores, times, events)
    if denom == 0:
        raise ValidationError("no comparable pairs")
    return numer / denom


def concordance_counts(scores, times, events) -> tuple[int, int]:
    """Return ``(2*concordant + tied, 2*comparable)`` as exact integers."""
    scores = np.asarray(scores, dtype=float)
    times = np.asarray(times)
    events = np.asarray(events, dtype=bool)
    if not (scores.shape == times.shape == events.shape):
        raise ValidationError("scores, times and events must align")
    event_times = np.unique(times[events])
    if event_times.size == 0:
        return 0, 0
    uniq_scores, srank = np.unique(scores, return_inverse=True)
    n_e, n_s = event_times.size + 1, uniq_scores.size
    if n_e * n_s > 20_000_000:
        return _concordance_pairwise(scores, times, events)
    # later[k] = number of event times strictly before T_j
    later = np.searchsorted(event_times, times, side="left")
    hist = np.bincount(later * n_s + srank, minlength=n_e * n_s).reshape(n_e, n_s)
    tail = np.cumsum(hist[::-1], axis=0)[::-1]
    below = np.cumsum(tail, axis=1)
    r = later[events] + 1
    s = srank[events]
    less = np.where(s > 0, below[r, s - 1], 0)
    tied = tail[r, s]
    comparable = below[r, n_s - 1]
    return int(2 * less.sum() + tied.sum()), int(2 * comparable.sum())


def _concordance_pairwise(scores, times, events, chunk: int = 512):
    numer = denom = 0
    for start in range(0, scores.size, chunk):
        sl = slice(start, start + chunk)
        ti, si, ei = times[sl, None], scores[sl, None], events[sl, None]
        comp = ei & (ti < times[None, :])
        numer += int(2 * np.sum(comp & (si > scores[None, :])) + np.sum(comp & (si == scores[None, :])))
        denom += int(2 * comp.sum())
    return numer, denom


# horizon AUC -------------------------------------------------------------------


def horizon_labels(times, events, horizon_months: int = 60):
    """Return ``(keep_mask, labels)`` for event-by-horizon classification.

    Cases censored before the horizon carry no label and are dropped.
    """
    times = np.asarray(times)
    events = np.asarray(events, dtype=bool)
    keep = events | (times >= horizon_months)
    labels = events & (times <= horizon_months)
    return keep, labels


def auc_at_horizon(scores, records: Sequence[SurvivalRecord], horizon_months: int = 60) -> float:
    times, events = survival_arrays(records)
    return auc_arrays(scores, times, events, horizon_months)


def auc_arrays(scores, times, events, horizon_months: int = 60) -> float:
    scores = np.asarray(scores, dtype=float)
    keep, labels = horizon_labels(times, events, horizon_months)
    return roc_auc(scores[keep], labels[keep])


def roc_auc(scores, labels) -> float:
    """Rank-statistic ROC AUC with half credit for ties."""
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("degenerate labels")
    ranks = stats.rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


# risk groups ---------------------------------------------------------------------


@dataclass(frozen=True)
class RiskThresholds:
    low_cut: float
    high_cut: float

    def __post_init__(self):
        if not (np.isfinite(self.low_cut) and np.isfinite(self.high_cut)):
            raise ValidationError("thresholds must be finite")
        if self.low_cut > self.high_cut:
            raise ValidationError("low_cut exceeds high_cut")


def risk_thresholds(tune_scores, low_q: float = 0.25, high_q: float = 0.75) -> RiskThresholds:
    """Quartile cut points with linear interpolation between order statistics."""
    tune_scores = np.asarray(tune_scores, dtype=float)
    if tune_scores.size == 0:
        raise ValidationError("empty cohort")
    lo, hi = np.quantile(tune_scores, [low_q, high_q], method="linear")
    return RiskThresholds(float(lo), float(hi))


def stratify_risk(scores, thresholds: RiskThresholds) -> list[str]:
    out = []
    for s in np.asarray(scores, dtype=float):
        if s <= thresholds.low_cut:
            out.append("low")
        elif s > thresholds.high_cut:
            out.append("high")
        else:
            out.append("medium")
    return out


# rank correlation --------------------------------------------------------------------


@dataclass(frozen=True)
class SpearmanResult:
    rho: float
    p_value: float


def spearman(a, b) -> SpearmanResult:
    """Spearman's rho with average ranks; p-value from the t approximation."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("spearman needs two aligned vectors")
    if a.size < 3:
        raise ValidationError("spearman needs at least 3 observations")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise ValidationError("zero rank variance")
    res = stats.spearmanr(a, b)
    return SpearmanResult(float(res.statistic), float(res.pvalue))
