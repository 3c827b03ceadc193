"""Clustering-derived features and regression-based explanation of risk scores.

Patch embeddings are clustered with k-means; each case is summarized by the
percentage of its patches in every cluster. Those percentages, or clinical
covariates, are regressed on standardized risk scores with ordinary least
squares, and a forward stepwise search picks a small informative subset.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from milsurv.bootstrap import blocked_bootstrap_mean
from milsurv.errors import NumericalError, ValidationError
from milsurv.records import CovariateMatrix, design_matrix

DEFAULT_K_CANDIDATES = (10, 25, 50, 100, 200, 300, 400, 500)

_CHUNK = 4096


# k-means ---------------------------------------------------------------------


@dataclass(frozen=True)
class ClusterModel:
    centroids: np.ndarray  # (k, d)
    fit_sample_size: int
    inertia_history: tuple[float, ...] = ()
    n_iter: int = 0

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=float)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValidationError("cluster model needs at least one centroid")
        if not np.all(np.isfinite(c)):
            raise NumericalError("non-finite centroid")
        object.__setattr__(self, "centroids", c)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances ``(n, k)`` summed from exact coordinate differences.

    The direct form (rather than the expanded dot-product form) keeps exact
    ties exact, which the lowest-id tie rule relies on.
    """
    out = np.empty((x.shape[0], centroids.shape[0]))
    for start in range(0, x.shape[0], _CHUNK):
        diff = x[start : start + _CHUNK, None, :] - centroids[None, :, :]
        out[start : start + _CHUNK] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _nearest(x, centroids):
    d = sq_distances(x, centroids)
    labels = np.argmin(d, axis=1)  # first minimum = lowest id
    return labels, d[np.arange(x.shape[0]), labels]


def _kmeans_pp(x, k, rng) -> np.ndarray:
    n = x.shape[0]
    centers = [int(rng.integers(n))]
    closest = sq_distances(x, x[centers]).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            # all remaining points coincide with chosen centers
            unused = np.setdiff1d(np.arange(n), centers)
            nxt = int(unused[0])
        centers.append(nxt)
        closest = np.minimum(closest, sq_distances(x, x[nxt : nxt + 1]).ravel())
    return x[centers].copy()


def kmeans_fit(
    embeddings,
    k: int,
    seed: int = 0,
    max_iter: int = 300,
    sample_size: int = 100_000,
) -> ClusterModel:
    """k-means++ seeding followed by Lloyd iterations until assignments stop changing.

    At most ``sample_size`` rows (drawn without replacement) are used. A cluster
    that empties is re-seeded with the point farthest from its own centroid.
    """
    x = np.asarray(embeddings, dtype=float)
    if x.ndim != 2:
        raise ValidationError("embeddings must be a 2-D matrix")
    if k < 1:
        raise ValidationError("k must be positive")
    rng = np.random.default_rng([seed, 11])
    if x.shape[0] > sample_size:
        x = x[np.sort(rng.choice(x.shape[0], sample_size, replace=False))]
    if k > x.shape[0]:
        raise ValidationError(f"k={k} exceeds sample size {x.shape[0]}")

    centroids = _kmeans_pp(x, k, rng)
    labels, dist = _nearest(x, centroids)
    history = [float(dist.sum())]
    it = 0
    for it in range(1, max_iter + 1):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centroids = centroids.copy()
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            _reseed_empty(x, centroids, labels, np.flatnonzero(~nonempty))
        new_labels, dist = _nearest(x, centroids)
        history.append(float(dist.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return ClusterModel(centroids, x.shape[0], tuple(history), it)


def _reseed_empty(x, centroids, labels, empty) -> None:
    own = np.einsum("nd,nd->n", x - centroids[labels], x - centroids[labels])
    taken = set()
    for j in empty:
        order = np.argsort(-own, kind="stable")
        pick = next(int(i) for i in order if int(i) not in taken)
        taken.add(pick)
        centroids[j] = x[pick]
        own[pick] = 0.0


def assign(model: ClusterModel, patches) -> np.ndarray:
    """Nearest-centroid cluster ids; ties go to the lowest id."""
    x = np.asarray(patches, dtype=float)
    if x.size == 0:
        return np.zeros(0, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ValidationError(f"patch dimension does not match centroids ({model.dim})")
    return _nearest(x, model.centroids)[0].astype(np.int64)


# quantitation ------------------------------------------------------------


@dataclass(frozen=True)
class CaseQuantitation:
    case_id: str
    percentages: np.ndarray


def quantitate(case_id: str, assignments, k: int) -> CaseQuantitation:
    a = np.asarray(assignments, dtype=np.int64)
    if a.size == 0:
        raise ValidationError(f"{case_id}: no patches to quantitate")
    if a.min() < 0 or a.max() >= k:
        raise ValidationError(f"{case_id}: cluster id out of range")
    return CaseQuantitation(case_id, 100.0 * np.bincount(a, minlength=k) / a.size)


def quantitation_matrix(quants: Sequence[CaseQuantitation], prefix: str = "cluster_") -> CovariateMatrix:
    k = quants[0].percentages.size
    names = tuple(f"{prefix}{j}" for j in range(k))
    return CovariateMatrix(names, np.vstack([q.percentages for q in quants]), ("numeric",) * k)


# regression --------------------------------------------------------------------


@dataclass(frozen=True)
class OlsFit:
    names: tuple[str, ...]
    coefficients: np.ndarray
    std_errors: np.ndarray
    p_values: np.ndarray
    intercept: float
    r2: float
    adjusted_r2: float
    n: int
    residuals: np.ndarray = field(repr=False)

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])

    def table(self) -> list[dict]:
        return [
            {"feature": n, "coefficient": float(c), "std_error": float(s), "p": float(p)}
            for n, c, s, p in zip(self.names, self.coefficients, self.std_errors, self.p_values)
        ]


def ols_fit(x: CovariateMatrix, y) -> OlsFit:
    """Least squares with an intercept via QR, t-test p-values and adjusted R²."""
    y = np.asarray(y, dtype=float)
    n, p = x.values.shape
    if y.shape != (n,):
        raise ValidationError("response length does not match design rows")
    if n < p + 2:
        raise ValidationError(f"need at least {p + 2} rows for {p} features, have {n}")
    sst = float(np.sum((y - y.mean()) ** 2))
    if not sst > 0:
        raise ValidationError("constant response")
    design = np.column_stack([np.ones(n), x.values])
    # column scaling keeps the rank test independent of feature units
    scale = np.sqrt(np.sum(design**2, axis=0))
    if np.any(scale == 0):
        raise ValidationError("collinear features")
    q, r = np.linalg.qr(design / scale)
    if np.min(np.abs(np.diag(r))) <= 1e-10:
        raise ValidationError("collinear features")
    beta_scaled = np.linalg.solve(r, q.T @ y)
    beta = beta_scaled / scale
    resid = y - design @ beta
    sse = float(resid @ resid)
    df = n - p - 1
    r2 = 1.0 - sse / sst
    adj = 1.0 - (1.0 - r2) * (n - 1) / df
    sigma2 = sse / df
    r_inv = np.linalg.solve(r, np.eye(p + 1))
    cov_diag = np.sum(r_inv**2, axis=1) / scale**2 * sigma2
    se = np.sqrt(cov_diag)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = beta / se
    pv = 2.0 * stats.t.sf(np.abs(t), df)
    pv = np.where(se == 0, np.where(beta == 0, 1.0, 0.0), pv)
    return OlsFit(x.names, beta[1:], se[1:], np.clip(pv[1:], 0.0, 1.0), float(beta[0]), r2, adj, n, resid)


@dataclass(frozen=True)
class StepwiseResult:
    selected: tuple[str, ...]
    history: tuple[float, ...]  # adjusted R² after each addition
    fit: OlsFit


def forward_stepwise(features: CovariateMatrix, y, n_select: int = 10) -> StepwiseResult:
    """Greedy forward selection maximizing adjusted R².

    Each step adds the candidate whose inclusion gives the highest adjusted R²;
    ties go to the lowest column index. Candidates that would make the design
    rank deficient are skipped for that step.
    """
    if n_select < 1:
        raise ValidationError("n_select must be positive")
    if features.n_cols < n_select:
        raise ValidationError(f"need at least {n_select} candidate features, have {features.n_cols}")
    chosen: list[int] = []
    history = []
    fit = None
    for _ in range(n_select):
        best = None
        for j in range(features.n_cols):
            if j in chosen:
                continue
            try:
                trial = ols_fit(features.select([features.names[i] for i in chosen + [j]]), y)
            except ValidationError as exc:
                if str(exc) == "collinear features":
                    continue
                raise
            if best is None or trial.adjusted_r2 > best[1].adjusted_r2:
                best = (j, trial)
        if best is None:
            raise ValidationError("no admissible feature left to add")
        chosen.append(best[0])
        fit = best[1]
        history.append(fit.adjusted_r2)
    return StepwiseResult(tuple(features.names[i] for i in chosen), tuple(history), fit)


def clinico_regression(
    clinico: CovariateMatrix | Sequence[Mapping[str, float]],
    scores,
    numeric: Sequence[str] = ("age",),
    categorical: Sequence[str] = ("sex", "stage", "grade"),
    per_decade: Sequence[str] = ("age",),
) -> OlsFit:
    """Regress scores on clinical covariates.

    Raw covariate dicts are coded with indicator columns against reference
    levels and age per decade around its mean.
    """
    if not isinstance(clinico, CovariateMatrix):
        clinico = design_matrix(clinico, numeric, categorical, per_decade)
    const = clinico.constant_columns()
    if const:
        raise ValidationError(f"constant column: {', '.join(const)}")
    return ols_fit(clinico, scores)


def quantitation_regression(quant: CovariateMatrix, scores, reference: int | None = None) -> OlsFit:
    """Regression on all cluster percentages.

    Percentages sum to 100, so one cluster (by default the last one with any
    variance) is dropped as the reference. Constant columns are dropped too.
    """
    keep = [j for j in range(quant.n_cols) if np.ptp(quant.values[:, j]) > 0]
    if not keep:
        raise ValidationError("no varying cluster features")
    if reference is None:
        reference = keep[-1]
    keep = [j for j in keep if j != reference]
    return ols_fit(quant.select([quant.names[j] for j in keep]), scores)


# choosing k ------------------------------------------------------------------


def select_k(
    fit_embeddings,
    tune_patches: Sequence[np.ndarray],
    tune_scores,
    candidates: Sequence[int] = DEFAULT_K_CANDIDATES,
    seed: int = 0,
    n_select: int = 10,
    sample_size: int = 100_000,
) -> tuple[int, dict[int, float]]:
    """Pick k by the tune-set adjusted R² of the best stepwise feature subset.

    For each candidate: fit clusters on ``fit_embeddings``, quantitate the tune
    cases, standardize ``tune_scores`` and run forward stepwise with
    ``min(n_select, usable features)`` features. Ties go to the smaller k.
    """
    if not candidates:
        raise ValidationError("no k candidates")
    y = np.asarray(tune_scores, dtype=float)
    y = (y - y.mean()) / y.std()
    scores: dict[int, float] = {}
    for k in candidates:
        model = kmeans_fit(fit_embeddings, k, seed, sample_size=sample_size)
        quant = quantitation_matrix(
            [quantitate(str(i), assign(model, p), k) for i, p in enumerate(tune_patches)]
        )
        usable = [j for j in range(k) if np.ptp(quant.values[:, j]) > 0]
        m = min(n_select, max(len(usable) - 1, 1), len(y) - 3)
        if len(usable) == 0 or m < 1:
            scores[k] = -np.inf
            continue
        try:
            res = forward_stepwise(quant.select([quant.names[j] for j in usable]), y, m)
            scores[k] = res.fit.adjusted_r2
        except ValidationError:
            scores[k] = -np.inf
    best = max(candidates, key=lambda c: (scores[c], -c))
    return best, scores


# patch-level attribution -----------------------------------------------------------


@dataclass(frozen=True)
class ClusterScore:
    cluster: int
    n_patches: int
    mean: float | None
    ci_lower: float | None
    ci_upper: float | None
    q25: float | None
    q75: float | None
    present: bool


def patch_cluster_scores(
    patch_scores,
    cluster_ids,
    slide_ids,
    k: int | None = None,
    n_samples: int = 9999,
    seed: int = 0,
) -> list[ClusterScore]:
    """Per-cluster pooled mean, interquartile range and slide-blocked bootstrap CI.

    Clusters without patches are returned with ``present=False`` and no statistics.
    """
    s = np.asarray(patch_scores, dtype=float)
    c = np.asarray(cluster_ids, dtype=np.int64)
    b = np.asarray(slide_ids)
    if s.size == 0:
        raise ValidationError("empty input")
    if not s.shape == c.shape == b.shape:
        raise ValidationError("scores, clusters and slide ids must align")
    k = int(c.max()) + 1 if k is None else k
    out = []
    for j in range(k):
        mask = c == j
        if not mask.any():
            out.append(ClusterScore(j, 0, None, None, None, None, None, False))
            continue
        ci = blocked_bootstrap_mean(s[mask], b[mask], n_samples, [seed, j])
        q25, q75 = np.quantile(s[mask], [0.25, 0.75])
        out.append(ClusterScore(j, int(mask.sum()), ci.estimate, ci.lower, ci.upper, float(q25), float(q75), True))
    return out


def rank_clusters(scores: Sequence[ClusterScore]) -> list[ClusterScore]:
    """Present clusters by decreasing mean score (ties to the lower id)."""
    return sorted((s for s in scores if s.present), key=lambda s: (-s.mean, s.cluster))


def cluster_prototype_map(cluster_ids, prototype_ids, k: int, n_prototypes: int) -> np.ndarray:
    """Majority ground-truth prototype for every cluster (-1 when empty)."""
    table = np.zeros((k, n_prototypes), dtype=np.int64)
    np.add.at(table, (np.asarray(cluster_ids), np.asarray(prototype_ids)), 1)
    out = np.argmax(table, axis=1)
    out[table.sum(axis=1) == 0] = -1
    return out
