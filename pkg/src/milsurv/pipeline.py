"""Workflow steps shared by the command line and the end-to-end tests.

Each function works on in-memory objects and returns plain table rows, so the
CLI only has to read inputs and write files.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from milsurv.bags import CaseBag
from milsurv.bootstrap import bootstrap_ci, paired_bootstrap_ci
from milsurv.errors import NumericalError, ValidationError
from milsurv.explain import (
    ClusterModel,
    OlsFit,
    assign,
    clinico_regression,
    forward_stepwise,
    kmeans_fit,
    ols_fit,
    patch_cluster_scores,
    quantitate,
    quantitation_matrix,
    quantitation_regression,
    rank_clusters,
    select_k,
)
from milsurv.mil.ensemble import Ensemble, ensemble_top, infer_case
from milsurv.mil.model import encode
from milsurv.mil.training import (
    Checkpoint,
    TrainConfig,
    TrainResult,
    best_checkpoint,
    train,
)
from milsurv.records import SPLITS, CovariateMatrix, SurvivalRecord, design_matrix, survival_arrays
from milsurv.survival import (
    auc_arrays,
    concordance_arrays,
    cox_fit,
    km_arrays,
    logrank_arrays,
    risk_thresholds,
    spearman,
    stratify_risk,
)

log = logging.getLogger(__name__)

HELD_OUT = ("val1", "val2")
RISK_GROUPS = ("low", "medium", "high")


@dataclass(frozen=True)
class ClinicoSpec:
    """How raw covariates are coded for regression tables."""

    numeric: tuple[str, ...] = ("age",)
    categorical: tuple[str, ...] = ("sex", "stage", "grade")
    per_decade: tuple[str, ...] = ("age",)

    @property
    def raw_names(self) -> tuple[str, ...]:
        return self.numeric + self.categorical


# data plumbing ---------------------------------------------------------------


def gate_bags(
    bags: Mapping[str, CaseBag], inclusion: Mapping[str, Sequence] | None
) -> dict[str, CaseBag]:
    """Keep only ROI-included patches; ``None`` keeps every patch."""
    if inclusion is None:
        return dict(bags)
    return {cid: bag.gate(inclusion) for cid, bag in bags.items()}


def aligned_bags(records: Sequence[SurvivalRecord], bags: Mapping[str, CaseBag]) -> list[CaseBag]:
    missing = [r.case_id for r in records if r.case_id not in bags]
    if missing:
        raise ValidationError(f"no patches for cases {missing[:5]}")
    return [bags[r.case_id] for r in records]


def split_index(records: Sequence[SurvivalRecord], split: str) -> np.ndarray:
    return np.array([i for i, r in enumerate(records) if r.split == split], dtype=np.int64)


def require_splits(records: Sequence[SurvivalRecord], needed: Sequence[str]) -> None:
    present = {r.split for r in records}
    missing = [s for s in needed if s not in present]
    if missing:
        raise ValidationError(f"missing split: {', '.join(missing)}")


# training and ensembling ---------------------------------------------------------


@dataclass
class ModelRun:
    seed: int
    result: TrainResult
    best: Checkpoint
    window: int


def train_models(
    records: Sequence[SurvivalRecord],
    bags: Mapping[str, CaseBag],
    config: TrainConfig,
    n_models: int,
) -> list[ModelRun]:
    """Train ``n_models`` replicates with seeds ``config.seed + m``."""
    if n_models < 1:
        raise ValidationError("need at least one model")
    runs = []
    bag_list = list(bags.values())
    for m in range(n_models):
        cfg = replace(config, seed=config.seed + m)
        result = train(records, bag_list, cfg)
        best, w = best_checkpoint(result.checkpoints, cfg.rolling_window)
        runs.append(ModelRun(cfg.seed, result, best, w))
        log.info("model %d: best step %d, smoothed tune c-index %.4f", m, best.step, best.smoothed_metric)
    return runs


def build_ensemble(
    candidates: Sequence[tuple],
    records: Sequence[SurvivalRecord],
    bags: Mapping[str, CaseBag],
    k: int = 5,
) -> Ensemble:
    """Top-``k`` ensemble; standardization uses exhaustive tune-set inference."""
    require_splits(records, ["tune"])
    tune = aligned_bags([r for r in records if r.split == "tune"], bags)
    return ensemble_top(candidates, tune, k)


def ensemble_case_scores(ensemble: Ensemble, records: Sequence[SurvivalRecord], bags: Mapping[str, CaseBag]) -> np.ndarray:
    return np.array([infer_case(ensemble, b).case_score for b in aligned_bags(records, bags)])


# evaluation tables -------------------------------------------------------------


def clinico_matrix(records: Sequence[SurvivalRecord], spec: ClinicoSpec) -> CovariateMatrix:
    """Coded covariates with columns that are constant on these rows dropped."""
    covs = [r.covariates for r in records]
    for name in spec.raw_names:
        if any(name not in c for c in covs):
            raise ValidationError(f"covariate {name!r} missing from some records")
    x = design_matrix(covs, spec.numeric, spec.categorical, spec.per_decade, allow_degenerate=True)
    const = set(x.constant_columns())
    return x.select([n for n in x.names if n not in const])


@dataclass
class EvalReport:
    thresholds: dict
    tables: dict[str, tuple[list[str], list[list]]] = field(default_factory=dict)


def _ci_or_blank(fn, n, n_boot, seed):
    try:
        ci = bootstrap_ci(fn, n, n_boot, seed)
        return [ci.estimate, ci.lower, ci.upper]
    except (ValidationError, NumericalError) as exc:
        log.warning("metric undefined: %s", exc)
        try:
            return [fn(np.arange(n)), None, None]
        except (ValidationError, NumericalError):
            return [None, None, None]


def evaluate(
    records: Sequence[SurvivalRecord],
    scores,
    spec: ClinicoSpec = ClinicoSpec(),
    horizon: int = 60,
    n_boot: int = 1000,
    seed: int = 0,
) -> EvalReport:
    """Performance, hazard ratio, incremental value and risk-group tables."""
    scores = np.asarray(scores, dtype=float)
    require_splits(records, ["tune"])
    if not any(r.split in HELD_OUT for r in records):
        raise ValidationError("missing split: val1 or val2")
    times, events = survival_arrays(records)
    tune = split_index(records, "tune")
    thr = risk_thresholds(scores[tune])
    mu, sd = float(scores[tune].mean()), float(scores[tune].std())
    if not sd > 0:
        raise NumericalError("tune scores are constant")
    report = EvalReport({"low_cut": thr.low_cut, "high_cut": thr.high_cut, "tune_mean": mu, "tune_std": sd})
    splits = [s for s in SPLITS if len(split_index(records, s))]
    held = [s for s in HELD_OUT if s in splits]

    rows = []
    for si, s in enumerate(splits):
        idx = split_index(records, s)
        t, e, sc = times[idx], events[idx], scores[idx]
        c = _ci_or_blank(lambda i: concordance_arrays(sc[i], t[i], e[i]), idx.size, n_boot, [seed, si, 0])
        a = _ci_or_blank(lambda i: auc_arrays(sc[i], t[i], e[i], horizon), idx.size, n_boot, [seed, si, 1])
        rows.append([s, idx.size, int(e.sum()), *c, *a])
    report.tables["performance"] = (
        ["split", "n", "events", "cindex", "cindex_ci_lower", "cindex_ci_upper",
         "auc", "auc_ci_lower", "auc_ci_upper"],
        rows,
    )

    uni, multi, delta = [], [], []
    for si, s in enumerate(held):
        idx = split_index(records, s)
        recs = [records[i] for i in idx]
        dls = CovariateMatrix(("dls",), ((scores[idx] - mu) / sd)[:, None], ("numeric",))
        clin = clinico_matrix(recs, spec)
        for j in range(dls.n_cols + clin.n_cols):
            col = dls if j == 0 else clin.select([clin.names[j - 1]])
            uni.append([s, *_cox_rows(recs, col)[0]])
        combined = clin.hstack(dls)
        for row in _cox_rows(recs, combined):
            multi.append([s, *row])
        delta += _incremental_rows(s, recs, clin, combined, horizon, n_boot, [seed, 10 + si])
    cox_header = ["split", "feature", "hazard_ratio", "ci_lower", "ci_upper", "p", "n", "events", "note"]
    report.tables["cox_univariable"] = (cox_header, uni)
    report.tables["cox_multivariable"] = (cox_header, multi)
    report.tables["incremental"] = (
        ["split", "metric", "clinico", "clinico_dls", "delta", "delta_ci_lower", "delta_ci_upper"],
        delta,
    )

    km_rows, group_rows, score_rows = [], [], []
    groups_all = np.array(stratify_risk(scores, thr), dtype=object)
    for i, r in enumerate(records):
        score_rows.append([r.case_id, r.split, scores[i], groups_all[i]])
    for s in held:
        idx = split_index(records, s)
        t, e, g = times[idx], events[idx], groups_all[idx]
        low = g == "low"
        for name in RISK_GROUPS:
            m = g == name
            if not m.any():
                group_rows.append([s, name, 0, 0, None, None, None, None, None])
                continue
            curve = km_arrays(t[m], e[m])
            for j in range(curve.times.size):
                km_rows.append([s, name, curve.times[j], curve.survival[j], curve.ci_lower[j],
                                curve.ci_upper[j], curve.at_risk[j], curve.events[j], curve.censored[j]])
            lo, hi = curve.ci_at(horizon)
            chi2 = p = None
            if name != "low" and low.any():
                try:
                    lr = logrank_arrays(t[m], e[m], t[low], e[low])
                    chi2, p = lr.chi2, lr.p_value
                except ValidationError:
                    pass
            group_rows.append([s, name, int(m.sum()), int(e[m].sum()), curve.at(horizon), lo, hi, chi2, p])
    report.tables["km"] = (
        ["split", "group", "time", "survival", "ci_lower", "ci_upper", "at_risk", "events", "censored"],
        km_rows,
    )
    report.tables["risk_groups"] = (
        ["split", "group", "n", "events", "survival_at_horizon", "ci_lower", "ci_upper",
         "logrank_chi2_vs_low", "logrank_p_vs_low"],
        group_rows,
    )
    report.tables["scores"] = (["case_id", "split", "score", "risk_group"], score_rows)
    return report


def _cox_rows(recs, x: CovariateMatrix) -> list[list]:
    n = len(recs)
    ev = sum(r.event for r in recs)
    try:
        fit = cox_fit(recs, x)
    except (ValidationError, NumericalError) as exc:
        return [[name, None, None, None, None, n, ev, str(exc)] for name in x.names]
    lo, hi = fit.hazard_ratio_ci()
    note = "" if fit.converged else "not converged"
    return [
        [name, fit.hazard_ratios[j], lo[j], hi[j], fit.p_values[j], n, ev, note]
        for j, name in enumerate(fit.names)
    ]


def _incremental_rows(split, recs, clin, combined, horizon, n_boot, seed):
    """c-index and horizon AUC of Cox predictors with and without the score.

    Both Cox models are fitted once on the split; resampling is over cases
    with the fitted predictors held fixed.
    """
    t, e = survival_arrays(recs)
    try:
        lp_c = cox_fit(recs, clin).linear_predictor(clin) if clin.n_cols else np.zeros(len(recs))
        lp_d = cox_fit(recs, combined).linear_predictor(combined)
    except (ValidationError, NumericalError) as exc:
        log.warning("%s: incremental value skipped: %s", split, exc)
        return []
    rows = []
    metrics = {
        "cindex": lambda lp: (lambda i: concordance_arrays(lp[i], t[i], e[i])),
        "auc": lambda lp: (lambda i: auc_arrays(lp[i], t[i], e[i], horizon)),
    }
    for mi, (name, make) in enumerate(metrics.items()):
        try:
            res = paired_bootstrap_ci(make(lp_d), make(lp_c), len(recs), n_boot, [*seed, mi])
        except (ValidationError, NumericalError) as exc:
            log.warning("%s %s undefined: %s", split, name, exc)
            continue
        d = res["delta"]
        rows.append([split, name, res["b"].estimate, res["a"].estimate, d.estimate, d.lower, d.upper])
    return rows


# explanation ---------------------------------------------------------------------


@dataclass
class ExplainReport:
    cluster_model: ClusterModel
    k: int
    k_scores: dict[int, float]
    case_ids: list[str]
    quantitation: CovariateMatrix
    stepwise_features: tuple[str, ...]
    stepwise_history: tuple[float, ...]
    fits: dict[tuple[str, str], OlsFit]
    cluster_ranking: list
    patch_clusters: np.ndarray
    tables: dict[str, tuple[list[str], list[list]]] = field(default_factory=dict)


def embed(bag_patches: np.ndarray, ensemble: Ensemble, embedding: str) -> np.ndarray:
    if embedding == "features":
        return bag_patches
    if embedding == "encoder":
        return encode(ensemble.members[0].encoder, bag_patches)
    raise ValidationError(f"unknown embedding {embedding!r}")


def explain_report(
    records: Sequence[SurvivalRecord],
    bags: Mapping[str, CaseBag],
    ensemble: Ensemble,
    k: int | None = None,
    k_candidates: Sequence[int] = (4, 8, 16),
    n_select: int = 10,
    embedding: str = "features",
    sample_size: int = 100_000,
    n_boot: int = 1000,
    spec: ClinicoSpec = ClinicoSpec(),
    seed: int = 0,
) -> ExplainReport:
    """Cluster patch embeddings and relate the clusters to ensemble scores.

    Clusters are fitted on train-split patches. k (unless given) and the
    stepwise subset are chosen on the tune split; regressions are reported on
    each held-out split with scores standardized by tune statistics.
    """
    require_splits(records, ["train", "tune"])
    held = [s for s in HELD_OUT if len(split_index(records, s))]
    if not held:
        raise ValidationError("missing split: val1 or val2")
    case_bags = aligned_bags(records, bags)
    for b in case_bags:
        if b.n_patches == 0:
            raise ValidationError(f"no tumor patches: {b.case_id}")
    emb = [embed(b.all_patches(), ensemble, embedding) for b in case_bags]
    case_scores = np.array([infer_case(ensemble, b).case_score for b in case_bags])
    tune = split_index(records, "tune")
    mu, sd = float(case_scores[tune].mean()), float(case_scores[tune].std())
    if not sd > 0:
        raise NumericalError("tune scores are constant")
    y = (case_scores - mu) / sd
    train_idx = split_index(records, "train")
    fit_x = np.vstack([emb[i] for i in train_idx])

    if k is None:
        k, k_scores = select_k(fit_x, [emb[i] for i in tune], y[tune], k_candidates, seed, n_select, sample_size)
    else:
        k_scores = {}
    model = kmeans_fit(fit_x, k, seed, sample_size=sample_size)
    labels = [assign(model, e) for e in emb]
    quant = quantitation_matrix([quantitate(r.case_id, a, k) for r, a in zip(records, labels)])

    usable = [quant.names[j] for j in range(k) if np.ptp(quant.values[tune, j]) > 0]
    m = min(n_select, len(usable) - 1, tune.size - 3)
    if m < 1:
        raise ValidationError("too few varying cluster features for stepwise selection")
    step = forward_stepwise(quant.rows(tune).select(usable), y[tune], m)

    fits: dict[tuple[str, str], OlsFit] = {}
    reg_rows = []
    for s in held + ["heldout"]:
        idx = np.concatenate([split_index(records, h) for h in held]) if s == "heldout" else split_index(records, s)
        recs = [records[i] for i in idx]
        attempts = {
            "clinico": lambda: clinico_regression(clinico_matrix(recs, spec), y[idx]),
            "quantitation": lambda: quantitation_regression(quant.rows(idx), y[idx]),
            "stepwise": lambda: ols_fit(quant.rows(idx).select(step.selected), y[idx]),
        }
        for name, fn in attempts.items():
            fit = fn()
            fits[(s, name)] = fit
            for row in fit.table():
                reg_rows.append([s, name, row["feature"], row["coefficient"], row["std_error"], row["p"],
                                 fit.r2, fit.adjusted_r2, fit.n])

    held_idx = np.concatenate([split_index(records, h) for h in held])
    p_scores, p_clusters, p_slides = [], [], []
    for i in held_idx:
        inf = infer_case(ensemble, case_bags[i])
        p_scores.append(inf.patch_scores)
        p_clusters.append(labels[i])
        p_slides += inf.slide_ids
    cluster_stats = patch_cluster_scores(
        np.concatenate(p_scores), np.concatenate(p_clusters), np.array(p_slides), k, n_boot, seed
    )
    ranking = rank_clusters(cluster_stats)

    spear = []
    for s in held:
        idx = split_index(records, s)
        for name in spec.raw_names + step.selected:
            if name in spec.raw_names:
                a = np.array([records[i].covariates[name] for i in idx], dtype=float)
            else:
                a = quant.values[idx, quant.names.index(name)]
            try:
                res = spearman(a, y[idx])
                spear.append([s, name, "dls", res.rho, res.p_value])
            except ValidationError as exc:
                spear.append([s, name, "dls", None, None])
                log.warning("%s: spearman %s undefined: %s", s, name, exc)

    report = ExplainReport(model, k, k_scores, [r.case_id for r in records], quant, step.selected,
                           step.history, fits, ranking, np.concatenate(p_clusters))
    report.tables["k_selection"] = (["k", "tune_adjusted_r2"], [[kk, v] for kk, v in sorted(k_scores.items())])
    report.tables["quantitation"] = (
        ["case_id", "split", *quant.names],
        [[r.case_id, r.split, *quant.values[i]] for i, r in enumerate(records)],
    )
    report.tables["stepwise"] = (
        ["step", "feature", "tune_adjusted_r2"],
        [[i + 1, f, h] for i, (f, h) in enumerate(zip(step.selected, step.history))],
    )
    report.tables["regression"] = (
        ["split", "model", "feature", "coefficient", "std_error", "p", "r2", "adjusted_r2", "n"],
        reg_rows,
    )
    report.tables["patch_cluster_scores"] = (
        ["rank", "cluster", "n_patches", "mean", "ci_lower", "ci_upper", "q25", "q75", "present"],
        [[i + 1, c.cluster, c.n_patches, c.mean, c.ci_lower, c.ci_upper, c.q25, c.q75, c.present]
         for i, c in enumerate(ranking)]
        + [[None, c.cluster, 0, None, None, None, None, None, False] for c in cluster_stats if not c.present],
    )
    report.tables["spearman"] = (["split", "feature", "versus", "rho", "p"], spear)
    return report
