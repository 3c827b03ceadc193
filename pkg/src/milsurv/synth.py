"""Synthetic cohorts with planted prognostic patch prototypes.

Every case is a mixture of ``n_prototypes`` patch types. Patch features are
isotropic Gaussians around the prototype centroids, and the true log hazard is

    eta = sum_j beta_j * (fraction of the case's patches from prototype j)
          + covariate terms

Event times are exponential with rate ``baseline_hazard * exp(eta)`` and are
discretized to whole months by ceiling. Heatmaps are drawn so that the default
mask pipeline (threshold 0.5, no dilation) recovers exactly the patch blocks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from milsurv.bags import CaseBag, Slide
from milsurv.errors import ValidationError
from milsurv.records import SPLITS, SurvivalRecord
from milsurv.roi import HeatmapGrid, RoiMaskGrid

PATCH_SIDE = 16


@dataclass(frozen=True)
class GeneratorConfig:
    n_cases: int = 600
    slides_per_case: tuple[int, int] = (1, 3)
    patches_per_slide: tuple[int, int] = (8, 24)
    feature_dim: int = 16
    n_prototypes: int = 8
    prototype_risk_betas: tuple[float, ...] = (1.5, -1.0, -1.0, -1.0, -0.5, -0.5, 0.0, 0.0)
    prototype_spread: float = 1.0
    centroid_scale: float = 1.5
    mixture_concentration: float = 0.1
    high_risk_concentration: float = 1.0
    zero_inflation: float = 0.3
    baseline_hazard: float = 0.01
    admin_censor_months: int = 120
    censor_rate: float | None = 0.4
    covariate_betas: dict = field(
        default_factory=lambda: {"age": 0.4, "stage": 1.2, "grade": 0.5, "sex": 0.0}
    )
    split_fractions: tuple[float, float, float, float] = (0.4, 0.2, 0.2, 0.2)
    heatmaps: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_cases < 1 or self.feature_dim < 1 or self.n_prototypes < 1:
            raise ValidationError("counts must be positive")
        for name in ("slides_per_case", "patches_per_slide"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValidationError(f"{name} must satisfy 1 <= lo <= hi")
        if len(self.prototype_risk_betas) != self.n_prototypes:
            raise ValidationError("need one risk beta per prototype")
        if not self.baseline_hazard > 0:
            raise ValidationError("baseline hazard must be positive")
        if not self.prototype_spread > 0:
            raise ValidationError("prototype spread must be positive")
        if self.censor_rate is not None and not 0 <= self.censor_rate < 1:
            raise ValidationError("censor rate must lie in [0, 1)")
        if len(self.split_fractions) != 4 or abs(sum(self.split_fractions) - 1) > 1e-9:
            raise ValidationError("split fractions must be four numbers summing to 1")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        for key in ("slides_per_case", "patches_per_slide", "prototype_risk_betas", "split_fractions"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GroundTruth:
    eta: np.ndarray
    covariate_terms: np.ndarray
    betas: np.ndarray
    centroids: np.ndarray
    patch_prototypes: dict  # case_id -> prototype id per patch (all_patches order)
    case_ids: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "case_ids": list(self.case_ids),
            "eta": self.eta.tolist(),
            "covariate_terms": self.covariate_terms.tolist(),
            "betas": self.betas.tolist(),
            "centroids": self.centroids.tolist(),
            "patch_prototypes": {k: v.tolist() for k, v in self.patch_prototypes.items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruth":
        return cls(
            eta=np.asarray(d["eta"], dtype=float),
            covariate_terms=np.asarray(d["covariate_terms"], dtype=float),
            betas=np.asarray(d["betas"], dtype=float),
            centroids=np.asarray(d["centroids"], dtype=float),
            patch_prototypes={k: np.asarray(v, dtype=np.int64) for k, v in d["patch_prototypes"].items()},
            case_ids=tuple(d["case_ids"]),
        )

    @property
    def high_risk_prototype(self) -> int:
        return int(np.argmax(self.betas))


@dataclass
class SyntheticCohort:
    records: list[SurvivalRecord]
    bags: list[CaseBag]
    heatmaps: dict[str, HeatmapGrid]
    truth_masks: dict[str, RoiMaskGrid]
    ground_truth: GroundTruth
    config: GeneratorConfig


def oracle_scores(gt: GroundTruth) -> np.ndarray:
    return gt.eta.copy()


def prototype_fractions(gt: GroundTruth) -> np.ndarray:
    """(n_cases, n_prototypes) patch fractions recomputed from patch labels."""
    k = gt.betas.size
    out = np.zeros((len(gt.case_ids), k))
    for i, cid in enumerate(gt.case_ids):
        labels = gt.patch_prototypes[cid]
        out[i] = np.bincount(labels, minlength=k) / labels.size
    return out


def simulate_event_times(eta, baseline_hazard: float, rng) -> np.ndarray:
    """Exponential proportional-hazards event times in (continuous) months."""
    u = rng.random(np.shape(eta))
    return -np.log1p(-u) / (baseline_hazard * np.exp(eta))


def censor_and_discretize(event_times, censor_rate, admin_months, rng):
    """Apply administrative + tuned random censoring and month discretization.

    With ``censor_rate`` set, an exponential random censoring rate is chosen so
    that the realized censored fraction is as close to the target as the
    sample allows. Returns ``(months, events)``.
    """
    event_times = np.asarray(event_times, dtype=float)
    u = rng.random(event_times.shape)
    admin_only = event_times > admin_months
    if censor_rate is None:
        censor = np.full(event_times.shape, float(admin_months))
    else:
        base = admin_only.mean()
        if censor_rate < base - 1e-12:
            raise ValidationError(
                f"infeasible censor rate {censor_rate:.3f}: administrative censoring alone gives {base:.3f}"
            )
        unit = -np.log1p(-u)  # Exp(1) draws; censor time = unit / rate

        def frac(log_rate):
            c = np.minimum(unit / math.exp(log_rate), admin_months)
            return np.mean(event_times > c)

        lo, hi = -30.0, 30.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if frac(mid) < censor_rate:
                lo = mid
            else:
                hi = mid
        log_rate = hi if abs(frac(hi) - censor_rate) <= abs(frac(lo) - censor_rate) else lo
        censor = np.minimum(unit / math.exp(log_rate), admin_months)
    observed = np.minimum(event_times, censor)
    events = event_times <= censor
    months = np.maximum(1, np.ceil(observed)).astype(np.int64)
    return months, events


def _covariates(rng, n):
    age = np.clip(np.round(rng.normal(68, 10, n)), 30, 95)
    sex = rng.integers(0, 2, n).astype(float)
    stage = np.where(rng.random(n) < 0.5, 2.0, 3.0)
    grade = rng.choice([1.0, 2.0, 3.0], size=n, p=[0.1, 0.7, 0.2])
    return {"age": age, "sex": sex, "stage": stage, "grade": grade}


def covariate_effect(cov: dict, betas: dict) -> np.ndarray:
    """Covariate part of the log hazard: age per decade, stage III, grade >= 3, sex."""
    n = len(next(iter(cov.values())))
    out = np.zeros(n)
    out += betas.get("age", 0.0) * (cov["age"] - 68.0) / 10.0
    out += betas.get("stage", 0.0) * (cov["stage"] == 3.0)
    out += betas.get("grade", 0.0) * (cov["grade"] == 3.0)
    out += betas.get("sex", 0.0) * cov["sex"]
    return out


def _case_patches(cfg: GeneratorConfig, centroids, high_risk, case_idx):
    rng = np.random.default_rng([cfg.seed, 1, case_idx])
    conc = np.full(cfg.n_prototypes, cfg.mixture_concentration)
    if high_risk is not None:
        conc[high_risk] = cfg.high_risk_concentration
    w = rng.dirichlet(conc)
    if high_risk is not None and rng.random() < cfg.zero_inflation and cfg.n_prototypes > 1:
        w[high_risk] = 0.0
        if w.sum() > 0:
            w = w / w.sum()
        else:
            w = np.full(cfg.n_prototypes, 1.0 / (cfg.n_prototypes - 1))
            w[high_risk] = 0.0
    n_slides = int(rng.integers(cfg.slides_per_case[0], cfg.slides_per_case[1] + 1))
    slides = []
    for s in range(n_slides):
        m = int(rng.integers(cfg.patches_per_slide[0], cfg.patches_per_slide[1] + 1))
        labels = rng.choice(cfg.n_prototypes, size=m, p=w)
        feats = centroids[labels] + cfg.prototype_spread * rng.standard_normal((m, cfg.feature_dim))
        side = max(2, math.ceil(math.sqrt(1.5 * m)))
        blocks = rng.choice(side * side, size=m, replace=False)
        coords = np.column_stack([blocks % side, blocks // side])
        slides.append((labels, feats, coords, side, rng.integers(0, 2**32)))
    return slides


def _heatmap(side_blocks, coords, seed):
    rng = np.random.default_rng(seed)
    size = side_blocks * PATCH_SIDE
    truth = np.zeros((size, size), dtype=bool)
    for x, y in coords:
        truth[y * PATCH_SIDE:(y + 1) * PATCH_SIDE, x * PATCH_SIDE:(x + 1) * PATCH_SIDE] = True
    values = rng.uniform(0.0, 0.3, (size, size))
    values[truth] = rng.uniform(0.35, 1.0, int(truth.sum()))
    # small false-positive specks (4 cells) for the denoiser to remove
    for _ in range(2):
        y0, x0 = rng.integers(0, size - 1, 2)
        if not truth[y0:y0 + 2, x0:x0 + 2].any():
            values[y0:y0 + 2, x0:x0 + 2] = 0.95
    return HeatmapGrid(values), RoiMaskGrid(truth)


def generate(cfg: GeneratorConfig) -> SyntheticCohort:
    """Draw a cohort; fully determined by ``cfg`` (including ``cfg.seed``)."""
    rng = np.random.default_rng([cfg.seed, 0])
    centroids = cfg.centroid_scale * rng.standard_normal((cfg.n_prototypes, cfg.feature_dim))
    betas = np.asarray(cfg.prototype_risk_betas, dtype=float)
    high_risk = int(np.argmax(betas)) if betas.max() > 0 else None

    case_ids = [f"case{i:05d}" for i in range(cfg.n_cases)]
    bags, labels_by_case, fractions = [], {}, np.zeros((cfg.n_cases, cfg.n_prototypes))
    heatmaps, truths = {}, {}
    for i, cid in enumerate(case_ids):
        slides = []
        all_labels = []
        for s, (labels, feats, coords, side, hseed) in enumerate(
            _case_patches(cfg, centroids, high_risk, i)
        ):
            sid = f"{cid}_s{s}"
            slides.append(Slide(sid, feats, coords))
            all_labels.append(labels)
            if cfg.heatmaps:
                heatmaps[sid], truths[sid] = _heatmap(side, coords, hseed)
        bags.append(CaseBag(cid, tuple(slides)))
        labels = np.concatenate(all_labels)
        labels_by_case[cid] = labels
        fractions[i] = np.bincount(labels, minlength=cfg.n_prototypes) / labels.size

    cov = _covariates(rng, cfg.n_cases)
    cov_terms = covariate_effect(cov, cfg.covariate_betas)
    eta = fractions @ betas + cov_terms
    t = simulate_event_times(eta, cfg.baseline_hazard, rng)
    months, events = censor_and_discretize(t, cfg.censor_rate, cfg.admin_censor_months, rng)

    order = rng.permutation(cfg.n_cases)
    bounds = np.round(np.cumsum(cfg.split_fractions) * cfg.n_cases).astype(int)
    split = np.empty(cfg.n_cases, dtype=object)
    start = 0
    for name, stop in zip(SPLITS, bounds):
        split[order[start:stop]] = name
        start = stop

    records = [
        SurvivalRecord(
            cid,
            int(months[i]),
            bool(events[i]),
            {k: float(v[i]) for k, v in cov.items()},
            str(split[i]),
        )
        for i, cid in enumerate(case_ids)
    ]
    gt = GroundTruth(
        eta=eta,
        covariate_terms=cov_terms,
        betas=betas,
        centroids=centroids,
        patch_prototypes=labels_by_case,
        case_ids=tuple(case_ids),
    )
    return SyntheticCohort(records, bags, heatmaps, truths, gt, cfg)


def ph_cohort(x, beta, baseline_hazard=0.01, censor_rate=0.3, admin_months=120, seed=0):
    """Records for a plain Cox model ``eta = x @ beta`` (no patches)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    rng = np.random.default_rng(seed)
    eta = x @ np.atleast_1d(np.asarray(beta, dtype=float))
    t = simulate_event_times(eta, baseline_hazard, rng)
    months, events = censor_and_discretize(t, censor_rate, admin_months, rng)
    return [SurvivalRecord(f"p{i:05d}", int(m), bool(e)) for i, (m, e) in enumerate(zip(months, events))]


def tissue_slides(cohort: SyntheticCohort) -> dict[str, Slide]:
    """Every block of every slide: the tumor patches plus non-tumor background.

    Background patches come from one extra Gaussian whose centre is drawn
    separately from the prototype centroids. Rows are ordered by block
    (y, x) so their position does not reveal which rows are tumor. Needs
    heatmaps to know each slide's extent.
    """
    cfg = cohort.config
    if not cohort.heatmaps:
        raise ValidationError("tissue slides need heatmaps")
    rng = np.random.default_rng([cfg.seed, 4])
    center = cfg.centroid_scale * rng.standard_normal(cfg.feature_dim)
    out = {}
    for case_idx, bag in enumerate(cohort.bags):
        for s_idx, slide in enumerate(bag.slides):
            side = cohort.heatmaps[slide.slide_id].height // PATCH_SIDE
            taken = np.zeros((side, side), dtype=bool)
            taken[slide.coords[:, 1], slide.coords[:, 0]] = True
            by, bx = np.nonzero(~taken)
            srng = np.random.default_rng([cfg.seed, 5, case_idx, s_idx])
            bg = center + cfg.prototype_spread * srng.standard_normal((by.size, cfg.feature_dim))
            coords = np.vstack([slide.coords, np.column_stack([bx, by])])
            feats = np.vstack([slide.patches, bg])
            order = np.lexsort((coords[:, 0], coords[:, 1]))
            out[slide.slide_id] = Slide(slide.slide_id, feats[order], coords[order])
    return out
