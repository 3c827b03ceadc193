"""Training loop, bag sampling and checkpoint selection."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from milsurv.bags import CaseBag
from milsurv.errors import ValidationError
from milsurv.mil.loss import SurvivalLoss, cox_loss, l2_penalty
from milsurv.mil.model import ArchConfig, MilModel, batch_backward, batch_forward, init_model, patch_scores
from milsurv.mil.optim import AdamState, LrSchedule, adam_step
from milsurv.records import SurvivalRecord, survival_arrays
from milsurv.survival import concordance_arrays

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    bag_size: int = 16
    batch_size: int = 64
    learning_rate: float = 5e-4
    decay_steps: int = 10000
    decay_rate: float = 0.95
    l2_weight: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    total_steps: int = 20000
    eval_every: int = 200
    eval_patches_per_case: int = 1024
    rolling_window: int = 10
    n_layers: int = 2
    base_depth: int = 32
    depth_growth: float = 1.5
    max_depth: int = 64
    per_slide_sampling: bool = False
    eval_seed: int = 12345
    seed: int = 0

    def __post_init__(self):
        for name in ("bag_size", "batch_size", "decay_steps", "total_steps", "eval_every",
                     "eval_patches_per_case", "rolling_window", "n_layers", "base_depth", "max_depth"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ValidationError("decay_rate must lie in (0, 1]")
        if self.learning_rate < 0 or self.l2_weight < 0:
            raise ValidationError("learning rate and l2 weight must be >= 0")

    @property
    def arch(self) -> ArchConfig:
        return ArchConfig(self.n_layers, self.base_depth, self.depth_growth, self.max_depth)

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.learning_rate, self.decay_steps, self.decay_rate)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


# bag sampling -------------------------------------------------------------------


class PackedBags:
    """All patches of a case list in one matrix, with per-case offsets."""

    def __init__(self, bags: Sequence[CaseBag]):
        self.case_ids = [b.case_id for b in bags]
        mats = [b.all_patches() for b in bags]
        self.counts = np.array([m.shape[0] for m in mats], dtype=np.int64)
        if np.any(self.counts == 0):
            empty = self.case_ids[int(np.argmin(self.counts))]
            raise ValidationError(f"empty ROI: {empty}")
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)[:-1]])
        self.patches = np.vstack(mats)
        self.slide_of = np.concatenate([b.slide_index() for b in bags])
        # per case: slide start offsets and sizes (for per-slide sampling)
        self.slide_sizes = [np.array([s.patches.shape[0] for s in b.slides]) for b in bags]

    @property
    def feature_dim(self) -> int:
        return self.patches.shape[1]

    def sample(self, cases: np.ndarray, n: int, rng, per_slide: bool = False) -> np.ndarray:
        """Indices ``(len(cases), n)`` into :attr:`patches`.

        Uniform over each case's patches, without replacement when the case has
        at least ``n`` of them, with replacement otherwise.
        """
        counts = self.counts[cases]
        if per_slide:
            return self._sample_per_slide(cases, n, rng)
        keys = rng.random((cases.size, int(counts.max())))
        keys[np.arange(keys.shape[1])[None, :] >= counts[:, None]] = np.inf
        without = np.argsort(keys, axis=1, kind="stable")[:, :n] if keys.shape[1] >= n else None
        with_ = np.floor(rng.random((cases.size, n)) * counts[:, None]).astype(np.int64)
        local = with_
        if without is not None:
            rich = counts >= n
            local = np.where(rich[:, None], without, with_)
        return self.offsets[cases][:, None] + local

    def _sample_per_slide(self, cases, n, rng):
        out = np.empty((cases.size, n), dtype=np.int64)
        for row, c in enumerate(cases):
            sizes = self.slide_sizes[c]
            sizes = sizes[sizes > 0]
            starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
            slide = rng.integers(0, sizes.size, n)
            within = np.floor(rng.random(n) * sizes[slide]).astype(np.int64)
            out[row] = self.offsets[c] + starts[slide] + within
        return out


def sample_bag(case: CaseBag, n: int, rng, per_slide: bool = False) -> np.ndarray:
    """Draw ``n`` patch vectors from one case."""
    if case.n_patches == 0:
        raise ValidationError("empty ROI")
    packed = PackedBags([case])
    idx = packed.sample(np.array([0]), n, rng, per_slide)[0]
    return packed.patches[idx]


# gradient -------------------------------------------------------------------


def loss_and_grad(
    model: MilModel,
    bags: np.ndarray,
    times,
    events,
    l2_weight: float = 0.0,
    loss_fn: SurvivalLoss = cox_loss,
):
    """Batch loss (survival + L2) and exact parameter gradients.

    ``bags`` is ``(B, n, d)``: B cases with n sampled patches each.
    """
    scores, cache = batch_forward(model, np.asarray(bags, dtype=float))
    loss, d_scores = loss_fn(scores, np.asarray(times), np.asarray(events, dtype=bool))
    grads = batch_backward(model, cache, d_scores)
    params = model.parameters()
    penalty, g_pen = l2_penalty(params, l2_weight)
    return loss + penalty, [g + gp for g, gp in zip(grads, g_pen)]


def grad(model: MilModel, bags, records: Sequence[SurvivalRecord], l2_weight: float = 0.0):
    times, events = survival_arrays(records)
    return loss_and_grad(model, bags, times, events, l2_weight)[1]


# checkpoints -----------------------------------------------------------------


@dataclass
class Checkpoint:
    step: int
    model: MilModel
    tune_metric: float
    smoothed_metric: float | None = None
    adam: AdamState | None = field(default=None, repr=False)


@dataclass
class TrainResult:
    checkpoints: list[Checkpoint]
    log_rows: list[dict]
    model: MilModel
    adam: AdamState
    step: int


def select_checkpoint(checkpoints: Sequence[Checkpoint], window: int = 10) -> Checkpoint:
    """Checkpoint ending the trailing window with the highest mean tune metric.

    Ties go to the latest step. Window sums use ``math.fsum`` so equal windows
    compare equal regardless of order.
    """
    if len(checkpoints) < window:
        raise ValidationError(f"need at least {window} checkpoints, have {len(checkpoints)}")
    metrics = [c.tune_metric for c in checkpoints]
    best_pos, best = None, -math.inf
    for end in range(window - 1, len(metrics)):
        mean = math.fsum(metrics[end - window + 1 : end + 1]) / window
        if mean >= best:
            best_pos, best = end, mean
    return checkpoints[best_pos]


def best_checkpoint(checkpoints: Sequence[Checkpoint], window: int) -> tuple[Checkpoint, int]:
    """Rolling-window selection; runs shorter than the window use all checkpoints.

    Returns a copy of the chosen checkpoint whose ``smoothed_metric`` is the
    window mean it was selected on, and the window actually used.
    """
    if not checkpoints:
        raise ValidationError("run produced no checkpoints (total_steps < eval_every)")
    w = min(window, len(checkpoints))
    best = select_checkpoint(checkpoints, w)
    pos = list(checkpoints).index(best)
    mean = trailing_mean([c.tune_metric for c in checkpoints[: pos + 1]], w)
    return Checkpoint(best.step, best.model, best.tune_metric, mean, best.adam), w


def trailing_mean(metrics: Sequence[float], window: int) -> float | None:
    if len(metrics) < window:
        return None
    return math.fsum(metrics[-window:]) / window


# training loop --------------------------------------------------------------


def score_cases(model: MilModel, packed: PackedBags, index: np.ndarray | None = None) -> np.ndarray:
    """Case scores as means of patch scores; ``index`` selects patch rows per case."""
    if index is None:
        s = patch_scores(model, packed.patches)
        return np.add.reduceat(s, packed.offsets) / packed.counts
    s = patch_scores(model, packed.patches[index.ravel()]).reshape(index.shape)
    return s.mean(axis=1)


def eval_index(packed: PackedBags, n: int, seed: int) -> np.ndarray | None:
    """Fixed evaluation sample; ``None`` means every case has <= n patches (use all)."""
    if packed.counts.max() <= n:
        return None
    rng = np.random.default_rng(seed)
    return packed.sample(np.arange(len(packed.case_ids)), n, rng)


def train(
    records: Sequence[SurvivalRecord],
    bags: Sequence[CaseBag],
    config: TrainConfig,
    model: MilModel | None = None,
    adam: AdamState | None = None,
    start_step: int = 0,
    loss_fn: SurvivalLoss = cox_loss,
    on_checkpoint: Callable[[Checkpoint], None] | None = None,
) -> TrainResult:
    """Train on the ``train`` split and evaluate the tune c-index periodically.

    ``records`` and ``bags`` are matched by case id. Step ``k`` draws its batch
    from ``default_rng([seed, k])`` so a run resumed from a snapshot continues
    exactly as an uninterrupted one would.
    """
    bag_by_id = {b.case_id: b for b in bags}
    train_recs = [r for r in records if r.split == "train"]
    tune_recs = [r for r in records if r.split == "tune"]
    if not train_recs or not tune_recs:
        raise ValidationError("train and tune splits must be nonempty")
    missing = [r.case_id for r in train_recs + tune_recs if r.case_id not in bag_by_id]
    if missing:
        raise ValidationError(f"no patches for cases {missing[:5]}")
    tr_times, tr_events = survival_arrays(train_recs)
    tu_times, tu_events = survival_arrays(tune_recs)
    if not tr_events.any():
        raise ValidationError("no events in the train split")
    train_bags = PackedBags([bag_by_id[r.case_id] for r in train_recs])
    tune_bags = PackedBags([bag_by_id[r.case_id] for r in tune_recs])
    tune_idx = eval_index(tune_bags, config.eval_patches_per_case, config.eval_seed)

    if model is None:
        model = init_model(train_bags.feature_dim, config.arch, np.random.default_rng([config.seed, 2**31]))
    params = [p.copy() for p in model.parameters()]
    if adam is None:
        adam = AdamState.zeros_like(params, config.beta1, config.beta2, config.epsilon)
    schedule = config.schedule
    n_train = len(train_recs)
    checkpoints: list[Checkpoint] = []
    metrics: list[float] = []
    rows: list[dict] = []
    running = []

    step = start_step
    while step < config.total_steps:
        rng = np.random.default_rng([config.seed, step])
        cases = _draw_batch(rng, n_train, config.batch_size, tr_events)
        idx = train_bags.sample(cases, config.bag_size, rng, config.per_slide_sampling)
        current = MilModel.from_parameters(params)
        loss, grads = loss_and_grad(
            current, train_bags.patches[idx], tr_times[cases], tr_events[cases], config.l2_weight, loss_fn
        )
        params, adam = adam_step(params, grads, adam, schedule, step)
        running.append(loss)
        step += 1
        if step % config.eval_every == 0:
            snapshot = MilModel.from_parameters([p.copy() for p in params])
            tune_scores = score_cases(snapshot, tune_bags, tune_idx)
            c = concordance_arrays(tune_scores, tu_times, tu_events)
            metrics.append(c)
            ckpt = Checkpoint(step, snapshot, c, trailing_mean(metrics, config.rolling_window), adam.copy())
            checkpoints.append(ckpt)
            rows.append(
                {"step": step, "loss": float(np.mean(running)), "tune_cindex": c, "smoothed": ckpt.smoothed_metric}
            )
            running = []
            log.debug("step %d loss %.4f tune c-index %.4f", step, rows[-1]["loss"], c)
            if on_checkpoint is not None:
                on_checkpoint(ckpt)
    return TrainResult(checkpoints, rows, MilModel.from_parameters(params), adam, step)


def _draw_batch(rng, n_train, batch_size, events, attempts: int = 10) -> np.ndarray:
    replace_ = batch_size > n_train
    for _ in range(attempts):
        cases = rng.choice(n_train, size=batch_size, replace=replace_)
        if events[cases].any():
            return cases
    raise ValidationError("uninformative batch")
