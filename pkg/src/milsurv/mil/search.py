"""Random (or exhaustive) hyperparameter search over training options."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from milsurv.bags import CaseBag
from milsurv.errors import NumericalError, ValidationError
from milsurv.mil.training import Checkpoint, TrainConfig, TrainResult, best_checkpoint, train
from milsurv.records import SurvivalRecord

log = logging.getLogger(__name__)

# Training-side options and their candidate values. Layer counts are smaller
# than for a convolutional backbone because patches here are plain vectors.
DEFAULT_SPACE: dict[str, tuple] = {
    "n_layers": (1, 2, 3),
    "base_depth": (8, 16, 32),
    "depth_growth": (1.25, 1.5, 2.0),
    "max_depth": (64, 256),
    "l2_weight": (1e-3, 1e-4, 1e-5),
    "learning_rate": (5e-3, 5e-4, 5e-5),
    "decay_steps": (10000, 20000),
    "decay_rate": (0.95, 0.99),
}


@dataclass
class SearchResult:
    index: int
    config: TrainConfig
    score: float | None  # best smoothed tune c-index
    checkpoint: Checkpoint | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def sample_configs(space: Mapping[str, Sequence], n_configs: int, seed: int, base: TrainConfig) -> list[TrainConfig]:
    """Draw ``n_configs`` configurations, each field uniform over its candidates."""
    if not space or any(len(v) == 0 for v in space.values()):
        raise ValidationError("search space must be nonempty")
    if n_configs < 1:
        raise ValidationError("n_configs must be positive")
    rng = np.random.default_rng([seed, 7])
    keys = sorted(space)
    out = []
    for _ in range(n_configs):
        picks = {k: space[k][int(rng.integers(len(space[k])))] for k in keys}
        out.append(replace(base, **picks))
    return out


def grid_configs(space: Mapping[str, Sequence], base: TrainConfig) -> list[TrainConfig]:
    if not space or any(len(v) == 0 for v in space.values()):
        raise ValidationError("search space must be nonempty")
    keys = sorted(space)
    return [replace(base, **dict(zip(keys, combo))) for combo in itertools.product(*(space[k] for k in keys))]


def hyperparam_search(
    records: Sequence[SurvivalRecord],
    bags: Sequence[CaseBag],
    space: Mapping[str, Sequence] = DEFAULT_SPACE,
    n_configs: int = 100,
    seed: int = 0,
    base: TrainConfig | None = None,
    exhaustive: bool = False,
    train_fn: Callable[..., TrainResult] = train,
) -> list[SearchResult]:
    """Train every sampled configuration and rank by best smoothed tune c-index.

    Configuration ``i`` trains with seed ``seed + i``. Failures are kept, ranked
    after all successes, with the error message as the reason.
    """
    base = base or TrainConfig()
    configs = grid_configs(space, base) if exhaustive else sample_configs(space, n_configs, seed, base)
    results = []
    for i, cfg in enumerate(configs):
        cfg = replace(cfg, seed=seed + i)
        try:
            run = train_fn(records, bags, cfg)
            best, _ = best_checkpoint(run.checkpoints, cfg.rolling_window)
            results.append(SearchResult(i, cfg, best.smoothed_metric, best))
        except (ValidationError, NumericalError) as exc:
            log.warning("config %d failed: %s", i, exc)
            results.append(SearchResult(i, cfg, None, None, str(exc)))
    return rank_results(results)


def rank_results(results: Sequence[SearchResult]) -> list[SearchResult]:
    return sorted(results, key=lambda r: (not r.ok, -(r.score if r.ok else 0.0), r.index))
