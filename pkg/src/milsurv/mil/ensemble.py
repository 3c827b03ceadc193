"""Top-k ensembling and exhaustive inference over ROI-gated patches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from milsurv.bags import CaseBag
from milsurv.errors import NumericalError, ValidationError
from milsurv.mil.model import MilModel, patch_scores


@dataclass(frozen=True)
class Ensemble:
    """Members with the tune-set mean and std used to standardize their scores."""

    members: tuple[MilModel, ...]
    means: tuple[float, ...]
    stds: tuple[float, ...]

    def __post_init__(self):
        if len(self.members) < 1:
            raise ValidationError("ensemble needs at least one member")
        if not len(self.members) == len(self.means) == len(self.stds):
            raise ValidationError("member statistics are misaligned")
        if any(not s > 0 for s in self.stds):
            raise NumericalError("member has zero score variance on the tune set")

    def __len__(self) -> int:
        return len(self.members)

    def patch_scores(self, x: np.ndarray) -> np.ndarray:
        """Mean of the members' standardized patch scores."""
        total = np.zeros(x.shape[0])
        for model, mu, sd in zip(self.members, self.means, self.stds):
            total += (patch_scores(model, x) - mu) / sd
        return total / len(self.members)


@dataclass(frozen=True)
class CaseInference:
    case_id: str
    case_score: float
    patch_scores: np.ndarray
    slide_ids: list[str]
    coords: np.ndarray


def exhaustive_case_scores(model: MilModel, bags: Sequence[CaseBag]) -> np.ndarray:
    """Raw case scores using every patch of every case exactly once."""
    out = np.empty(len(bags))
    for i, bag in enumerate(bags):
        x = bag.all_patches()
        if x.shape[0] == 0:
            raise ValidationError(f"no tumor patches: {bag.case_id}")
        out[i] = patch_scores(model, x).mean()
    return out


def standardization(model: MilModel, tune_bags: Sequence[CaseBag]) -> tuple[float, float]:
    s = exhaustive_case_scores(model, tune_bags)
    return float(s.mean()), float(s.std())


def ensemble_top(
    candidates: Sequence[tuple[MilModel, float]],
    tune_bags: Sequence[CaseBag],
    k: int = 5,
) -> Ensemble:
    """Keep the ``k`` models with the highest tune c-index.

    Ties keep the earlier candidate. Standardization statistics come from
    exhaustive inference over ``tune_bags``.
    """
    if k < 1:
        raise ValidationError("k must be positive")
    if len(candidates) < k:
        raise ValidationError(f"need at least {k} models, have {len(candidates)}")
    order = sorted(range(len(candidates)), key=lambda i: (-candidates[i][1], i))[:k]
    members, means, stds = [], [], []
    for i in order:
        model = candidates[i][0]
        mu, sd = standardization(model, tune_bags)
        members.append(model)
        means.append(mu)
        stds.append(sd)
    return Ensemble(tuple(members), tuple(means), tuple(stds))


def infer_case(ensemble: Ensemble, case: CaseBag) -> CaseInference:
    """Score every included patch once; the case score is their mean."""
    x = case.all_patches()
    if x.shape[0] == 0:
        raise ValidationError(f"no tumor patches: {case.case_id}")
    scores = ensemble.patch_scores(x)
    coords = np.vstack([s.coords for s in case.slides])
    return CaseInference(case.case_id, float(scores.mean()), scores, case.slide_ids(), coords)


def infer_cases(ensemble: Ensemble, cases: Sequence[CaseBag]) -> list[CaseInference]:
    return [infer_case(ensemble, c) for c in cases]
