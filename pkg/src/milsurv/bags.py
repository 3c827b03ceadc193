"""Patch bags: a case's patch feature vectors grouped by slide."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from milsurv.errors import ValidationError


@dataclass(frozen=True)
class Slide:
    slide_id: str
    patches: np.ndarray  # (m, d)
    coords: np.ndarray = field(default=None)  # (m, 2) block (x, y)

    def __post_init__(self):
        patches = np.asarray(self.patches, dtype=float)
        if patches.ndim != 2:
            raise ValidationError(f"{self.slide_id}: patches must be a 2-D matrix")
        coords = self.coords
        if coords is None:
            coords = np.zeros((patches.shape[0], 2), dtype=np.int64)
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        if coords.shape[0] != patches.shape[0]:
            raise ValidationError(f"{self.slide_id}: coords and patches disagree")
        object.__setattr__(self, "patches", patches)
        object.__setattr__(self, "coords", coords)

    def gate(self, included: Iterable[tuple[int, int]]) -> "Slide":
        """Keep only patches whose block coordinate is in ``included``."""
        keep_set = {tuple(c) for c in included}
        keep = np.array([tuple(c) in keep_set for c in self.coords.tolist()], dtype=bool)
        return Slide(self.slide_id, self.patches[keep], self.coords[keep])


@dataclass(frozen=True)
class CaseBag:
    case_id: str
    slides: tuple[Slide, ...]

    def __post_init__(self):
        object.__setattr__(self, "slides", tuple(self.slides))
        dims = {s.patches.shape[1] for s in self.slides if s.patches.shape[0]}
        if len(dims) > 1:
            raise ValidationError(f"{self.case_id}: inconsistent feature dimension")

    @property
    def feature_dim(self) -> int:
        for s in self.slides:
            return s.patches.shape[1]
        raise ValidationError(f"{self.case_id}: no slides")

    @property
    def n_patches(self) -> int:
        return sum(s.patches.shape[0] for s in self.slides)

    def all_patches(self) -> np.ndarray:
        if not self.slides:
            return np.zeros((0, 0))
        return np.vstack([s.patches for s in self.slides])

    def slide_index(self) -> np.ndarray:
        """Slide position of every row of :meth:`all_patches`."""
        return np.concatenate(
            [np.full(s.patches.shape[0], i) for i, s in enumerate(self.slides)]
        ).astype(np.int64) if self.slides else np.zeros(0, dtype=np.int64)

    def slide_ids(self) -> list[str]:
        """Slide id of every row of :meth:`all_patches`."""
        return [s.slide_id for s in self.slides for _ in range(s.patches.shape[0])]

    def gate(self, included: Mapping[str, Sequence[tuple[int, int]]]) -> "CaseBag":
        """Apply per-slide ROI patch inclusion lists (slides absent keep nothing)."""
        return CaseBag(self.case_id, tuple(s.gate(included.get(s.slide_id, ())) for s in self.slides))
