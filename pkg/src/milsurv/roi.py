"""Tumor-probability heatmap -> binary ROI mask, and patch gating.

Grids are indexed ``[row, col]`` (``y, x``); one cell is one superpixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from milsurv.errors import ValidationError


@dataclass(frozen=True)
class HeatmapGrid:
    values: np.ndarray
    superpixel_um: float = 32.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValidationError("heatmap must be 2-D")
        if values.size and (values.min() < 0 or values.max() > 1):
            raise ValidationError("heatmap values must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class RoiMaskGrid:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ValidationError("mask must be 2-D")
        object.__setattr__(self, "bits", bits.astype(bool))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        return isinstance(other, RoiMaskGrid) and np.array_equal(self.bits, other.bits)

    __hash__ = None


@dataclass(frozen=True)
class MaskParams:
    threshold: float
    dilation: int = 0
    min_component: int = 8
    connectivity: int = 8
    patch_side: int = 16

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValidationError("threshold must lie in (0, 1)")
        if self.dilation < 0:
            raise ValidationError("dilation radius must be >= 0")
        if self.min_component < 1:
            raise ValidationError("min_component must be >= 1")
        if self.connectivity not in (4, 8):
            raise ValidationError("connectivity must be 4 or 8")


def binarize(h: HeatmapGrid, t: float) -> RoiMaskGrid:
    if not 0 < t < 1:
        raise ValidationError("threshold must lie in (0, 1)")
    return RoiMaskGrid(h.values >= t)


def _structure(connectivity: int) -> np.ndarray:
    return ndimage.generate_binary_structure(2, 2 if connectivity == 8 else 1)


def denoise(m: RoiMaskGrid, min_component: int = 8, connectivity: int = 8) -> RoiMaskGrid:
    """Clear connected components with fewer than ``min_component`` cells."""
    labels, n = ndimage.label(m.bits, structure=_structure(connectivity))
    if n == 0:
        return RoiMaskGrid(m.bits.copy())
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_component
    keep[0] = False
    return RoiMaskGrid(keep[labels])


def disk(r: int) -> np.ndarray:
    """Lattice points with ``dx**2 + dy**2 <= r**2`` as a boolean footprint."""
    off = np.arange(-r, r + 1)
    return off[:, None] ** 2 + off[None, :] ** 2 <= r * r


def dilate(m: RoiMaskGrid, r: int) -> RoiMaskGrid:
    if r < 0:
        raise ValidationError("dilation radius must be >= 0")
    if r == 0 or not m.bits.any():
        return RoiMaskGrid(m.bits.copy())
    return RoiMaskGrid(ndimage.binary_dilation(m.bits, structure=disk(r)))


def build_mask(h: HeatmapGrid, p: MaskParams) -> RoiMaskGrid:
    m = binarize(h, p.threshold)
    m = denoise(m, p.min_component, p.connectivity)
    return dilate(m, p.dilation)


def block_counts(m: RoiMaskGrid, side: int = 16) -> np.ndarray:
    """Set-bit count per non-overlapping ``side x side`` block anchored at (0, 0).

    Partial blocks at the right and bottom edges are dropped.
    """
    by, bx = m.height // side, m.width // side
    trimmed = m.bits[: by * side, : bx * side]
    return trimmed.reshape(by, side, bx, side).sum(axis=(1, 3))


def patch_inclusion(m: RoiMaskGrid, patch_side: int = 16) -> list[tuple[int, int]]:
    """Blocks at least half covered by the mask, as ``(x, y)`` block coordinates."""
    if m.height < patch_side or m.width < patch_side:
        raise ValidationError("grid smaller than one patch")
    need = math.ceil(patch_side * patch_side / 2)
    ys, xs = np.nonzero(block_counts(m, patch_side) >= need)
    return sorted(zip(xs.tolist(), ys.tolist()), key=lambda c: (c[1], c[0]))


@dataclass(frozen=True)
class SegMetrics:
    recall: float
    precision: float
    iou: float
    tp: int
    fp: int
    fn: int


def confusion(pred: RoiMaskGrid, truth: RoiMaskGrid) -> tuple[int, int, int]:
    if pred.bits.shape != truth.bits.shape:
        raise ValidationError("mask dimensions differ")
    tp = int(np.sum(pred.bits & truth.bits))
    fp = int(np.sum(pred.bits & ~truth.bits))
    fn = int(np.sum(~pred.bits & truth.bits))
    return tp, fp, fn


def metrics_from_counts(tp: int, fp: int, fn: int) -> SegMetrics:
    if tp + fn == 0:
        raise ValidationError("recall undefined: truth mask is empty")
    if tp + fp == 0:
        raise ValidationError("precision undefined: predicted mask is empty")
    return SegMetrics(tp / (tp + fn), tp / (tp + fp), tp / (tp + fp + fn), tp, fp, fn)


def seg_metrics(pred: RoiMaskGrid, truth: RoiMaskGrid) -> SegMetrics:
    return metrics_from_counts(*confusion(pred, truth))


def pooled_seg_metrics(
    preds: Sequence[RoiMaskGrid], truths: Sequence[RoiMaskGrid]
) -> SegMetrics:
    """Micro-averaged metrics over several slides."""
    tp = fp = fn = 0
    for p, t in zip(preds, truths, strict=True):
        a, b, c = confusion(p, t)
        tp, fp, fn = tp + a, fp + b, fn + c
    return metrics_from_counts(tp, fp, fn)


def resolve_threshold(
    heatmaps: Sequence[HeatmapGrid],
    truths: Sequence[RoiMaskGrid],
    recall_target: float,
    grid: Sequence[float] | None = None,
) -> float:
    """Threshold whose pooled recall is closest to ``recall_target`` from below.

    Only binarization is scored, as the tumor detector would be. Among grid
    thresholds with recall <= target the one with the highest recall wins; ties
    go to the smaller threshold.
    """
    if not truths:
        raise ValidationError("recall target needs ground-truth masks")
    if grid is None:
        grid = np.round(np.arange(0.01, 1.0, 0.01), 2)
    best_t, best_r = None, -1.0
    for t in grid:
        tp = fn = 0
        for h, m in zip(heatmaps, truths, strict=True):
            b = h.values >= t
            tp += int(np.sum(b & m.bits))
            fn += int(np.sum(~b & m.bits))
        if tp + fn == 0:
            raise ValidationError("recall undefined: truth masks are empty")
        r = tp / (tp + fn)
        if r <= recall_target and r > best_r:
            best_t, best_r = float(t), r
    if best_t is None:
        raise ValidationError(f"no threshold reaches recall <= {recall_target}")
    return best_t
