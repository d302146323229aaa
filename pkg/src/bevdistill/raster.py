"""Rotated-box rasterisation, range/velocity-aware mask scaling and centre heatmaps."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .scene import BoxAnnotation, ClassSpec, GridSpec, _window, box_local_coords

MASK_VARIANTS = ("dense", "gt", "gaussian", "scaling")


@dataclass(frozen=True)
class MaskScaleParams:
    r1: float = 20.0
    r2: float = 30.0
    alpha: float = 0.25
    beta: float = 0.5
    v1: float = 0.3
    v2: float = 0.8
    clip_min: float = 0.5
    clip_max: float = 4.0
    # "sum": range and velocity factors add up; "max": the larger one wins
    combine: str = "sum"

    def __post_init__(self):
        if not (0 < self.r1 < self.r2):
            raise ValueError("need 0 < r1 < r2")
        if not (0 < self.v1 < self.v2):
            raise ValueError("need 0 < v1 < v2")
        if not (0 <= self.alpha <= self.beta):
            raise ValueError("need 0 <= alpha <= beta")
        if not (0 <= self.clip_min <= self.clip_max):
            raise ValueError("need 0 <= clip_min <= clip_max")
        if self.combine not in ("sum", "max"):
            raise ValueError(f"combine must be 'sum' or 'max', got {self.combine!r}")


def rasterize_foreground(boxes: Iterable[BoxAnnotation], grid: GridSpec) -> np.ndarray:
    """Binary ``[H, W]`` mask: 1 where the cell centre lies inside any box (edges inclusive)."""
    mask = np.zeros((grid.H, grid.W))
    xs, ys = grid.cell_centers()
    for box in boxes:
        si, sj = _window(grid, box)
        u, v = box_local_coords(box, xs[sj], ys[si])
        hit = (np.abs(u) <= 0.5 * box.l + 1e-9) & (np.abs(v) <= 0.5 * box.w + 1e-9)
        mask[si, sj] = np.maximum(mask[si, sj], hit)
    return mask


def _range_factor(r: float, p: MaskScaleParams) -> float:
    if r >= p.r2:
        return p.beta
    if r >= p.r1:
        return p.alpha
    return 0.0


def _speed_factor(v: float, p: MaskScaleParams) -> float:
    v = abs(v)
    if v >= p.v2:
        return p.beta
    if v >= p.v1:
        return p.alpha
    return 0.0


def expansion_factors(box: BoxAnnotation, params: MaskScaleParams):
    """Fractional growth of (width, length)."""
    rf = _range_factor(box.range, params)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    v_len = box.vx * c + box.vy * s
    v_wid = -box.vx * s + box.vy * c
    fw, fl = _speed_factor(v_wid, params), _speed_factor(v_len, params)
    if params.combine == "sum":
        return rf + fw, rf + fl
    return max(rf, fw), max(rf, fl)


def _grow(extent: float, factor: float, params: MaskScaleParams) -> float:
    if factor <= 0.0:
        return extent
    return extent + min(max(factor * extent, params.clip_min), params.clip_max)


def scale_box(box: BoxAnnotation, params: MaskScaleParams) -> BoxAnnotation:
    fw, fl = expansion_factors(box, params)
    return replace(box, w=_grow(box.w, fw, params), l=_grow(box.l, fl, params))


def scaled_mask(boxes: Sequence[BoxAnnotation], grid: GridSpec, params: MaskScaleParams) -> np.ndarray:
    return rasterize_foreground([scale_box(b, params) for b in boxes], grid)


def heatmap_radius(box: BoxAnnotation, grid: GridSpec, scale: float = 0.5, min_radius: int = 1) -> int:
    return max(min_radius, int(round(scale * math.sqrt(box.w * box.l) / grid.cell_size)))


def draw_gaussian(channel: np.ndarray, i: int, j: int, radius: int) -> None:
    """Max-combine a truncated Gaussian with peak 1 at (i, j) into ``channel`` in place."""
    sigma = (2 * radius + 1) / 6.0
    d = np.arange(-radius, radius + 1)
    g = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2 * sigma * sigma))
    h, w = channel.shape
    i0, i1 = max(0, i - radius), min(h, i + radius + 1)
    j0, j1 = max(0, j - radius), min(w, j + radius + 1)
    patch = g[i0 - i + radius:i1 - i + radius, j0 - j + radius:j1 - j + radius]
    np.maximum(channel[i0:i1, j0:j1], patch, out=channel[i0:i1, j0:j1])


def gaussian_heatmap(boxes: Sequence[BoxAnnotation], grid: GridSpec, classes: ClassSpec) -> np.ndarray:
    """``[K, H, W]`` centre heatmap, one channel per class."""
    hm = np.zeros((classes.K, grid.H, grid.W))
    for box in boxes:
        i, j = grid.cell_of(box.x, box.y)
        draw_gaussian(hm[box.class_id], i, j, heatmap_radius(box, grid))
    return hm


def feature_mask(variant: str, boxes: Sequence[BoxAnnotation], grid: GridSpec, classes: ClassSpec,
                 params: MaskScaleParams) -> np.ndarray:
    """Foreground weighting used by feature distillation."""
    if variant == "dense":
        return np.ones((grid.H, grid.W))
    if variant == "gt":
        return rasterize_foreground(boxes, grid)
    if variant == "gaussian":
        return gaussian_heatmap(boxes, grid, classes).max(axis=0, initial=0.0)
    if variant == "scaling":
        return scaled_mask(boxes, grid, params)
    raise ValueError(f"unknown mask variant {variant!r}; expected one of {MASK_VARIANTS}")

