"""Sliding-window planning and feature/score splicing.

Windows are planned in pixel space and spliced on the patch grid, so image
dims, stride, and window side must all be patch multiples; edge windows are
clamped (never padded) so no synthetic pixels enter the feature extractor.
Overlap is resolved by unweighted mean, with an optional hard-label voting
mode living upstream in the pipeline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, TridentError, ValidationError
from .numerics import as_f32


@dataclass(frozen=True)
class WindowLayout:
    """The sliding-window plan for one image."""

    image_h: int
    image_w: int
    window: int
    stride: int
    patch: int
    origins: tuple[tuple[int, int], ...]  # (y0, x0) pixels, row-major

    @property
    def num_windows(self) -> int:
        return len(self.origins)

    @property
    def window_patches(self) -> int:
        return self.window // self.patch

    @property
    def tokens_per_window(self) -> int:
        return self.window_patches ** 2

    @property
    def grid_hw(self) -> tuple[int, int]:
        """Global patch-grid size (rows, cols)."""
        return self.image_h // self.patch, self.image_w // self.patch


@dataclass(frozen=True)
class FeatureMap:
    """Dense grid of d-dimensional patch embeddings."""

    data: np.ndarray  # H x W x d float32

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"feature map must be H x W x d, got {self.data.shape}")

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


def _axis_origins(length: int, window: int, stride: int) -> list[int]:
    n = math.ceil((length - window) / stride) + 1
    return [min(i * stride, length - window) for i in range(n)]


def plan_windows(h_img: int, w_img: int, window: int, stride: int, patch: int) -> WindowLayout:
    """Plan row-major window origins covering the whole image.

    Per axis the count is ceil((axis - window) / stride) + 1 and the last
    origin is clamped to axis - window.
    """
    if window > min(h_img, w_img):
        raise ConfigError(
            f"window {window} exceeds image side min({h_img}, {w_img}); "
            "resize the shorter side to at least the window size first"
        )
    if not (0 < stride <= window):
        raise ConfigError(f"stride must satisfy 0 < stride <= window, got {stride}")
    if patch < 1 or window % patch != 0:
        raise ConfigError(f"window {window} must be a positive multiple of patch {patch}")
    # splicing is defined on the patch grid, so origins must land on it
    if stride % patch != 0:
        raise ConfigError(f"stride {stride} must be a multiple of patch {patch}")
    if h_img % patch != 0 or w_img % patch != 0:
        raise ConfigError(
            f"image {h_img}x{w_img} must be patch-aligned (patch {patch}); "
            "use resize_shorter_side to produce aligned dims"
        )
    ys = _axis_origins(h_img, window, stride)
    xs = _axis_origins(w_img, window, stride)
    origins = tuple((y, x) for y in ys for x in xs)

    covered_y = np.zeros(h_img, dtype=bool)
    covered_x = np.zeros(w_img, dtype=bool)
    for y in ys:
        covered_y[y:y + window] = True
    for x in xs:
        covered_x[x:x + window] = True
    if not (covered_y.all() and covered_x.all()):
        raise TridentError("internal: planned windows do not cover the image")
    return WindowLayout(h_img, w_img, window, stride, patch, origins)


def resize_shorter_side(h: int, w: int, target: int, patch: int = 16) -> tuple[int, int]:
    """Target size after scaling the shorter side to ``target``.

    The longer side keeps the aspect ratio, rounded to the nearest patch
    multiple (half up) and never below the target.
    """
    if target < 1:
        raise ConfigError("target must be >= 1")
    if h <= w:
        scaled = w * target / h
        other = max(int(math.floor(scaled / patch + 0.5)) * patch, target)
        return target, other
    scaled = h * target / w
    other = max(int(math.floor(scaled / patch + 0.5)) * patch, target)
    return other, target


def _splice(maps: list[np.ndarray], layout: WindowLayout) -> np.ndarray:
    """Accumulate per-window grids onto the global patch grid, mean on overlap.

    Accumulation runs in float64 in fixed row-major window order, so results
    are deterministic and independent of window permutation.
    """
    if len(maps) != layout.num_windows:
        raise ShapeError(
            f"got {len(maps)} window maps for a {layout.num_windows}-window layout"
        )
    gh, gw = layout.grid_hw
    wp = layout.window_patches
    channels = maps[0].shape[2]
    acc = np.zeros((gh, gw, channels), dtype=np.float64)
    count = np.zeros((gh, gw), dtype=np.int64)
    for m, (y0, x0) in zip(maps, layout.origins):
        if m.shape != (wp, wp, channels):
            raise ShapeError(
                f"window map shape {m.shape} != expected ({wp}, {wp}, {channels})"
            )
        py, px = y0 // layout.patch, x0 // layout.patch
        acc[py:py + wp, px:px + wp] += m
        count[py:py + wp, px:px + wp] += 1
    if (count == 0).any():
        raise TridentError("internal: coverage hole while splicing")
    return (acc / count[:, :, None]).astype(np.float32)


def splice_features(window_maps: list[FeatureMap], layout: WindowLayout) -> FeatureMap:
    """Stitch per-window feature grids into one integral feature map."""
    arrays = [as_f32(fm.data, f"window feature map {i}") for i, fm in enumerate(window_maps)]
    return FeatureMap(_splice(arrays, layout))


def splice_scores(window_scores: list[np.ndarray], layout: WindowLayout) -> np.ndarray:
    """Stitch per-window class-score grids; any label map is argmaxed after."""
    arrays = [as_f32(s, f"window score map {i}") for i, s in enumerate(window_scores)]
    return _splice(arrays, layout)
