"""Sliding-window crop planning for the export side.

This module derives window origins on its own rather than importing the
engine's planner, so the two sides act as independent routes to the same
layout; the engine re-plans and cross-checks origins on every bundle load,
which turns any drift into an immediate load failure.
"""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ExporterError


@dataclass(frozen=True)
class WindowPlan:
    """Crop geometry for one image: square windows on a patch-aligned grid."""

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
    def tokens_per_window(self) -> int:
        side = self.window // self.patch
        return side * side


def axis_origins(length: int, window: int, stride: int) -> list[int]:
    """Origins along one axis: march by stride, clamp the last step flush.

    The walk emits 0, then keeps adding the stride until an origin reaches
    ``length - window``; an overshooting final step is pulled back so the
    last window ends exactly at the image edge.
    """
    limit = length - window
    out = [0]
    while out[-1] < limit:
        out.append(min(out[-1] + stride, limit))
    return out


def plan_crops(h: int, w: int, window: int, stride: int, patch: int) -> WindowPlan:
    """Row-major window plan over an ``h`` x ``w`` image."""
    if patch < 1:
        raise ExporterError(f"patch must be positive, got {patch}")
    if window > min(h, w):
        raise ExporterError(f"window {window} exceeds image side min({h}, {w})")
    if not 0 < stride <= window:
        raise ExporterError(f"stride {stride} must lie in (0, window {window}]")
    if window % patch or stride % patch:
        raise ExporterError(
            f"window {window} and stride {stride} must be multiples of patch {patch}"
        )
    if h % patch or w % patch:
        raise ExporterError(f"image {h} x {w} is not patch-aligned to {patch}")
    ys = axis_origins(h, window, stride)
    xs = axis_origins(w, window, stride)
    origins = tuple((y, x) for y in ys for x in xs)
    return WindowPlan(h, w, window, stride, patch, origins)
