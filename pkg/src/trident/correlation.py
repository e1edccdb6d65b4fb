"""Correlation and affinity matrices for feature aggregation.

Three flavors of row-stochastic aggregation weights over a token grid:

* cosine: thresholded cosine self-similarity pushed through a masked
  softmax — works window-locally (DINO-guided sub-image features) and
  globally (the dense-encoder feature grid).
* attention: head-averaged encoder attention, row-renormalized.
* affinity: attention weights kept only where the feature cosine clears a
  threshold, then L1-renormalized per row. The threshold suppresses
  attention mass on tokens that are feature-dissimilar (likely background)
  while keeping the surviving weights in their original proportions.

The self-entry of every row is always kept: a token is maximally similar to
itself, so no row can end up fully masked for any threshold <= 1.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError
from .numerics import as_f32, cosine_matrix, masked_softmax_rows
from .tiling import FeatureMap

log = logging.getLogger(__name__)

CORRELATION_KINDS = ("identity", "cosine-softmax", "attention", "affinity")

ROW_SUM_TOL = 1e-5
ATTENTION_TOL = 1e-3


@dataclass(frozen=True)
class AffinityConfig:
    """Knobs for correlation-matrix construction."""

    kind: str = "affinity"
    epsilon: float = 0.0
    head_reduction: str = "mean"

    def __post_init__(self):
        if self.kind not in CORRELATION_KINDS:
            raise ConfigError(
                f"unknown correlation kind '{self.kind}'; valid: {CORRELATION_KINDS}"
            )
        if not -1.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [-1, 1], got {self.epsilon}")
        if self.head_reduction != "mean":
            raise ConfigError(f"unsupported head reduction '{self.head_reduction}'")


@dataclass(frozen=True)
class CorrelationMatrix:
    """n x n row-stochastic aggregation weights over an (h, w) token grid."""

    matrix: np.ndarray
    kind: str
    grid_hw: tuple[int, int]

    def __post_init__(self):
        n = self.grid_hw[0] * self.grid_hw[1]
        if self.matrix.shape != (n, n):
            raise ShapeError(
                f"matrix shape {self.matrix.shape} != ({n}, {n}) for grid {self.grid_hw}"
            )
        if self.kind not in CORRELATION_KINDS:
            raise ConfigError(f"unknown correlation kind '{self.kind}'")
        if (self.matrix < 0).any():
            raise ValidationError("correlation matrix must be nonnegative")
        sums = self.matrix.sum(axis=1, dtype=np.float64)
        if not np.allclose(sums, 1.0, atol=ROW_SUM_TOL):
            worst = float(np.abs(sums - 1.0).max())
            raise ValidationError(f"rows must sum to 1 within {ROW_SUM_TOL}, off by {worst}")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def identity_correlation(grid_hw: tuple[int, int]) -> CorrelationMatrix:
    n = grid_hw[0] * grid_hw[1]
    return CorrelationMatrix(np.eye(n, dtype=np.float32), "identity", grid_hw)


def _threshold_mask(c: np.ndarray, epsilon: float) -> np.ndarray:
    keep = c >= epsilon
    np.fill_diagonal(keep, True)  # self-similarity is 1 by definition
    return keep


def proxy_window_correlation(dino_tokens: np.ndarray, epsilon: float = 0.0) -> CorrelationMatrix:
    """Window-local cosine correlation from guidance tokens.

    Cosine self-similarity, entries below ``epsilon`` masked out, masked row
    softmax. The token count must be a square (tokens cover a square window).
    """
    t = as_f32(dino_tokens, "guidance tokens")
    if t.ndim != 2:
        raise ShapeError(f"tokens must be n x d, got {t.shape}")
    side = int(round(np.sqrt(t.shape[0])))
    if side * side != t.shape[0]:
        raise ShapeError(f"token count {t.shape[0]} is not a square grid")
    c = cosine_matrix(t, t)
    a = masked_softmax_rows(c, _threshold_mask(c, epsilon))
    return CorrelationMatrix(a, "cosine-softmax", (side, side))


def sam_cosine_affinity(features: np.ndarray, epsilon: float, grid_hw: tuple[int, int]) -> CorrelationMatrix:
    """Global cosine correlation over dense-encoder features."""
    f = as_f32(features, "encoder features")
    n = grid_hw[0] * grid_hw[1]
    if f.ndim != 2 or f.shape[0] != n:
        raise ShapeError(f"features shape {f.shape} != ({n}, d) for grid {grid_hw}")
    c = cosine_matrix(f, f)
    a = masked_softmax_rows(c, _threshold_mask(c, epsilon))
    return CorrelationMatrix(a, "cosine-softmax", grid_hw)


def reduce_attention_heads(w: np.ndarray) -> np.ndarray:
    """Average per-head attention to a single n x n matrix.

    Heads whose rows do not sum to 1 within tolerance are renormalized
    first (with a warning) so one bad head cannot skew the mean.
    """
    w = as_f32(w, "attention heads")
    if w.ndim == 2:
        w = w[None]
    if w.ndim != 3 or w.shape[1] != w.shape[2]:
        raise ShapeError(f"expected heads x n x n, got {w.shape}")
    if (w < 0).any():
        raise ValidationError("attention weights must be nonnegative")
    sums = w.sum(axis=2, dtype=np.float64)
    if not np.allclose(sums, 1.0, atol=ATTENTION_TOL):
        bad = int((~np.isclose(sums, 1.0, atol=ATTENTION_TOL)).any(axis=1).sum())
        log.warning("renormalizing %d attention head(s) with non-stochastic rows", bad)
        w = (w / sums[:, :, None]).astype(np.float32)
    return w.mean(axis=0, dtype=np.float64).astype(np.float32)


def attention_correlation(w: np.ndarray, grid_hw: tuple[int, int]) -> CorrelationMatrix:
    """Raw (head-reduced) attention as the aggregation matrix, rows renormalized."""
    w = as_f32(w, "attention")
    if (w < 0).any():
        raise ValidationError("attention weights must be nonnegative")
    sums = w.sum(axis=1, dtype=np.float64)
    if (sums <= 0).any():
        raise ValidationError("attention has an all-zero row")
    a = (w / sums[:, None]).astype(np.float32)
    return CorrelationMatrix(a, "attention", grid_hw)


def hybrid_affinity(
    w: np.ndarray, c: np.ndarray, epsilon: float, grid_hw: tuple[int, int]
) -> CorrelationMatrix:
    """Attention weights gated by feature cosine, L1-renormalized per row.

    Entry (i, j) keeps W_ij when C_ij >= epsilon and is zeroed otherwise;
    each surviving row is divided by its sum, restoring convex-combination
    semantics. A row whose surviving weights are all zero falls back to a
    self-indicator row (logged) rather than failing.
    """
    w = as_f32(w, "attention")
    c = as_f32(c, "cosine correlation")
    n = grid_hw[0] * grid_hw[1]
    if w.shape != (n, n) or c.shape != (n, n):
        raise ShapeError(
            f"attention {w.shape} and cosine {c.shape} must both be ({n}, {n})"
        )
    if (w < 0).any():
        raise ValidationError("attention weights must be nonnegative")
    w_sums = w.sum(axis=1, dtype=np.float64)
    if not np.allclose(w_sums, 1.0, atol=ATTENTION_TOL):
        raise ValidationError(
            f"attention rows must sum to 1 within {ATTENTION_TOL} before gating"
        )
    if not np.allclose(np.diag(c), 1.0, atol=ATTENTION_TOL):
        raise ValidationError("cosine correlation must have a unit diagonal")

    gated = np.where(_threshold_mask(c, epsilon), w.astype(np.float64), 0.0)
    sums = gated.sum(axis=1)
    dead = sums <= 0.0
    if dead.any():
        log.warning(
            "%d affinity row(s) lost all weight after gating; using self-indicator",
            int(dead.sum()),
        )
        idx = np.flatnonzero(dead)
        gated[idx] = 0.0
        gated[idx, idx] = 1.0
        sums[idx] = 1.0
    a = (gated / sums[:, None]).astype(np.float32)
    return CorrelationMatrix(a, "affinity", grid_hw)


def window_features(
    values: np.ndarray, a: CorrelationMatrix, projection: np.ndarray
) -> FeatureMap:
    """Aggregate window value tokens and project them to the text space.

    Computes (A @ V) @ P and reshapes to the window's patch grid.
    """
    v = as_f32(values, "window values")
    p = as_f32(projection, "projection")
    if v.ndim != 2 or p.ndim != 2:
        raise ShapeError("values and projection must be matrices")
    if a.n != v.shape[0]:
        raise ShapeError(f"correlation is {a.n} tokens but values has {v.shape[0]}")
    if v.shape[1] != p.shape[0]:
        raise ShapeError(
            f"values dim {v.shape[1]} != projection input dim {p.shape[0]}"
        )
    out = (a.matrix @ v) @ p
    h, w = a.grid_hw
    return FeatureMap(out.reshape(h, w, p.shape[1]))
