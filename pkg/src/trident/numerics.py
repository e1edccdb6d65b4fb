"""Dense float32 kernels shared by every stage of the engine.

All operations are pure functions over numpy arrays. Inputs are validated
once at the boundary (finite, float32, rank/dim constraints) and the heavy
lifting is plain vectorized numpy.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError, ValidationError

# Rows with a smaller Euclidean norm than this normalize to all-zero
# instead of blowing up.
NORM_FLOOR = 1e-12


def as_f32(a, name: str = "tensor") -> np.ndarray:
    """Validate and convert to a contiguous float32 array.

    Rejects rank-0 arrays, zero-length axes, and non-finite values.
    """
    arr = np.asarray(a, dtype=np.float32)
    if arr.ndim < 1:
        raise ShapeError(f"{name}: rank must be >= 1")
    if any(s < 1 for s in arr.shape):
        raise ShapeError(f"{name}: every dim must be >= 1, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name}: contains NaN or Inf")
    return np.ascontiguousarray(arr)


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    """Scale each row to unit Euclidean norm; near-zero rows become all-zero."""
    m = as_f32(m, "l2_normalize_rows input")
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    norms = np.sqrt(np.einsum("ij,ij->i", m.astype(np.float64), m.astype(np.float64)))
    safe = np.where(norms < NORM_FLOOR, 1.0, norms)
    out = m / safe[:, None].astype(np.float32)
    out[norms < NORM_FLOOR] = 0.0
    return out.astype(np.float32)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity: entry (i, j) = cos(a_i, b_j).

    Rows of either operand with near-zero norm produce zero entries.
    """
    a = as_f32(a, "cosine lhs")
    b = as_f32(b, "cosine rhs")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("cosine_matrix expects two matrices")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"inner dim mismatch: lhs {a.shape} vs rhs {b.shape}"
        )
    return l2_normalize_rows(a) @ l2_normalize_rows(b).T


def masked_softmax_rows(s: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Row softmax restricted to kept entries; masked entries are exactly 0.

    The per-row max is taken over kept entries only, so masked values never
    enter the arithmetic and cannot produce NaN. A fully masked row is an
    error: silently emitting a uniform row would hide an upstream bug.
    """
    s = as_f32(s, "masked_softmax input")
    keep = np.asarray(keep, dtype=bool)
    if s.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {s.shape}")
    if keep.shape != s.shape:
        raise ShapeError(f"mask shape {keep.shape} != scores shape {s.shape}")
    kept_per_row = keep.sum(axis=1)
    if (kept_per_row == 0).any():
        bad = int(np.argmax(kept_per_row == 0))
        raise ValidationError(f"row {bad} is fully masked")
    s64 = s.astype(np.float64)
    row_max = np.max(s64, axis=1, where=keep, initial=-np.inf)
    shifted = np.where(keep, s64 - row_max[:, None], -np.inf)
    z = np.exp(shifted)
    out = z / z.sum(axis=1, keepdims=True)
    return out.astype(np.float32)


def softmax_rows(s: np.ndarray) -> np.ndarray:
    """Unmasked stable row softmax (float64 internally, float32 out)."""
    s64 = as_f32(s, "softmax input").astype(np.float64)
    z = np.exp(s64 - s64.max(axis=-1, keepdims=True))
    return (z / z.sum(axis=-1, keepdims=True)).astype(np.float32)


def bilinear_resize(t: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Per-channel bilinear resample with half-pixel centers.

    Accepts (H, W) or (H, W, C). The sampling convention is
    src = (dst + 0.5) * in/out - 0.5 with coordinates clamped to the valid
    range (align-corners false). Matching output size returns a copy of the
    input unchanged.
    """
    t = as_f32(t, "resize input")
    if t.ndim == 2:
        return bilinear_resize(t[:, :, None], out_h, out_w)[:, :, 0]
    if t.ndim != 3:
        raise ShapeError(f"expected H x W x C, got shape {t.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be positive, got {out_h}x{out_w}")
    h, w, _ = t.shape
    if (out_h, out_w) == (h, w):
        return t.copy()

    ys = np.clip((np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]

    t64 = t.astype(np.float64)
    top = t64[y0][:, x0] * (1.0 - wx) + t64[y0][:, x1] * wx
    bot = t64[y1][:, x0] * (1.0 - wx) + t64[y1][:, x1] * wx
    return (top * (1.0 - wy) + bot * wy).astype(np.float32)
