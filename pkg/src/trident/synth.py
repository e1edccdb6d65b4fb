"""Synthetic bundle generator with controllable window ambiguity.

Scenes are rectangles of orthogonal class prototypes painted over a
background canvas (class 0). The generator plants a known failure mode of
window-local classification: when a rectangle is clipped by a window, that
window's value tokens for the rectangle are blended toward the window's
mean feature by ``sigma_amb``. A window that sees the whole rectangle keeps
pure prototypes. Guidance (DINO) tokens stay unblended, and the dense-grid
features are exact prototypes, so affinity-based global aggregation can
recover what the clipped windows lost.

All randomness flows from the spec's seed; regenerating a spec yields
byte-identical bundle files.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ValidationError
from .interchange import Bundle, default_palette, load_bundle, write_segmentation, write_tensor
from .numerics import cosine_matrix, softmax_rows
from .tiling import WindowLayout, plan_windows


@dataclass(frozen=True)
class SceneSpec:
    """A labeled-rectangle scene plus feature-generation knobs.

    Rectangles are (class_index, y0, x0, y1, x1) with half-open bounds,
    painted in order over the class-0 canvas.
    """

    height: int
    width: int
    class_names: tuple[str, ...]
    rectangles: tuple[tuple[int, int, int, int, int], ...] = ()
    proto_dim: int | None = None
    sigma_amb: float = 0.0
    dino_noise: float = 0.02
    seed: int = 0
    sam_grid: tuple[int, int] | None = None

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"bad scene size {self.height}x{self.width}")
        if not self.class_names:
            raise ConfigError("need at least one class")
        if len(set(self.class_names)) != len(self.class_names):
            raise ConfigError("class names must be unique")
        if not 0.0 <= self.sigma_amb <= 1.0:
            raise ConfigError(f"sigma_amb must lie in [0, 1], got {self.sigma_amb}")
        if self.dino_noise < 0:
            raise ConfigError("dino_noise must be nonnegative")
        if self.proto_dim is not None and self.proto_dim < len(self.class_names):
            raise ConfigError(
                f"prototype dim {self.proto_dim} cannot hold "
                f"{len(self.class_names)} orthogonal prototypes"
            )
        for rect in self.rectangles:
            k, y0, x0, y1, x1 = rect
            if not 0 <= k < len(self.class_names):
                raise ConfigError(f"rectangle class {k} out of range")
            if not (0 <= y0 < y1 <= self.height and 0 <= x0 < x1 <= self.width):
                raise ConfigError(f"rectangle {rect} outside the {self.height}x{self.width} scene")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def dim(self) -> int:
        return self.proto_dim or len(self.class_names)


def prototypes(spec: SceneSpec) -> np.ndarray:
    """One orthonormal basis vector per class."""
    return np.eye(spec.num_classes, spec.dim, dtype=np.float32)


def paint_labels(spec: SceneSpec) -> np.ndarray:
    labels = np.zeros((spec.height, spec.width), dtype=np.int64)
    for k, y0, x0, y1, x1 in spec.rectangles:
        labels[y0:y1, x0:x1] = k
    return labels


def _paint_rect_index(spec: SceneSpec) -> np.ndarray:
    """Which rectangle (-1 = canvas) owns each pixel, last paint wins."""
    owner = np.full((spec.height, spec.width), -1, dtype=np.int64)
    for i, (_, y0, x0, y1, x1) in enumerate(spec.rectangles):
        owner[y0:y1, x0:x1] = i
    return owner


def _window_mean(labels: np.ndarray, protos: np.ndarray, y0: int, x0: int, window: int) -> np.ndarray:
    """Area-weighted mean prototype of everything the window sees."""
    view = labels[y0 : y0 + window, x0 : x0 + window]
    counts = np.bincount(view.reshape(-1), minlength=protos.shape[0]).astype(np.float64)
    weights = counts / counts.sum()
    return (weights[None, :] @ protos.astype(np.float64))[0].astype(np.float32)


def _clipped_rects(spec: SceneSpec, y0: int, x0: int, window: int) -> set[int]:
    """Indices of rectangles only partially visible through this window."""
    out = set()
    for i, (_, ry0, rx0, ry1, rx1) in enumerate(spec.rectangles):
        iy = max(0, min(ry1, y0 + window) - max(ry0, y0))
        ix = max(0, min(rx1, x0 + window) - max(rx0, x0))
        visible = iy * ix
        if 0 < visible < (ry1 - ry0) * (rx1 - rx0):
            out.add(i)
    return out


def generate_bundle(spec: SceneSpec, layout: WindowLayout, out_dir: str | Path) -> Bundle:
    """Write a complete bundle (tensors, manifest, ground truth) and load it back."""
    if (layout.image_h, layout.image_w) != (spec.height, spec.width):
        raise ValidationError(
            f"layout is for {layout.image_h}x{layout.image_w}, scene is "
            f"{spec.height}x{spec.width}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    protos = prototypes(spec)
    labels = paint_labels(spec)
    owner = _paint_rect_index(spec)
    patch, wp = layout.patch, layout.window_patches

    windows = []
    for i, (y0, x0) in enumerate(layout.origins):
        mean_feat = _window_mean(labels, protos, y0, x0, layout.window)
        clipped = _clipped_rects(spec, y0, x0, layout.window)
        values = np.zeros((wp * wp, spec.dim), dtype=np.float32)
        dino = np.zeros_like(values)
        for t in range(wp * wp):
            cy = y0 + (t // wp) * patch + patch // 2
            cx = x0 + (t % wp) * patch + patch // 2
            k = labels[cy, cx]
            pure = protos[k]
            if owner[cy, cx] in clipped:
                values[t] = (1.0 - spec.sigma_amb) * pure + spec.sigma_amb * mean_feat
            else:
                values[t] = pure
            dino[t] = pure
        dino += rng.normal(0.0, spec.dino_noise, dino.shape).astype(np.float32)
        vname = f"win{i:03d}_values.trdt"
        dname = f"win{i:03d}_dino.trdt"
        write_tensor(values, out / vname)
        write_tensor(dino, out / dname)
        windows.append({"index": i, "y0": y0, "x0": x0, "values": vname, "dino": dname})

    gh, gw = spec.sam_grid or layout.grid_hw
    cells = np.zeros((gh * gw, spec.dim), dtype=np.float32)
    for cy in range(gh):
        for cx in range(gw):
            py = min(int((cy + 0.5) * spec.height / gh), spec.height - 1)
            px = min(int((cx + 0.5) * spec.width / gw), spec.width - 1)
            cells[cy * gw + cx] = protos[labels[py, px]]
    write_tensor(cells, out / "sam_features.trdt")
    write_tensor(softmax_rows(cosine_matrix(cells, cells)), out / "sam_attention.trdt")

    write_tensor(np.eye(spec.dim, dtype=np.float32), out / "projection.trdt")
    write_tensor(protos, out / "text_embeddings.trdt")
    write_segmentation(labels, default_palette(spec.num_classes), out / "gt.png")

    manifest = {
        "format": "trident-bundle",
        "version": 1,
        "image": {"height": spec.height, "width": spec.width},
        "layout": {"window": layout.window, "stride": layout.stride, "patch": patch},
        "windows": windows,
        "projection": "projection.trdt",
        "text_embeddings": "text_embeddings.trdt",
        "classes": list(spec.class_names),
        "background_index": 0,
        "sam": {
            "grid": [gh, gw],
            "features": "sam_features.trdt",
            "attention": "sam_attention.trdt",
        },
        "ground_truth": "gt.png",
        "seed": spec.seed,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return load_bundle(out)


def contrast_scene(sigma_amb: float = 0.9, seed: int = 7) -> tuple[SceneSpec, WindowLayout]:
    """The seam-contrast fixture: one object straddling every window seam.

    448x448 canvas, 336 px windows at stride 224 (origins clamp to 0/112),
    object rectangle [64, 272) on both axes: window (0, 0) sees it whole,
    the other three windows clip it. With sigma_amb high, only the clean
    window keeps recognizable object features.
    """
    spec = SceneSpec(
        height=448,
        width=448,
        class_names=("background", "object"),
        rectangles=((1, 64, 64, 272, 272),),
        sigma_amb=sigma_amb,
        seed=seed,
    )
    return spec, plan_windows(448, 448, 336, 224, 16)
