"""On-disk interchange: TRDT tensor files, bundle manifests, segmentation output.

The TRDT container is the bit-exact boundary between the model exporter and
this engine. Layout (all little-endian):

    magic   4 bytes  b"TRDT"
    version u16      currently 1
    dtype   u8       0 = float32 little-endian (the only code in v1)
    rank    u8       >= 1
    dims    rank x u64
    payload row-major float32, 4 * prod(dims) bytes

A bundle is a directory holding ``manifest.json`` plus the tensor files it
names. ``load_bundle`` cross-checks every shape before anything downstream
runs, so later stages never see an inconsistent bundle.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BundleError, ShapeError, ValidationError
from .numerics import as_f32
from .tiling import WindowLayout, plan_windows

MAGIC = b"TRDT"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sHBB")


def write_tensor(t: np.ndarray, path) -> None:
    """Serialize a float32 array to a TRDT file (bit-exact round trip)."""
    t = as_f32(t, str(path))
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, DTYPE_F32, t.ndim))
        f.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        f.write(t.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Read a TRDT file back into a float32 array, validating the container."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{path}: truncated header")
    magic, version, dtype, rank = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise ValidationError(f"{path}: unsupported dtype code {dtype}")
    if rank < 1:
        raise ShapeError(f"{path}: rank must be >= 1")
    dims_end = _HEADER.size + 8 * rank
    if len(raw) < dims_end:
        raise ValidationError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}Q", raw, _HEADER.size)
    if any(d < 1 for d in dims):
        raise ShapeError(f"{path}: every dim must be >= 1, got {dims}")
    count = int(np.prod(dims))
    expected = dims_end + 4 * count
    if len(raw) != expected:
        raise ValidationError(
            f"{path}: payload length {len(raw) - dims_end} != {4 * count}"
        )
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=dims_end)
    arr = data.reshape(dims).copy()
    if not np.isfinite(arr).all():
        raise ValidationError(f"{path}: payload contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class ClassVocabulary:
    """Ordered class names; background, when present, sits at index 0."""

    names: tuple[str, ...]
    background_index: int | None = None

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValidationError("class names must be unique")
        if self.background_index is not None and self.background_index != 0:
            raise ValidationError("background index must be 0 when present")

    def __len__(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class WindowTensors:
    index: int
    origin: tuple[int, int]  # (y0, x0) pixels
    values: np.ndarray       # n_w x d_v
    dino: np.ndarray | None  # n_w x d_dino


@dataclass
class Bundle:
    """Fully validated in-memory view of an exported bundle directory."""

    path: Path
    image_hw: tuple[int, int]
    layout: WindowLayout
    windows: list[WindowTensors]
    projection: np.ndarray                 # d_v x d_text
    text_embeddings: np.ndarray            # c x d_text
    vocabulary: ClassVocabulary
    sam_features: np.ndarray | None = None  # n_s x d_sam
    sam_attention: np.ndarray | None = None  # n_s x n_s
    sam_grid: tuple[int, int] | None = None  # (h_s, w_s)
    ground_truth: Path | None = None
    image_ref: str | None = None
    seed: int | None = None

    @property
    def num_windows(self) -> int:
        return len(self.windows)

    @property
    def num_classes(self) -> int:
        return len(self.vocabulary)


def _require(manifest: dict, key: str, path: Path):
    if key not in manifest:
        raise BundleError(f"{path}: manifest missing field '{key}'")
    return manifest[key]


def _load_named_tensor(bundle_dir: Path, rel: str, field_name: str) -> np.ndarray:
    p = bundle_dir / rel
    if not p.exists():
        raise BundleError(f"missing tensor for '{field_name}': {p}")
    try:
        return read_tensor(p)
    except (ValidationError, ShapeError) as e:
        raise BundleError(f"invalid tensor for '{field_name}': {e}") from e


def load_bundle(path) -> Bundle:
    """Load and cross-validate a bundle directory.

    Every shape constraint is enforced here: window count against the
    layout plan, token counts against the window geometry, projection and
    text-embedding agreement, and the SAM grid product.
    """
    bundle_dir = Path(path)
    manifest_path = bundle_dir / "manifest.json"
    if not manifest_path.exists():
        raise BundleError(f"{bundle_dir}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())

    image = _require(manifest, "image", manifest_path)
    h_img, w_img = int(image["height"]), int(image["width"])
    lay = _require(manifest, "layout", manifest_path)
    layout = plan_windows(
        h_img, w_img, int(lay["window"]), int(lay["stride"]), int(lay["patch"])
    )

    entries = _require(manifest, "windows", manifest_path)
    if len(entries) != layout.num_windows:
        raise BundleError(
            f"manifest lists {len(entries)} windows but layout plans "
            f"{layout.num_windows}"
        )
    n_w = layout.tokens_per_window
    windows: list[WindowTensors] = []
    d_v = None
    for pos, entry in enumerate(entries):
        idx = int(entry.get("index", pos))
        if idx != pos:
            raise BundleError(f"window entries out of order at position {pos}")
        origin = (int(entry["y0"]), int(entry["x0"]))
        if origin != layout.origins[pos]:
            raise BundleError(
                f"window {pos} origin {origin} != planned {layout.origins[pos]}"
            )
        values = _load_named_tensor(bundle_dir, entry["values"], f"windows[{pos}].values")
        if values.ndim != 2 or values.shape[0] != n_w:
            raise BundleError(
                f"windows[{pos}].values: expected {n_w} tokens, got shape {values.shape}"
            )
        if d_v is None:
            d_v = values.shape[1]
        elif values.shape[1] != d_v:
            raise BundleError(f"windows[{pos}].values: dim {values.shape[1]} != {d_v}")
        dino = None
        if entry.get("dino"):
            dino = _load_named_tensor(bundle_dir, entry["dino"], f"windows[{pos}].dino")
            if dino.ndim != 2 or dino.shape[0] != n_w:
                raise BundleError(
                    f"windows[{pos}].dino: expected {n_w} tokens, got shape {dino.shape}"
                )
        windows.append(WindowTensors(idx, origin, values, dino))

    projection = _load_named_tensor(bundle_dir, _require(manifest, "projection", manifest_path), "projection")
    if projection.ndim != 2 or projection.shape[0] != d_v:
        raise BundleError(
            f"projection: expected {d_v} x d_text, got shape {projection.shape}"
        )
    d_text = projection.shape[1]

    text = _load_named_tensor(bundle_dir, _require(manifest, "text_embeddings", manifest_path), "text_embeddings")
    names = _require(manifest, "classes", manifest_path)
    if text.ndim != 2 or text.shape[0] != len(names):
        raise BundleError(
            f"text_embeddings: expected {len(names)} x d_text, got shape {text.shape}"
        )
    if text.shape[1] != d_text:
        raise BundleError(
            f"text_embeddings dim {text.shape[1]} != projection output dim {d_text}"
        )
    vocabulary = ClassVocabulary(
        tuple(names), manifest.get("background_index")
    )

    sam_features = sam_attention = None
    sam_grid = None
    sam = manifest.get("sam")
    if sam:
        gh, gw = (int(x) for x in sam["grid"])
        sam_grid = (gh, gw)
        n_s = gh * gw
        if sam.get("features"):
            sam_features = _load_named_tensor(bundle_dir, sam["features"], "sam.features")
            if sam_features.ndim != 2 or sam_features.shape[0] != n_s:
                raise BundleError(
                    f"sam.features: expected {n_s} rows for grid {sam_grid}, "
                    f"got shape {sam_features.shape}"
                )
        if sam.get("attention"):
            sam_attention = _load_named_tensor(bundle_dir, sam["attention"], "sam.attention")
            if sam_attention.shape != (n_s, n_s):
                raise BundleError(
                    f"sam.attention: expected {n_s} x {n_s}, got shape {sam_attention.shape}"
                )

    gt = manifest.get("ground_truth")
    gt_path = None
    if gt:
        gt_path = bundle_dir / gt
        if not gt_path.exists():
            raise BundleError(f"missing ground truth file: {gt_path}")

    return Bundle(
        path=bundle_dir,
        image_hw=(h_img, w_img),
        layout=layout,
        windows=windows,
        projection=projection,
        text_embeddings=text,
        vocabulary=vocabulary,
        sam_features=sam_features,
        sam_attention=sam_attention,
        sam_grid=sam_grid,
        ground_truth=gt_path,
        image_ref=image.get("path") or str(bundle_dir),
        seed=manifest.get("seed"),
    )


def default_palette(n: int) -> list[tuple[int, int, int]]:
    """Deterministic n-entry palette via bit-interleaved channel codes."""
    out = []
    for k in range(n):
        r = g = b = 0
        c = k
        for shift in range(8):
            r |= ((c >> 0) & 1) << (7 - shift)
            g |= ((c >> 1) & 1) << (7 - shift)
            b |= ((c >> 2) & 1) << (7 - shift)
            c >>= 3
        out.append((r, g, b))
    return out


def write_segmentation(labels: np.ndarray, palette, path) -> None:
    """Write a label map as an indexed-color PNG (one palette entry per class)."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError(f"label map must be 2-D, got shape {labels.shape}")
    n_classes = int(labels.max()) + 1 if labels.size else 0
    if len(palette) < n_classes:
        raise ValidationError(
            f"palette has {len(palette)} entries but map uses {n_classes} classes"
        )
    if n_classes > 256:
        raise ValidationError("indexed PNG supports at most 256 classes")
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    flat = []
    for rgb in palette[:256]:
        flat.extend(rgb)
    img.putpalette(flat)
    img.save(path, format="PNG")


def read_label_png(path) -> np.ndarray:
    """Read a palette or grayscale PNG back into an int32 label map."""
    img = Image.open(path)
    if img.mode not in ("P", "L"):
        img = img.convert("L")
    return np.asarray(img, dtype=np.int32)
