"""Promptable-decoder refinement of a segmentation.

Per class: binarize the label map, split into connected regions, turn each
region into (point, box, mask) prompts, ask a decoder backend for a score
grid per region, take the pixelwise max over regions, and multiply by the
class confidence plane. Fusing the refined planes by argmax yields the
final map.

Decoder backends speak one of two dialects of the same contract: the
in-process stub echoes its mask prompt (clamped), and the subprocess client
exchanges line-delimited JSON with mask tensors passed by file reference.
A decoder failure never kills the run; the affected class keeps its
unrefined confidence plane and the fallback is logged.
"""
from __future__ import annotations

import json
import logging
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DecoderError, ShapeError, ValidationError
from .interchange import read_tensor, write_tensor
from .numerics import bilinear_resize
from .pipeline import ClassScoreMap, SegmentationMap

log = logging.getLogger(__name__)

MASK_PROMPT_HW = (256, 256)
FOREGROUND = 1


@dataclass(frozen=True)
class Region:
    """One connected blob of a single class."""

    class_index: int
    pixels: np.ndarray  # (n, 2) int64 rows of (y, x), row-major sorted

    def __post_init__(self):
        if self.pixels.ndim != 2 or self.pixels.shape[1] != 2 or not len(self.pixels):
            raise ValidationError(f"region needs (n, 2) pixel rows, got {self.pixels.shape}")

    @property
    def area(self) -> int:
        return len(self.pixels)

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """(x0, y0, x1, y1), inclusive."""
        ys, xs = self.pixels[:, 0], self.pixels[:, 1]
        return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


@dataclass(frozen=True)
class PromptSet:
    """Point + box + low-res mask for one region."""

    point: tuple[int, int, int]  # (x, y, label)
    box: tuple[int, int, int, int]  # (x0, y0, x1, y1) inclusive
    mask: np.ndarray  # low-res f32 grid

    def __post_init__(self):
        x, y, lab = self.point
        x0, y0, x1, y1 = self.box
        if not (x0 <= x <= x1 and y0 <= y <= y1):
            raise ValidationError(f"point {self.point} outside box {self.box}")
        if lab != FOREGROUND:
            raise ValidationError("point prompts are foreground-labeled")
        if self.mask.ndim != 2:
            raise ShapeError(f"mask prompt must be 2-d, got {self.mask.shape}")


def binarize_class(seg: SegmentationMap | np.ndarray, k: int) -> np.ndarray:
    labels = seg.labels if hasattr(seg, "labels") else np.asarray(seg)
    return (labels == k).astype(np.uint8)


class _UnionFind:
    def __init__(self):
        self.parent = [0]

    def make(self) -> int:
        self.parent.append(len(self.parent))
        return len(self.parent) - 1

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:  # path compression
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def connected_components(b: np.ndarray, connectivity: int = 8, class_index: int = 0) -> list[Region]:
    """Two-pass union-find labeling of a binary map.

    Regions come back ordered by their first pixel in row-major order.
    """
    if connectivity not in (4, 8):
        raise ValidationError(f"connectivity must be 4 or 8, got {connectivity}")
    b = np.asarray(b)
    if b.ndim != 2:
        raise ShapeError(f"binary map must be 2-d, got {b.shape}")
    vals = np.unique(b)
    if not set(vals.tolist()) <= {0, 1, True, False}:
        raise ValidationError("map must be binary")
    h, w = b.shape
    fg = b.astype(bool)
    labels = np.zeros((h, w), dtype=np.int64)
    uf = _UnionFind()
    for y in range(h):
        row = fg[y]
        for x in range(w):
            if not row[x]:
                continue
            hits = []
            if x > 0 and fg[y, x - 1]:
                hits.append(labels[y, x - 1])
            if y > 0:
                if fg[y - 1, x]:
                    hits.append(labels[y - 1, x])
                if connectivity == 8:
                    if x > 0 and fg[y - 1, x - 1]:
                        hits.append(labels[y - 1, x - 1])
                    if x + 1 < w and fg[y - 1, x + 1]:
                        hits.append(labels[y - 1, x + 1])
            if not hits:
                labels[y, x] = uf.make()
            else:
                lo = min(hits)
                labels[y, x] = lo
                for other in hits:
                    uf.union(lo, other)
    buckets: dict[int, list[tuple[int, int]]] = {}
    order: list[int] = []
    for y in range(h):
        for x in range(w):
            if not fg[y, x]:
                continue
            root = uf.find(labels[y, x])
            if root not in buckets:
                buckets[root] = []
                order.append(root)
            buckets[root].append((y, x))
    return [
        Region(class_index, np.array(buckets[root], dtype=np.int64)) for root in order
    ]


def synth_prompts(
    region: Region,
    b_k: np.ndarray,
    m_k: np.ndarray,
    alpha: float = 0.005,
    mask_hw: tuple[int, int] = MASK_PROMPT_HW,
) -> PromptSet:
    """Point at the region's confidence peak, tight box, scaled soft mask.

    The mask is alpha * B_k * M_k over the full image (the class's whole
    binary support, not just this region), then resampled to the decoder's
    mask resolution.
    """
    if alpha <= 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    if b_k.shape != m_k.shape:
        raise ShapeError(f"B_k {b_k.shape} vs M_k {m_k.shape}")
    ys, xs = region.pixels[:, 0], region.pixels[:, 1]
    peak = int(np.argmax(m_k[ys, xs]))  # first max = row-major first
    point = (int(xs[peak]), int(ys[peak]), FOREGROUND)
    full = (alpha * b_k.astype(np.float32) * m_k.astype(np.float32)).astype(np.float32)
    mask = bilinear_resize(full, mask_hw[0], mask_hw[1])
    return PromptSet(point, region.bbox, mask)


class DecoderBackend:
    """Contract: one (image_ref, PromptSet) request -> low-res score grid."""

    def request(self, image_ref: str, prompts: PromptSet) -> np.ndarray:
        raise NotImplementedError

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class StubDecoder(DecoderBackend):
    """Echoes the mask prompt, clamped to [0, 1]. Deterministic by construction."""

    def request(self, image_ref: str, prompts: PromptSet) -> np.ndarray:
        return np.clip(prompts.mask, 0.0, 1.0).astype(np.float32)


class SubprocessDecoder(DecoderBackend):
    """JSON-lines client for an external decoder process.

    Mask tensors travel by file reference inside a private scratch
    directory. Responses may arrive out of order; the id field correlates.
    """

    def __init__(self, command: str | list[str]):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not argv:
            raise DecoderError("empty decoder command")
        self._scratch = tempfile.TemporaryDirectory(prefix="trident-decoder-")
        try:
            self._proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as e:
            self._scratch.cleanup()
            raise DecoderError(f"cannot start decoder command {argv!r}: {e}") from e
        self._next_id = 0
        self._pending: dict[int, dict] = {}

    def request(self, image_ref: str, prompts: PromptSet) -> np.ndarray:
        rid = self._next_id
        self._next_id += 1
        mask_path = Path(self._scratch.name) / f"req{rid:06d}.trdt"
        write_tensor(prompts.mask, mask_path)
        line = json.dumps(
            {
                "id": rid,
                "image_ref": image_ref,
                "point": list(prompts.point),
                "box": list(prompts.box),
                "mask_ref": str(mask_path),
            }
        )
        try:
            self._proc.stdin.write(line + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as e:
            raise DecoderError(f"decoder process closed its input: {e}") from e
        reply = self._read_until(rid)
        if "error" in reply:
            raise DecoderError(f"decoder error for request {rid}: {reply['error']}")
        ref = reply.get("mask_ref")
        if not isinstance(ref, str):
            raise DecoderError(f"response {rid} lacks mask_ref")
        return read_tensor(ref)

    def _read_until(self, rid: int) -> dict:
        if rid in self._pending:
            return self._pending.pop(rid)
        while True:
            line = self._proc.stdout.readline()
            if not line:
                code = self._proc.poll()
                raise DecoderError(f"decoder stream ended (exit code {code})")
            line = line.strip()
            if not line:
                continue
            try:
                msg = json.loads(line)
            except json.JSONDecodeError as e:
                raise DecoderError(f"decoder wrote invalid JSON: {line[:120]}") from e
            got = msg.get("id")
            if got == rid:
                return msg
            if isinstance(got, int):
                self._pending[got] = msg
            else:
                log.warning("discarding decoder line with unusable id: %r", line[:120])

    def close(self):
        proc = getattr(self, "_proc", None)
        if proc is not None:
            try:
                if proc.stdin:
                    proc.stdin.close()
                proc.wait(timeout=5)
            except Exception:
                proc.kill()
        scratch = getattr(self, "_scratch", None)
        if scratch is not None:
            self._scratch.cleanup()


def refine_class(
    regions: list[Region],
    prompts: list[PromptSet],
    decoder: DecoderBackend,
    m_k: np.ndarray,
    image_ref: str = "image",
    on_fallback=None,
) -> np.ndarray:
    """Decoded-and-fused confidence plane for one class.

    Zero regions leave the plane unrefined; any decoder failure while
    serving this class does the same (logged), so refinement can only ever
    degrade to the unrefined result.
    """
    if len(regions) != len(prompts):
        raise ValidationError("regions and prompts must pair up")
    if not regions:
        return m_k.astype(np.float32).copy()
    h, w = m_k.shape
    best = np.zeros((h, w), dtype=np.float32)
    try:
        for region, prompt in zip(regions, prompts):
            decoded = decoder.request(image_ref, prompt)
            if decoded.ndim != 2:
                raise DecoderError(f"decoder returned rank-{decoded.ndim} mask")
            up = np.clip(bilinear_resize(decoded, h, w), 0.0, 1.0)
            np.maximum(best, up, out=best)
    except DecoderError as e:
        k = regions[0].class_index
        log.warning("class %d falls back to unrefined scores: %s", k, e)
        if on_fallback is not None:
            on_fallback(k, e)
        return m_k.astype(np.float32).copy()
    return (best * m_k).astype(np.float32)


def fuse_refined(
    planes: dict[int, np.ndarray], scores: ClassScoreMap, vocabulary=None
) -> SegmentationMap:
    """Argmax over per-class refined planes; absent classes score 0."""
    h, w = scores.grid_hw
    c = scores.num_classes
    stack = np.zeros((h, w, c), dtype=np.float32)
    for k, plane in planes.items():
        if not 0 <= k < c:
            raise ValidationError(f"plane for unknown class {k}")
        if plane.shape != (h, w):
            raise ShapeError(f"plane for class {k} has shape {plane.shape}, want {(h, w)}")
        stack[:, :, k] = plane
    labels = np.argmax(stack, axis=2).astype(np.int64)
    return SegmentationMap(labels, c, vocabulary)


def refine_segmentation(
    seg: SegmentationMap,
    scores: ClassScoreMap,
    decoder: DecoderBackend,
    alpha: float = 0.005,
    connectivity: int = 8,
    min_area: int = 0,
    skip_background: bool = False,
    image_ref: str = "image",
    mask_hw: tuple[int, int] = MASK_PROMPT_HW,
) -> tuple[SegmentationMap, dict]:
    """Refine every class present in the segmentation and fuse.

    Returns the refined map plus run stats (regions, requests, fallbacks,
    skipped classes).
    """
    if seg.grid_hw != scores.grid_hw:
        raise ShapeError(f"segmentation {seg.grid_hw} vs scores {scores.grid_hw}")
    background = None
    if skip_background and seg.vocabulary is not None:
        background = seg.vocabulary.background_index
    stats = {"classes": 0, "regions": 0, "requests": 0, "fallbacks": 0, "skipped": []}
    planes: dict[int, np.ndarray] = {}
    for k in np.unique(seg.labels).tolist():
        m_k = scores.plane(k).astype(np.float32)
        if background is not None and k == background:
            planes[k] = m_k
            stats["skipped"].append(k)
            continue
        b_k = binarize_class(seg, k)
        regions = [
            r for r in connected_components(b_k, connectivity, class_index=k)
            if r.area >= min_area
        ]
        stats["classes"] += 1
        stats["regions"] += len(regions)
        prompt_sets = [synth_prompts(r, b_k, m_k, alpha, mask_hw) for r in regions]

        def count_fallback(_k, _e):
            stats["fallbacks"] += 1

        plane = refine_class(
            regions, prompt_sets, decoder, m_k, image_ref, on_fallback=count_fallback
        )
        stats["requests"] += len(regions)
        planes[k] = plane
    refined = fuse_refined(planes, scores, seg.vocabulary)
    return refined, stats
