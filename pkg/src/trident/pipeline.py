"""The two end-to-end paradigms and the shared classification step.

Both paradigms start identically: each window's value tokens are mixed by a
window-local correlation matrix and projected into the text space. They
part ways at the splice:

* baseline (segment_then_splice): classify every window on its own, then
  stitch the per-window SCORE maps and upsample. Windows never exchange
  information, so an object cut by a window edge is scored from partial
  context on each side.
* trident (splice_then_segment): stitch the per-window FEATURE maps first,
  resample the integral feature grid onto the dense-encoder grid, mix it
  with a global correlation matrix built from dense-encoder features and/or
  attention, and classify once.

Scores stay soft until the very end: upsample to image resolution first,
argmax last.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .correlation import (
    CorrelationMatrix,
    attention_correlation,
    hybrid_affinity,
    identity_correlation,
    proxy_window_correlation,
    sam_cosine_affinity,
    window_features,
)
from .errors import ConfigError, ShapeError, ValidationError
from .interchange import (
    Bundle,
    ClassVocabulary,
    default_palette,
    load_bundle,
    read_label_png,
    write_segmentation,
    write_tensor,
)
from .metrics import ConfusionMatrix, miou, per_class_iou, pixel_accuracy
from .numerics import as_f32, bilinear_resize, cosine_matrix, softmax_rows
from .presets import Preset, get_preset
from .tiling import FeatureMap, splice_features, splice_scores

log = logging.getLogger(__name__)

PARADIGMS = ("baseline", "trident")
CORR_CHOICES = ("cosine", "attention", "affinity", "identity")
WINDOW_CORR_CHOICES = ("proxy", "identity")
SCORE_MODES = ("mean", "vote")

SCORE_SUM_TOL = 1e-5


@dataclass(frozen=True)
class PipelineOptions:
    """Everything the paradigms need beyond the bundle itself."""

    paradigm: str = "trident"
    corr: str = "affinity"
    epsilon: float = 0.0
    alpha: float = 0.005
    logit_scale: float = 100.0
    window_corr: str = "proxy"
    score_mode: str = "mean"

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ConfigError(f"unknown paradigm '{self.paradigm}'; valid: {PARADIGMS}")
        if self.corr not in CORR_CHOICES:
            raise ConfigError(f"unknown correlation '{self.corr}'; valid: {CORR_CHOICES}")
        if not -1.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [-1, 1], got {self.epsilon}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.logit_scale <= 0:
            raise ConfigError(f"logit scale must be positive, got {self.logit_scale}")
        if self.window_corr not in WINDOW_CORR_CHOICES:
            raise ConfigError(
                f"unknown window correlation '{self.window_corr}'; valid: {WINDOW_CORR_CHOICES}"
            )
        if self.score_mode not in SCORE_MODES:
            raise ConfigError(f"unknown score mode '{self.score_mode}'; valid: {SCORE_MODES}")


@dataclass(frozen=True)
class ClassScoreMap:
    """H x W x c per-pixel class confidences, softmax-normalized."""

    scores: np.ndarray

    def __post_init__(self):
        s = self.scores
        if s.ndim != 3:
            raise ShapeError(f"scores must be H x W x c, got {s.shape}")
        if not np.isfinite(s).all():
            raise ValidationError("scores contain non-finite values")
        if (s < 0).any() or (s > 1).any():
            raise ValidationError("scores must lie in [0, 1]")
        sums = s.sum(axis=2, dtype=np.float64)
        if not np.allclose(sums, 1.0, atol=SCORE_SUM_TOL):
            worst = float(np.abs(sums - 1.0).max())
            raise ValidationError(
                f"per-pixel scores must sum to 1 within {SCORE_SUM_TOL}, off by {worst}"
            )

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.scores.shape[0], self.scores.shape[1]

    @property
    def num_classes(self) -> int:
        return self.scores.shape[2]

    def plane(self, k: int) -> np.ndarray:
        return self.scores[:, :, k]


@dataclass(frozen=True)
class SegmentationMap:
    """H x W integer class labels plus the vocabulary they index into."""

    labels: np.ndarray
    num_classes: int
    vocabulary: ClassVocabulary | None = None

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise ShapeError(f"labels must be H x W, got {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValidationError(f"labels must be integer, got {self.labels.dtype}")
        if self.labels.size and (
            (self.labels < 0).any() or (self.labels >= self.num_classes).any()
        ):
            raise ValidationError(f"labels must lie in 0..{self.num_classes - 1}")
        if self.vocabulary is not None and len(self.vocabulary) != self.num_classes:
            raise ValidationError("vocabulary size disagrees with num_classes")

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.labels.shape


def classify(feat: FeatureMap, t_emd: np.ndarray, logit_scale: float = 100.0) -> ClassScoreMap:
    """Cosine each patch feature against every class embedding, softmax over classes."""
    t = as_f32(t_emd, "text embeddings")
    if t.ndim != 2:
        raise ShapeError(f"text embeddings must be c x d, got {t.shape}")
    if feat.dim != t.shape[1]:
        raise ShapeError(
            f"feature dim {feat.dim} != text embedding dim {t.shape[1]}"
        )
    norms = np.linalg.norm(t.astype(np.float64), axis=1)
    dead = np.flatnonzero(norms < 1e-12)
    if dead.size:
        raise ConfigError(f"text embedding row(s) {dead.tolist()} have zero norm")
    h, w = feat.grid_hw
    cos = cosine_matrix(feat.data.reshape(h * w, feat.dim), t)
    conf = softmax_rows(logit_scale * cos)
    return ClassScoreMap(conf.reshape(h, w, t.shape[0]))


def labels_from_scores(scores: np.ndarray) -> np.ndarray:
    """Argmax over the class axis; ties resolve to the lowest class index."""
    return np.argmax(scores, axis=2).astype(np.int64)


def _one_hot(labels: np.ndarray, c: int) -> np.ndarray:
    out = np.zeros((*labels.shape, c), dtype=np.float32)
    np.put_along_axis(out, labels[:, :, None], 1.0, axis=2)
    return out


def _window_correlation(dino: np.ndarray | None, tokens: int, options: PipelineOptions) -> CorrelationMatrix:
    side = int(round(np.sqrt(tokens)))
    if options.window_corr == "identity" or dino is None:
        return identity_correlation((side, side))
    return proxy_window_correlation(dino, options.epsilon)


def window_feature_maps(bundle: Bundle, options: PipelineOptions) -> list[FeatureMap]:
    """Per-window guided features in the text space, in window order."""
    maps = []
    for wt in bundle.windows:
        a = _window_correlation(wt.dino, wt.values.shape[0], options)
        maps.append(window_features(wt.values, a, bundle.projection))
    return maps


def build_global_correlation(bundle: Bundle, options: PipelineOptions) -> CorrelationMatrix:
    """The global aggregation matrix over the dense-encoder grid."""
    if options.corr == "identity":
        if bundle.sam_grid is None:
            raise ConfigError("bundle carries no dense-encoder grid")
        return identity_correlation(bundle.sam_grid)
    if options.corr == "cosine":
        if bundle.sam_features is None:
            raise ConfigError("correlation 'cosine' needs dense-encoder features in the bundle")
        return sam_cosine_affinity(bundle.sam_features, options.epsilon, bundle.sam_grid)
    if options.corr == "attention":
        if bundle.sam_attention is None:
            raise ConfigError("correlation 'attention' needs encoder attention in the bundle")
        return attention_correlation(bundle.sam_attention, bundle.sam_grid)
    if bundle.sam_features is None or bundle.sam_attention is None:
        raise ConfigError(
            "correlation 'affinity' needs both dense-encoder features and attention in the bundle"
        )
    c = cosine_matrix(bundle.sam_features, bundle.sam_features)
    return hybrid_affinity(bundle.sam_attention, c, options.epsilon, bundle.sam_grid)


def _upsample_scores(scores: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    return bilinear_resize(scores, out_hw[0], out_hw[1])


def segment_then_splice(
    bundle: Bundle, options: PipelineOptions
) -> tuple[SegmentationMap, ClassScoreMap]:
    """Classify each window independently, then stitch score maps."""
    h_img, w_img = bundle.image_hw
    per_window = []
    for fm in window_feature_maps(bundle, options):
        score = classify(fm, bundle.text_embeddings, options.logit_scale).scores
        if options.score_mode == "vote":
            score = _one_hot(labels_from_scores(score), bundle.num_classes)
        per_window.append(score)
    spliced = splice_scores(per_window, bundle.layout)
    full = _upsample_scores(spliced, (h_img, w_img))
    score_map = ClassScoreMap(full)
    seg = SegmentationMap(
        labels_from_scores(full), bundle.num_classes, bundle.vocabulary
    )
    return seg, score_map


def splice_then_segment(
    bundle: Bundle, options: PipelineOptions
) -> tuple[SegmentationMap, ClassScoreMap]:
    """Stitch window features, aggregate globally, classify once."""
    if bundle.sam_grid is None:
        raise ConfigError("splice_then_segment needs a dense-encoder grid in the bundle")
    h_img, w_img = bundle.image_hw
    h_s, w_s = bundle.sam_grid
    spliced = splice_features(window_feature_maps(bundle, options), bundle.layout)
    on_grid = bilinear_resize(spliced.data, h_s, w_s)
    flat = on_grid.reshape(h_s * w_s, spliced.dim)
    a = build_global_correlation(bundle, options)
    if a.kind == "identity":
        mixed = flat
    else:
        mixed = (a.matrix.astype(np.float64) @ flat.astype(np.float64)).astype(np.float32)
    score = classify(
        FeatureMap(mixed.reshape(h_s, w_s, spliced.dim)),
        bundle.text_embeddings,
        options.logit_scale,
    ).scores
    full = _upsample_scores(score, (h_img, w_img))
    score_map = ClassScoreMap(full)
    seg = SegmentationMap(
        labels_from_scores(full), bundle.num_classes, bundle.vocabulary
    )
    return seg, score_map


def run_paradigm(
    bundle: Bundle, options: PipelineOptions
) -> tuple[SegmentationMap, ClassScoreMap]:
    if options.paradigm == "baseline":
        return segment_then_splice(bundle, options)
    return splice_then_segment(bundle, options)


def _bundle_dirs(root: Path) -> list[Path]:
    if (root / "manifest.json").is_file():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "manifest.json").is_file())
    if not dirs:
        raise ConfigError(f"no bundles found under {root}")
    return dirs


def run_preset(
    preset: str | Preset,
    bundle_root: str | Path,
    options: PipelineOptions | None = None,
    out_dir: str | Path | None = None,
) -> dict:
    """Run one paradigm over every bundle under ``bundle_root``.

    Bundles must have been exported with the preset's window geometry; a
    mismatch is a configuration error. Ground truth, when present, feeds a
    pooled confusion matrix; without it masks are still emitted and the
    metric fields stay null.
    """
    if isinstance(preset, str):
        preset = get_preset(preset)
    options = options or PipelineOptions()
    root = Path(bundle_root)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    pooled: ConfusionMatrix | None = None
    images = []
    for bdir in _bundle_dirs(root):
        t0 = time.perf_counter()
        bundle = load_bundle(bdir)
        if bundle.layout.window != preset.window or bundle.layout.stride != preset.stride:
            raise ConfigError(
                f"{bdir}: bundle layout {bundle.layout.window}/{bundle.layout.stride} does not "
                f"match preset {preset.name} ({preset.window}/{preset.stride})"
            )
        if min(bundle.image_hw) != preset.short_side:
            log.warning(
                "%s: shorter side %d differs from preset %s target %d",
                bdir, min(bundle.image_hw), preset.name, preset.short_side,
            )
        seg, score = run_paradigm(bundle, options)
        record = {
            "bundle": bdir.name,
            "windows": bundle.num_windows,
            "image_hw": list(bundle.image_hw),
            "seconds": None,
            "miou": None,
        }
        if bundle.ground_truth is not None:
            gt = read_label_png(bundle.ground_truth)
            cm = ConfusionMatrix(bundle.num_classes).add(seg.labels, gt)
            pooled = cm if pooled is None else pooled.merge(cm)
            record["miou"] = miou(cm)
        if out is not None:
            write_segmentation(
                seg.labels, default_palette(bundle.num_classes), out / f"{bdir.name}.png"
            )
            write_tensor(score.scores, out / f"{bdir.name}.scores.trdt")
        record["seconds"] = round(time.perf_counter() - t0, 4)
        images.append(record)

    report = {
        "preset": preset.name,
        "paradigm": options.paradigm,
        "correlation": options.corr,
        "epsilon": options.epsilon,
        "images": images,
        "miou": miou(pooled) if pooled is not None else None,
        "pixel_accuracy": pixel_accuracy(pooled) if pooled is not None else None,
        "per_class_iou": [
            None if np.isnan(v) else float(v) for v in per_class_iou(pooled)
        ] if pooled is not None else None,
    }
    if out is not None:
        (out / "report.json").write_text(json.dumps(report, indent=2))
    return report
