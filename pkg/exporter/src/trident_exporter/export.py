"""One image in, one engine-loadable bundle out.

The exporter owns everything model-shaped: window crops through CLIP and
the guidance ViT, the folded projection, template text embeddings, and the
dense encoder's global features and attention. The engine owns everything
downstream, including bundle validation; every exported bundle is loaded
back through it before this module reports success.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import torch

from trident.interchange import load_bundle, write_tensor
from trident.presets import get_preset
from trident.tiling import resize_shorter_side

from .clip_features import ClipEncoder
from .dino_features import DinoEncoder
from .errors import CheckpointError, ExporterError
from .imaging import load_rgb, resize_to
from .layout import plan_crops
from .sam_features import SamEncoder

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExportJob:
    """Everything needed to turn one image into one bundle."""

    image: str
    preset: str
    clip: str
    dino: str
    sam: str
    classes: tuple[str, ...]
    out_dir: str
    seed: int = 0
    device: str = "auto"

    def __post_init__(self):
        if not self.classes:
            raise ExporterError("class list is empty")
        if any(not str(c).strip() for c in self.classes):
            raise ExporterError("class names must be non-blank")


@dataclass
class ModelPack:
    """Loaded encoders, shareable across the jobs of one export run."""

    clip: ClipEncoder
    dino: DinoEncoder
    sam: SamEncoder


def resolve_device(requested: str = "auto") -> torch.device:
    if requested == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    if requested.startswith("cuda") and not torch.cuda.is_available():
        log.warning("CUDA requested but unavailable; falling back to CPU")
        return torch.device("cpu")
    return torch.device(requested)


def load_models(clip, dino, sam, device: str = "auto") -> ModelPack:
    dev = resolve_device(device)
    return ModelPack(
        clip=ClipEncoder.load(clip, dev),
        dino=DinoEncoder.load(dino, dev),
        sam=SamEncoder.load(sam, dev),
    )


def export_bundle(job: ExportJob, models: ModelPack | None = None) -> Path:
    """Extract, write, and verify one bundle; returns its directory."""
    preset = get_preset(job.preset)
    if models is None:
        models = load_models(job.clip, job.dino, job.sam, job.device)
    for name, enc in (("CLIP", models.clip), ("DINO", models.dino)):
        if enc.patch != preset.patch:
            raise CheckpointError(
                f"{name} patch size {enc.patch} does not match preset patch {preset.patch}"
            )
    torch.manual_seed(job.seed)

    src = Path(job.image)
    image = load_rgb(src)
    h, w = resize_shorter_side(image.height, image.width, preset.short_side, preset.patch)
    resized = resize_to(image, h, w)
    plan = plan_crops(h, w, preset.window, preset.stride, preset.patch)

    values = models.clip.window_values(resized, plan.origins, plan.window)
    guidance = models.dino.window_tokens(resized, plan.origins, plan.window)
    projection = models.clip.folded_projection()
    text = models.clip.class_embeddings(job.classes)
    sam_globals = models.sam.globals(resized)

    bundle_dir = Path(job.out_dir) / src.stem
    bundle_dir.mkdir(parents=True, exist_ok=True)
    # prompts later travel in this image's pixel space, so the bundle keeps
    # its own copy at exactly the manifest dimensions
    image_path = bundle_dir / "image.png"
    resized.save(image_path)

    entries = []
    for i, (y0, x0) in enumerate(plan.origins):
        value_name = f"win_{i:03d}.values.trdt"
        dino_name = f"win_{i:03d}.dino.trdt"
        write_tensor(values[i], bundle_dir / value_name)
        write_tensor(guidance[i], bundle_dir / dino_name)
        entries.append(
            {"index": i, "y0": y0, "x0": x0, "values": value_name, "dino": dino_name}
        )
    write_tensor(projection, bundle_dir / "projection.trdt")
    write_tensor(text, bundle_dir / "text_embeddings.trdt")
    write_tensor(sam_globals.features, bundle_dir / "sam_features.trdt")
    write_tensor(sam_globals.attention, bundle_dir / "sam_attention.trdt")

    manifest = {
        "image": {"height": h, "width": w, "path": str(image_path.resolve())},
        "layout": {"window": plan.window, "stride": plan.stride, "patch": plan.patch},
        "windows": entries,
        "projection": "projection.trdt",
        "text_embeddings": "text_embeddings.trdt",
        "classes": list(job.classes),
        "sam": {
            "grid": list(sam_globals.grid),
            "features": "sam_features.trdt",
            "attention": "sam_attention.trdt",
            "block": sam_globals.block_index,
        },
        "seed": job.seed,
        "models": {"clip": str(job.clip), "dino": str(job.dino), "sam": str(job.sam)},
    }
    if preset.with_background:
        manifest["background_index"] = 0
    with open(bundle_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")

    load_bundle(bundle_dir)  # the engine is the authority on bundle validity
    log.info("exported %s: %d windows, %d classes", bundle_dir, plan.num_windows, len(job.classes))
    return bundle_dir
