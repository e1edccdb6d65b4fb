"""Image loading, resizing, and per-model normalization."""
from __future__ import annotations

import logging

import numpy as np
import torch
from PIL import Image

from .errors import ExporterError

log = logging.getLogger(__name__)

# Fallback normalization stats when a checkpoint ships no processor config.
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def load_rgb(path) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except (OSError, ValueError) as e:
        raise ExporterError(f"cannot read image {path}: {e}") from e


def resize_to(img: Image.Image, h: int, w: int) -> Image.Image:
    if img.size == (w, h):
        return img
    return img.resize((w, h), Image.BILINEAR)


def normalized_chw(img: Image.Image, mean, std) -> torch.Tensor:
    """(3, H, W) float32 tensor, scaled to [0, 1] then standardized."""
    x = np.asarray(img, dtype=np.float32) / 255.0
    if x.ndim != 3 or x.shape[2] != 3:
        raise ExporterError(f"expected an RGB image, got array shape {x.shape}")
    x = (x - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))


def crop_windows(chw: torch.Tensor, origins, window: int) -> torch.Tensor:
    """(n, 3, window, window) batch of crops in plan order."""
    crops = [chw[:, y0 : y0 + window, x0 : x0 + window] for y0, x0 in origins]
    return torch.stack(crops, dim=0)


def checkpoint_stats(model_dir, fallback_mean, fallback_std) -> tuple[tuple, tuple]:
    """Normalization stats from the checkpoint's processor config, if any."""
    try:
        from transformers import AutoImageProcessor

        proc = AutoImageProcessor.from_pretrained(model_dir)
        mean, std = proc.image_mean, proc.image_std
        if mean is None or std is None:
            raise ValueError("processor config lacks image_mean/image_std")
        return tuple(mean), tuple(std)
    except Exception as e:  # no config, partial config, unknown processor class
        log.warning("no usable image processor at %s (%s); using defaults", model_dir, e)
        return tuple(fallback_mean), tuple(fallback_std)
