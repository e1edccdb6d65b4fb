"""Dense-encoder globals: post-neck features and one global attention map.

The image is warp-resized to the encoder's square native input, so the
token grid is always full and every attention row is a true probability
row; the engine aligns this grid to its patch grid by bilinear resampling,
which absorbs the aspect distortion.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .errors import CheckpointError
from .imaging import IMAGENET_MEAN, IMAGENET_STD, checkpoint_stats, normalized_chw, resize_to

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamGlobals:
    features: np.ndarray  # (n, d) row-major over the grid
    attention: np.ndarray  # (n, n) head-averaged, row-stochastic
    grid: tuple[int, int]
    block_index: int


@dataclass
class SamEncoder:
    model: "torch.nn.Module"
    mean: tuple
    std: tuple
    device: torch.device

    @classmethod
    def load(cls, path, device: torch.device) -> "SamEncoder":
        try:
            from transformers import SamModel

            # eager attention: sdpa never materializes the attention weights
            model = (
                SamModel.from_pretrained(path, attn_implementation="eager")
                .eval()
                .to(device)
            )
        except Exception as e:
            raise CheckpointError(f"cannot load SAM checkpoint {path}: {e}") from e
        mean, std = checkpoint_stats(path, IMAGENET_MEAN, IMAGENET_STD)
        return cls(model, mean, std, device)

    @property
    def input_size(self) -> int:
        return self.model.config.vision_config.image_size

    @property
    def attention_block(self) -> int:
        """Index of the encoder block whose attention gets exported.

        The deepest globally-attending block: window-local blocks only see
        their own tile, so their maps cannot relate far-apart tokens.
        """
        indexes = list(self.model.config.vision_config.global_attn_indexes)
        if not indexes:
            raise CheckpointError("SAM checkpoint has no global attention blocks")
        return max(indexes)

    def globals(self, image) -> SamGlobals:
        side = self.input_size
        warped = resize_to(image, side, side)
        chw = normalized_chw(warped, self.mean, self.std)
        block = self.attention_block
        with torch.no_grad():
            out = self.model.vision_encoder(
                pixel_values=chw[None].to(self.device), output_attentions=True
            )
        emb = out.last_hidden_state[0]  # (d, gh, gw), post-neck
        d, gh, gw = emb.shape
        n = gh * gw
        features = emb.permute(1, 2, 0).reshape(n, d).cpu().numpy().astype(np.float32)
        att = out.attentions[block]
        if att.ndim != 3 or att.shape[-2:] != (n, n):
            raise CheckpointError(
                f"attention at block {block} has shape {tuple(att.shape)}, "
                f"expected heads x {n} x {n}"
            )
        attention = att.mean(dim=0).cpu().numpy().astype(np.float32)
        return SamGlobals(features, attention, (gh, gw), block)
