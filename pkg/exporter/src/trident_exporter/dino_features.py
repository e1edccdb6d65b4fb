"""Self-supervised ViT patch tokens, used by the engine as window guidance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import CheckpointError
from .imaging import IMAGENET_MEAN, IMAGENET_STD, checkpoint_stats, crop_windows, normalized_chw

_BATCH = 8


@dataclass
class DinoEncoder:
    model: "torch.nn.Module"
    mean: tuple
    std: tuple
    device: torch.device

    @classmethod
    def load(cls, path, device: torch.device) -> "DinoEncoder":
        try:
            from transformers import ViTModel

            model = ViTModel.from_pretrained(path, add_pooling_layer=False).eval().to(device)
        except Exception as e:
            raise CheckpointError(f"cannot load DINO checkpoint {path}: {e}") from e
        mean, std = checkpoint_stats(path, IMAGENET_MEAN, IMAGENET_STD)
        return cls(model, mean, std, device)

    @property
    def patch(self) -> int:
        return self.model.config.patch_size

    def window_tokens(self, image, origins, window: int) -> np.ndarray:
        """(num_windows, tokens, d) final-layer patch tokens, cls excluded."""
        chw = normalized_chw(image, self.mean, self.std)
        crops = crop_windows(chw, origins, window)
        out = []
        with torch.no_grad():
            for i in range(0, crops.shape[0], _BATCH):
                batch = crops[i : i + _BATCH].to(self.device)
                hidden = self.model(
                    pixel_values=batch, interpolate_pos_encoding=True
                ).last_hidden_state
                out.append(hidden[:, 1:, :].cpu())
        return torch.cat(out, dim=0).numpy().astype(np.float32)
