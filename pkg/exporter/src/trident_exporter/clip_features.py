"""CLIP-side exports: window value tokens, folded projection, text embeddings.

The vision tower contributes value tokens only: the last block's tokens are
re-derived as v-projections of that block's input, so the block's own
attention mixing, residual skip, and FFN never touch them. Mixing is the
engine's job, done with its correlation matrices at segmentation time. The
attention out-projection and the visual projection are folded into a single
matrix so the engine can apply them as one linear map after mixing.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .errors import CheckpointError
from .imaging import CLIP_MEAN, CLIP_STD, checkpoint_stats, crop_windows, normalized_chw
from .templates import IMAGENET_TEMPLATES

log = logging.getLogger(__name__)

_BATCH = 8
_CONTEXT = 77


@dataclass
class ClipEncoder:
    model: "torch.nn.Module"
    tokenizer: object
    mean: tuple
    std: tuple
    device: torch.device

    @classmethod
    def load(cls, path, device: torch.device) -> "ClipEncoder":
        try:
            from transformers import AutoTokenizer, CLIPModel

            model = CLIPModel.from_pretrained(path).eval().to(device)
            tokenizer = AutoTokenizer.from_pretrained(path)
        except Exception as e:
            raise CheckpointError(f"cannot load CLIP checkpoint {path}: {e}") from e
        mean, std = checkpoint_stats(path, CLIP_MEAN, CLIP_STD)
        return cls(model, tokenizer, mean, std, device)

    @property
    def patch(self) -> int:
        return self.model.config.vision_config.patch_size

    @property
    def d_value(self) -> int:
        return self.model.config.vision_config.hidden_size

    @property
    def d_text(self) -> int:
        return self.model.config.projection_dim

    def window_values(self, image, origins, window: int) -> np.ndarray:
        """(num_windows, tokens, d_value) value tokens, cls excluded."""
        chw = normalized_chw(image, self.mean, self.std)
        crops = crop_windows(chw, origins, window)
        last = self.model.vision_model.encoder.layers[-1]
        out = []
        with torch.no_grad():
            for i in range(0, crops.shape[0], _BATCH):
                batch = crops[i : i + _BATCH].to(self.device)
                states = self.model.vision_model(
                    pixel_values=batch,
                    output_hidden_states=True,
                    interpolate_pos_encoding=True,
                ).hidden_states
                v = last.self_attn.v_proj(last.layer_norm1(states[-2]))
                out.append(v[:, 1:, :].cpu())
        return torch.cat(out, dim=0).numpy().astype(np.float32)

    def folded_projection(self) -> np.ndarray:
        """(d_value, d_text) matrix: attention out-projection then visual projection.

        Weight composition only; the two bias vectors would shift every token
        by one shared constant, which the cosine classifier downstream does
        not preserve exactly, so they are dropped rather than smuggled in.
        """
        last = self.model.vision_model.encoder.layers[-1]
        w_out = last.self_attn.out_proj.weight.detach()
        w_vis = self.model.visual_projection.weight.detach()
        p = (w_out.T @ w_vis.T).cpu().numpy().astype(np.float32)
        return p

    def class_embeddings(self, classes) -> np.ndarray:
        """(num_classes, d_text) unit-norm template-ensemble embeddings."""
        if not classes:
            raise CheckpointError("class list is empty")
        rows = []
        with torch.no_grad():
            for name in classes:
                texts = [t.format(name) for t in IMAGENET_TEMPLATES]
                tokens = self.tokenizer(
                    texts,
                    padding="max_length",
                    max_length=_CONTEXT,
                    truncation=True,
                    return_tensors="pt",
                )
                feats = self.model.get_text_features(
                    input_ids=tokens.input_ids.to(self.device),
                    attention_mask=tokens.attention_mask.to(self.device),
                ).pooler_output
                feats = feats / feats.norm(dim=-1, keepdim=True)
                mean = feats.mean(dim=0)
                rows.append((mean / mean.norm()).cpu())
        return torch.stack(rows, dim=0).numpy().astype(np.float32)
