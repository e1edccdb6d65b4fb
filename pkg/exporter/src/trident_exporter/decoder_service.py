"""Promptable mask decoding behind a JSON-lines pipe.

One request object per line: ``{"id", "image_ref", "point", "box",
"mask_ref"}`` with prompts optional but not all absent. Replies carry the
request id plus either ``mask_ref`` (a 256 x 256 probability grid on disk)
or ``error``. Mask tensors travel by file reference, never inline. A bad
line can only ever produce an error response for that line; the loop
itself outlives every malformed request.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from trident.interchange import read_tensor, write_tensor

from .errors import CheckpointError
from .imaging import IMAGENET_MEAN, IMAGENET_STD, checkpoint_stats, load_rgb, normalized_chw, resize_to

log = logging.getLogger(__name__)

RESPONSE_SIDE = 256


class DecoderService:
    """Stateful request handler around one promptable-decoder checkpoint.

    Image embeddings are computed once per distinct ``image_ref`` and held
    in memory; with ``cache_dir`` set they also persist across service
    restarts, keyed by the resolved image path.
    """

    def __init__(self, sam_path, device: str = "auto", cache_dir=None):
        from transformers import SamModel

        from .export import resolve_device

        self.device = resolve_device(device)
        try:
            self.model = SamModel.from_pretrained(sam_path).eval().to(self.device)
        except Exception as e:
            raise CheckpointError(f"cannot load SAM checkpoint {sam_path}: {e}") from e
        self.mean, self.std = checkpoint_stats(sam_path, IMAGENET_MEAN, IMAGENET_STD)
        self.cache_dir = Path(cache_dir) if cache_dir else None
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._cache: dict[str, tuple[torch.Tensor, tuple[int, int]]] = {}
        self._seen_ids: set = set()

    @property
    def input_size(self) -> int:
        return self.model.config.vision_config.image_size

    @property
    def prompt_mask_side(self) -> int:
        # the prompt encoder downsamples mask input 4x onto the token grid
        return 4 * self.model.config.prompt_encoder_config.image_embedding_size

    def _embeddings(self, image_ref: str) -> tuple[torch.Tensor, tuple[int, int]]:
        hit = self._cache.get(image_ref)
        if hit is not None:
            return hit
        disk = None
        if self.cache_dir is not None:
            key = hashlib.sha256(str(Path(image_ref).resolve()).encode()).hexdigest()[:24]
            disk = self.cache_dir / f"{key}.pt"
            if disk.exists():
                blob = torch.load(disk, map_location=self.device, weights_only=True)
                entry = (blob["embeddings"], tuple(blob["size_hw"]))
                self._cache[image_ref] = entry
                return entry
        image = load_rgb(image_ref)
        size_hw = (image.height, image.width)
        side = self.input_size
        chw = normalized_chw(resize_to(image, side, side), self.mean, self.std)
        with torch.no_grad():
            emb = self.model.get_image_embeddings(pixel_values=chw[None].to(self.device))
        entry = (emb, size_hw)
        self._cache[image_ref] = entry
        if disk is not None:
            torch.save({"embeddings": emb.cpu(), "size_hw": list(size_hw)}, disk)
        return entry

    def _prompts(self, req: dict, h: int, w: int) -> dict:
        """Model kwargs from request prompts, scaled into the warped input."""
        side = self.input_size
        sx, sy = side / w, side / h
        kwargs = {}
        point = req.get("point")
        if point is not None:
            x, y, label = point
            kwargs["input_points"] = torch.tensor(
                [[[[float(x) * sx, float(y) * sy]]]], dtype=torch.float32, device=self.device
            )
            kwargs["input_labels"] = torch.tensor([[[int(label)]]], device=self.device)
        box = req.get("box")
        if box is not None:
            x0, y0, x1, y1 = (float(v) for v in box)
            kwargs["input_boxes"] = torch.tensor(
                [[[x0 * sx, y0 * sy, x1 * sx, y1 * sy]]],
                dtype=torch.float32,
                device=self.device,
            )
        mask_ref = req.get("mask_ref")
        if mask_ref is not None:
            prior = read_tensor(mask_ref)
            if prior.ndim != 2:
                raise ValueError(f"mask prompt must be 2-d, got shape {prior.shape}")
            t = torch.from_numpy(prior)[None, None].to(self.device)
            m = self.prompt_mask_side
            if t.shape[-2:] != (m, m):
                t = F.interpolate(t, size=(m, m), mode="bilinear", align_corners=False)
            kwargs["input_masks"] = t
        if not kwargs:
            raise ValueError("request carries no prompts")
        return kwargs

    def _response_path(self, req: dict) -> Path:
        ref = req.get("mask_ref")
        if isinstance(ref, str) and ref:
            return Path(ref).with_suffix(".resp.trdt")
        fd, name = tempfile.mkstemp(suffix=".trdt", prefix="decoded-")
        os.close(fd)
        return Path(name)

    def handle_request(self, req) -> dict:
        rid = req.get("id") if isinstance(req, dict) else None
        try:
            if not isinstance(req, dict):
                raise ValueError("request must be a JSON object")
            image_ref = req.get("image_ref")
            if not isinstance(image_ref, str) or not image_ref:
                raise ValueError("request lacks image_ref")
            if rid in self._seen_ids:
                log.warning(
                    "duplicate request id %r: this response supersedes the earlier one", rid
                )
            self._seen_ids.add(rid)
            emb, (h, w) = self._embeddings(image_ref)
            kwargs = self._prompts(req, h, w)
            with torch.no_grad():
                out = self.model(image_embeddings=emb, multimask_output=False, **kwargs)
            logits = out.pred_masks[0, 0, 0]
            if logits.shape != (RESPONSE_SIDE, RESPONSE_SIDE):
                logits = F.interpolate(
                    logits[None, None],
                    size=(RESPONSE_SIDE, RESPONSE_SIDE),
                    mode="bilinear",
                    align_corners=False,
                )[0, 0]
            mask = torch.sigmoid(logits).cpu().numpy().astype(np.float32)
            out_path = self._response_path(req)
            write_tensor(mask, out_path)
            return {"id": rid, "mask_ref": str(out_path)}
        except Exception as e:
            log.warning("request %r failed: %s", rid, e)
            return {"id": rid, "error": str(e)}

    def handle_line(self, line: str) -> dict | None:
        line = line.strip()
        if not line:
            return None
        try:
            req = json.loads(line)
        except json.JSONDecodeError as e:
            return {"id": None, "error": f"malformed request: {e}"}
        return self.handle_request(req)

    def serve(self, stdin=None, stdout=None) -> None:
        src = sys.stdin if stdin is None else stdin
        dst = sys.stdout if stdout is None else stdout
        for line in src:
            resp = self.handle_line(line)
            if resp is None:
                continue
            dst.write(json.dumps(resp) + "\n")
            dst.flush()


def serve_decoder(sam_path, stdin=None, stdout=None, device: str = "auto", cache_dir=None) -> None:
    """Run the request loop until the input stream closes."""
    DecoderService(sam_path, device=device, cache_dir=cache_dir).serve(stdin, stdout)
