"""Tiny randomly initialized checkpoints so the suite runs offline on CPU.

The models are structurally faithful (same module graph and config knobs
as their full-size counterparts) but a few dozen dimensions wide, so every
export path runs in milliseconds. Position embeddings interpolate, so the
32 px vision towers still consume full 336 px preset windows.
"""
from __future__ import annotations

import json
import string

import numpy as np
import pytest
import torch
from PIL import Image

from trident_exporter.export import ExportJob, export_bundle, load_models

CLASSES = ("cat", "dog", "grass")


def _write_clip(path, patch: int) -> None:
    from transformers import CLIPConfig, CLIPImageProcessor, CLIPModel, CLIPTokenizer

    path.mkdir(parents=True)
    # character-level vocabulary: enough to tokenize template sentences
    chars = list(string.ascii_lowercase + string.digits + string.punctuation)
    vocab = {"<|startoftext|>": 0, "<|endoftext|>": 1}
    for ch in chars:
        vocab[ch] = len(vocab)
    for ch in chars:
        vocab[ch + "</w>"] = len(vocab)
    (path / "vocab.json").write_text(json.dumps(vocab))
    (path / "merges.txt").write_text("#version: 0.2\n")
    CLIPTokenizer(str(path / "vocab.json"), str(path / "merges.txt")).save_pretrained(path)

    cfg = CLIPConfig(
        text_config={
            "hidden_size": 32,
            "intermediate_size": 64,
            "num_attention_heads": 4,
            "num_hidden_layers": 2,
            "vocab_size": len(vocab),
            "max_position_embeddings": 77,
            "bos_token_id": 0,
            "eos_token_id": 1,
            "pad_token_id": 1,
        },
        vision_config={
            "hidden_size": 48,
            "intermediate_size": 96,
            "num_attention_heads": 4,
            "num_hidden_layers": 2,
            "image_size": 2 * patch,
            "patch_size": patch,
        },
        projection_dim=24,
    )
    torch.manual_seed(11)
    CLIPModel(cfg).eval().save_pretrained(path)
    CLIPImageProcessor(
        size={"shortest_edge": 2 * patch},
        crop_size={"height": 2 * patch, "width": 2 * patch},
    ).save_pretrained(path)


def _write_dino(path) -> None:
    from transformers import ViTConfig, ViTImageProcessor, ViTModel

    path.mkdir(parents=True)
    cfg = ViTConfig(
        hidden_size=32,
        intermediate_size=64,
        num_attention_heads=4,
        num_hidden_layers=2,
        image_size=32,
        patch_size=16,
    )
    torch.manual_seed(12)
    ViTModel(cfg, add_pooling_layer=False).eval().save_pretrained(path)
    ViTImageProcessor(size={"height": 32, "width": 32}).save_pretrained(path)


def _write_sam(path) -> None:
    from transformers import SamConfig, SamImageProcessor, SamModel

    path.mkdir(parents=True)
    # stock SAM configs default initializer_range to 1e-10 (the reference
    # weights are always loaded, never trained); raise it or every random
    # activation rounds to zero
    cfg = SamConfig(
        vision_config={
            "hidden_size": 32,
            "intermediate_size": 64,
            "num_attention_heads": 4,
            "num_hidden_layers": 4,
            "image_size": 64,
            "patch_size": 16,
            "output_channels": 16,
            "global_attn_indexes": [1, 3],
            "window_size": 2,
            "num_pos_feats": 8,
            "initializer_range": 0.05,
        },
        prompt_encoder_config={
            "hidden_size": 16,
            "image_size": 64,
            "patch_size": 16,
            "image_embedding_size": 4,
            "mask_input_channels": 4,
            "initializer_range": 0.05,
        },
        mask_decoder_config={
            "hidden_size": 16,
            "num_attention_heads": 2,
            "iou_head_hidden_dim": 16,
            "mlp_dim": 32,
        },
        initializer_range=0.05,
    )
    torch.manual_seed(13)
    SamModel(cfg).eval().save_pretrained(path)
    SamImageProcessor(
        size={"longest_edge": 64}, pad_size={"height": 64, "width": 64}
    ).save_pretrained(path)


@pytest.fixture(scope="session")
def checkpoints(tmp_path_factory):
    root = tmp_path_factory.mktemp("checkpoints")
    _write_clip(root / "clip", patch=16)
    _write_clip(root / "clip_patch32", patch=32)
    _write_dino(root / "dino")
    _write_sam(root / "sam")
    return {
        "clip": str(root / "clip"),
        "clip_patch32": str(root / "clip_patch32"),
        "dino": str(root / "dino"),
        "sam": str(root / "sam"),
    }


@pytest.fixture(scope="session")
def models(checkpoints):
    return load_models(checkpoints["clip"], checkpoints["dino"], checkpoints["sam"], "cpu")


def _structured_image(h: int, w: int, seed: int) -> Image.Image:
    rng = np.random.default_rng(seed)
    pix = rng.integers(40, 90, size=(h, w, 3), dtype=np.uint8)
    pix[: h // 2, : w // 2, 0] = 220  # quadrant blocks give SAM real structure
    pix[h // 2 :, w // 2 :, 1] = 200
    pix[h // 4 : h // 2, w // 4 : w // 2, 2] = 240
    return Image.fromarray(pix, "RGB")


@pytest.fixture(scope="session")
def image_448(tmp_path_factory):
    path = tmp_path_factory.mktemp("images") / "square.png"
    _structured_image(448, 448, seed=5).save(path)
    return str(path)


@pytest.fixture(scope="session")
def image_wide(tmp_path_factory):
    path = tmp_path_factory.mktemp("images") / "wide.png"
    _structured_image(375, 500, seed=6).save(path)
    return str(path)


@pytest.fixture(scope="session")
def exported_voc21(checkpoints, models, image_448, tmp_path_factory):
    out = tmp_path_factory.mktemp("bundles")
    job = ExportJob(
        image=image_448,
        preset="voc21",
        clip=checkpoints["clip"],
        dino=checkpoints["dino"],
        sam=checkpoints["sam"],
        classes=("background",) + CLASSES,
        out_dir=str(out),
        seed=7,
        device="cpu",
    )
    return export_bundle(job, models=models)
