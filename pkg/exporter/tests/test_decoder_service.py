"""Decoder service protocol behavior, plus interop with the engine client."""
from __future__ import annotations

import io
import json
import logging
import sys

import numpy as np
import pytest
import torch

from trident.interchange import load_bundle, read_tensor, write_tensor
from trident.pipeline import PipelineOptions, run_paradigm
from trident.refine import PromptSet, SubprocessDecoder, refine_segmentation

from trident_exporter.decoder_service import DecoderService


@pytest.fixture(scope="module")
def service(checkpoints):
    return DecoderService(checkpoints["sam"], device="cpu")


@pytest.fixture()
def image_ref(exported_voc21):
    return str(exported_voc21 / "image.png")


def _full_request(rid, image_ref, mask_path) -> dict:
    write_tensor(np.full((256, 256), 0.4, dtype=np.float32), mask_path)
    return {
        "id": rid,
        "image_ref": image_ref,
        "point": [30, 40, 1],
        "box": [10, 10, 200, 220],
        "mask_ref": str(mask_path),
    }


class TestHandleRequest:
    def test_full_prompt_roundtrip(self, service, image_ref, tmp_path):
        req = _full_request(0, image_ref, tmp_path / "req0.trdt")
        resp = service.handle_request(req)
        assert resp["id"] == 0 and "error" not in resp
        mask = read_tensor(resp["mask_ref"])
        assert mask.shape == (256, 256)
        assert mask.min() >= 0.0 and mask.max() <= 1.0
        assert resp["mask_ref"].endswith("req0.resp.trdt")

    def test_point_only(self, service, image_ref):
        resp = service.handle_request({"id": 1, "image_ref": image_ref, "point": [5, 5, 1]})
        assert "error" not in resp
        assert read_tensor(resp["mask_ref"]).shape == (256, 256)

    def test_box_only(self, service, image_ref):
        resp = service.handle_request({"id": 2, "image_ref": image_ref, "box": [0, 0, 64, 64]})
        assert "error" not in resp

    def test_unknown_image_ref(self, service, tmp_path):
        resp = service.handle_request(
            {"id": 3, "image_ref": str(tmp_path / "ghost.png"), "point": [1, 1, 1]}
        )
        assert resp["id"] == 3 and "error" in resp and "mask_ref" not in resp

    def test_no_prompts(self, service, image_ref):
        resp = service.handle_request({"id": 4, "image_ref": image_ref})
        assert "no prompts" in resp["error"]

    def test_missing_image_ref(self, service):
        resp = service.handle_request({"id": 5, "point": [1, 1, 1]})
        assert "image_ref" in resp["error"]

    def test_unreadable_mask_prompt(self, service, image_ref, tmp_path):
        resp = service.handle_request(
            {"id": 6, "image_ref": image_ref, "mask_ref": str(tmp_path / "nothing.trdt")}
        )
        assert resp["id"] == 6 and "error" in resp

    def test_not_an_object(self, service):
        resp = service.handle_request([1, 2, 3])
        assert resp["id"] is None and "JSON object" in resp["error"]

    def test_duplicate_id_warns_and_serves(self, service, image_ref, caplog):
        req = {"id": 77, "image_ref": image_ref, "point": [8, 8, 1]}
        with caplog.at_level(logging.WARNING):
            first = service.handle_request(req)
            second = service.handle_request(dict(req))
        assert "error" not in first and "error" not in second
        assert any("supersedes" in r.message for r in caplog.records)


class TestEmbeddingCache:
    def test_in_memory_cache_hits(self, checkpoints, image_ref, monkeypatch):
        svc = DecoderService(checkpoints["sam"], device="cpu")
        calls = []
        inner = svc.model.get_image_embeddings

        def counted(*args, **kwargs):
            calls.append(1)
            return inner(*args, **kwargs)

        monkeypatch.setattr(svc.model, "get_image_embeddings", counted)
        for rid in range(3):
            resp = svc.handle_request({"id": rid, "image_ref": image_ref, "point": [2, 2, 1]})
            assert "error" not in resp
        assert len(calls) == 1

    def test_cache_dir_survives_restart(self, checkpoints, image_ref, tmp_path, monkeypatch):
        cache = tmp_path / "cache"
        first = DecoderService(checkpoints["sam"], device="cpu", cache_dir=cache)
        assert "error" not in first.handle_request(
            {"id": 0, "image_ref": image_ref, "point": [2, 2, 1]}
        )
        assert list(cache.glob("*.pt"))

        fresh = DecoderService(checkpoints["sam"], device="cpu", cache_dir=cache)

        def explode(*args, **kwargs):
            raise AssertionError("embeddings should come from the cache directory")

        monkeypatch.setattr(fresh.model, "get_image_embeddings", explode)
        resp = fresh.handle_request({"id": 1, "image_ref": image_ref, "point": [2, 2, 1]})
        assert "error" not in resp


class TestServeLoop:
    def test_line_protocol(self, service, image_ref, tmp_path):
        lines = [
            json.dumps(_full_request(10, image_ref, tmp_path / "a.trdt")),
            "",
            "{broken json",
            json.dumps({"id": 11, "image_ref": image_ref, "point": [3, 3, 1]}),
        ]
        out = io.StringIO()
        service.serve(io.StringIO("\n".join(lines) + "\n"), out)
        replies = [json.loads(l) for l in out.getvalue().splitlines()]
        assert [r["id"] for r in replies] == [10, None, 11]
        assert "mask_ref" in replies[0] and "error" in replies[1] and "mask_ref" in replies[2]


class TestEngineInterop:
    def test_subprocess_client_roundtrip(self, checkpoints, image_ref):
        command = f"{sys.executable} -m trident_exporter.cli serve-decoder --sam {checkpoints['sam']} --device cpu"
        decoder = SubprocessDecoder(command)
        try:
            prompt = PromptSet(
                point=(30, 40, 1),
                box=(10, 10, 200, 220),
                mask=np.full((256, 256), 0.3, dtype=np.float32),
            )
            for _ in range(2):
                mask = decoder.request(image_ref, prompt)
                assert mask.shape == (256, 256)
                assert mask.min() >= 0.0 and mask.max() <= 1.0
        finally:
            decoder.close()

    def test_refinement_runs_without_fallbacks(self, checkpoints, exported_voc21):
        bundle = load_bundle(exported_voc21)
        seg, scores = run_paradigm(bundle, PipelineOptions(paradigm="baseline"))
        command = f"{sys.executable} -m trident_exporter.cli serve-decoder --sam {checkpoints['sam']} --device cpu"
        decoder = SubprocessDecoder(command)
        try:
            refined, stats = refine_segmentation(
                seg, scores, decoder, min_area=400, image_ref=bundle.image_ref
            )
        finally:
            decoder.close()
        assert refined.labels.shape == bundle.image_hw
        assert stats["requests"] > 0
        assert stats["fallbacks"] == 0
