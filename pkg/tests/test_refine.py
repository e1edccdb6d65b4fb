import sys
import textwrap

import numpy as np
import pytest

from trident.errors import DecoderError, ShapeError, ValidationError
from trident.numerics import softmax_rows
from trident.pipeline import ClassScoreMap, SegmentationMap, labels_from_scores
from trident.refine import (
    DecoderBackend,
    PromptSet,
    Region,
    StubDecoder,
    SubprocessDecoder,
    binarize_class,
    connected_components,
    fuse_refined,
    refine_class,
    refine_segmentation,
    synth_prompts,
)


def flood_fill_partition(b, connectivity):
    """Explicit-stack flood fill, the reference for component labeling."""
    b = np.asarray(b).astype(bool)
    h, w = b.shape
    seen = np.zeros_like(b)
    if connectivity == 4:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        steps = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    regions = []
    for y in range(h):
        for x in range(w):
            if not b[y, x] or seen[y, x]:
                continue
            stack = [(y, x)]
            seen[y, x] = True
            pixels = []
            while stack:
                cy, cx = stack.pop()
                pixels.append((cy, cx))
                for dy, dx in steps:
                    ny, nx = cy + dy, cx + dx
                    if 0 <= ny < h and 0 <= nx < w and b[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
            regions.append(sorted(pixels))
    return sorted(regions)


def random_scores(h, w, c, seed):
    rng = np.random.default_rng(seed)
    return ClassScoreMap(
        softmax_rows(rng.normal(size=(h * w, c)).astype(np.float32)).reshape(h, w, c)
    )


class TestBinarize:
    def test_uniform(self):
        seg = SegmentationMap(np.full((3, 3), 1, dtype=np.int64), 2)
        assert binarize_class(seg, 1).all()
        assert not binarize_class(seg, 0).any()

    def test_checkerboard(self):
        labels = np.indices((4, 4)).sum(axis=0) % 2
        b = binarize_class(labels, 1)
        assert np.array_equal(b, (labels == 1).astype(np.uint8))


class TestConnectedComponents:
    def test_diagonal_pair(self):
        b = np.array([[1, 0], [0, 1]])
        assert len(connected_components(b, 8)) == 1
        assert len(connected_components(b, 4)) == 2

    def test_all_zero(self):
        assert connected_components(np.zeros((4, 4)), 8) == []

    def test_row_major_region_order(self):
        b = np.array(
            [
                [0, 0, 1],
                [1, 0, 1],
                [1, 0, 0],
            ]
        )
        regions = connected_components(b, 4)
        firsts = [tuple(r.pixels[0]) for r in regions]
        assert firsts == sorted(firsts)
        assert firsts[0] == (0, 2)

    def test_u_shape_merges_via_union(self):
        # two arms meet at the bottom: second pass must merge provisional labels
        b = np.array(
            [
                [1, 0, 1],
                [1, 0, 1],
                [1, 1, 1],
            ]
        )
        regions = connected_components(b, 4)
        assert len(regions) == 1
        assert regions[0].area == 7

    def test_partition_property(self):
        rng = np.random.default_rng(0)
        b = (rng.random((16, 16)) < 0.5).astype(np.uint8)
        for conn in (4, 8):
            regions = connected_components(b, conn)
            total = np.zeros_like(b)
            for r in regions:
                ys, xs = r.pixels[:, 0], r.pixels[:, 1]
                assert not total[ys, xs].any()  # pairwise disjoint
                total[ys, xs] = 1
            assert np.array_equal(total, b)

    @pytest.mark.parametrize("conn", [4, 8])
    @pytest.mark.parametrize("seed", range(8))
    def test_matches_flood_fill(self, conn, seed):
        rng = np.random.default_rng(seed)
        b = (rng.random((12, 12)) < 0.45).astype(np.uint8)
        got = sorted(
            sorted(map(tuple, r.pixels.tolist())) for r in connected_components(b, conn)
        )
        assert got == flood_fill_partition(b, conn)

    def test_rejects_bad_input(self):
        with pytest.raises(ValidationError):
            connected_components(np.array([[0, 2]]), 8)
        with pytest.raises(ValidationError):
            connected_components(np.zeros((2, 2)), 6)
        with pytest.raises(ShapeError):
            connected_components(np.zeros(4), 8)


class TestSynthPrompts:
    def test_box_from_two_pixels(self):
        region = Region(0, np.array([[1, 2], [3, 5]], dtype=np.int64))
        b = np.zeros((6, 8), dtype=np.uint8)
        b[1, 2] = b[3, 5] = 1
        m = np.full((6, 8), 0.5, dtype=np.float32)
        ps = synth_prompts(region, b, m, mask_hw=(6, 8))
        assert ps.box == (2, 1, 5, 3)

    def test_point_is_confidence_argmax(self):
        m = np.array([[0.1, 0.9], [0.4, 0.2]], dtype=np.float32)
        region = Region(0, np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.int64))
        ps = synth_prompts(region, np.ones((2, 2), dtype=np.uint8), m, mask_hw=(2, 2))
        assert ps.point == (1, 0, 1)

    def test_point_tie_row_major_first(self):
        m = np.full((3, 3), 0.7, dtype=np.float32)
        region = Region(0, np.array([[1, 1], [1, 2], [2, 0]], dtype=np.int64))
        ps = synth_prompts(region, np.ones((3, 3), dtype=np.uint8), m, mask_hw=(3, 3))
        assert ps.point == (1, 1, 1)

    def test_mask_value_arithmetic(self):
        b = np.zeros((4, 4), dtype=np.uint8)
        b[1, 1] = 1
        m = np.zeros((4, 4), dtype=np.float32)
        m[1, 1] = 0.8
        region = Region(0, np.array([[1, 1]], dtype=np.int64))
        ps = synth_prompts(region, b, m, alpha=0.005, mask_hw=(4, 4))
        assert ps.mask[1, 1] == pytest.approx(0.004, abs=1e-9)
        assert ps.mask.max() <= 0.005

    def test_alpha_one_mask_equals_product(self):
        rng = np.random.default_rng(4)
        b = (rng.random((8, 8)) < 0.5).astype(np.uint8)
        b[0, 0] = 1
        m = rng.random((8, 8)).astype(np.float32)
        region = connected_components(b, 8)[0]
        ps = synth_prompts(region, b, m, alpha=1.0, mask_hw=(8, 8))
        assert np.array_equal(ps.mask, (b.astype(np.float32) * m).astype(np.float32))

    def test_mask_covers_class_not_region(self):
        # two separate blobs of the class: the mask includes both
        b = np.zeros((8, 8), dtype=np.uint8)
        b[0, 0] = b[7, 7] = 1
        m = np.ones((8, 8), dtype=np.float32)
        regions = connected_components(b, 8)
        ps = synth_prompts(regions[0], b, m, alpha=1.0, mask_hw=(8, 8))
        assert ps.mask[0, 0] == 1.0 and ps.mask[7, 7] == 1.0

    def test_point_inside_region_and_box(self):
        rng = np.random.default_rng(9)
        for seed in range(20):
            rng = np.random.default_rng(seed)
            b = (rng.random((10, 10)) < 0.4).astype(np.uint8)
            if not b.any():
                continue
            m = rng.random((10, 10)).astype(np.float32)
            for region in connected_components(b, 8):
                ps = synth_prompts(region, b, m, mask_hw=(10, 10))
                x, y, lab = ps.point
                assert lab == 1
                assert [y, x] in region.pixels.tolist()
                x0, y0, x1, y1 = ps.box
                assert x0 <= x <= x1 and y0 <= y <= y1

    def test_downsamples_to_decoder_grid(self):
        b = np.ones((32, 32), dtype=np.uint8)
        m = np.ones((32, 32), dtype=np.float32)
        region = connected_components(b, 8)[0]
        ps = synth_prompts(region, b, m)
        assert ps.mask.shape == (256, 256)

    def test_bad_alpha(self):
        region = Region(0, np.array([[0, 0]], dtype=np.int64))
        with pytest.raises(ValidationError):
            synth_prompts(region, np.ones((2, 2)), np.ones((2, 2), dtype=np.float32), alpha=0)


class TestPromptSetType:
    def test_point_outside_box_rejected(self):
        with pytest.raises(ValidationError):
            PromptSet((5, 5, 1), (0, 0, 2, 2), np.zeros((4, 4), dtype=np.float32))

    def test_background_point_rejected(self):
        with pytest.raises(ValidationError):
            PromptSet((1, 1, 0), (0, 0, 2, 2), np.zeros((4, 4), dtype=np.float32))


class _FailingDecoder(DecoderBackend):
    def request(self, image_ref, prompts):
        raise DecoderError("synthetic outage")


class _BoxDecoder(DecoderBackend):
    """Returns the box interior as a binary mask at prompt resolution."""

    def request(self, image_ref, prompts):
        out = np.zeros(prompts.mask.shape, dtype=np.float32)
        x0, y0, x1, y1 = prompts.box
        out[y0 : y1 + 1, x0 : x1 + 1] = 1.0
        return out


class TestRefineClass:
    def test_stub_algebra_identity_resolution(self):
        rng = np.random.default_rng(2)
        m = rng.random((256, 256)).astype(np.float32)
        b = (rng.random((256, 256)) < 0.5).astype(np.uint8)
        b[0, 0] = 1
        regions = connected_components(b, 8)
        prompts = [synth_prompts(r, b, m, alpha=0.005, mask_hw=(256, 256)) for r in regions]
        plane = refine_class(regions, prompts, StubDecoder(), m)
        expect = np.clip(0.005 * b.astype(np.float32) * m, 0.0, 1.0) * m
        assert np.array_equal(plane, expect.astype(np.float32))

    def test_zero_regions_unrefined(self):
        m = np.random.default_rng(1).random((8, 8)).astype(np.float32)
        plane = refine_class([], [], StubDecoder(), m)
        assert np.array_equal(plane, m)

    def test_decoder_failure_falls_back(self, caplog):
        m = np.random.default_rng(1).random((8, 8)).astype(np.float32)
        b = np.ones((8, 8), dtype=np.uint8)
        regions = connected_components(b, 8, class_index=3)
        prompts = [synth_prompts(r, b, m, mask_hw=(8, 8)) for r in regions]
        seen = []
        with caplog.at_level("WARNING"):
            plane = refine_class(
                regions, prompts, _FailingDecoder(), m,
                on_fallback=lambda k, e: seen.append(k),
            )
        assert np.array_equal(plane, m)
        assert seen == [3]
        assert "falls back" in caplog.text

    def test_two_regions_pixelwise_max(self):
        m = np.ones((16, 16), dtype=np.float32)
        b = np.zeros((16, 16), dtype=np.uint8)
        b[2:5, 2:5] = 1
        b[10:14, 10:14] = 1
        regions = connected_components(b, 8)
        assert len(regions) == 2
        prompts = [synth_prompts(r, b, m, mask_hw=(16, 16)) for r in regions]
        plane = refine_class(regions, prompts, _BoxDecoder(), m)
        assert (plane[2:5, 2:5] == 1.0).all()
        assert (plane[10:14, 10:14] == 1.0).all()
        assert plane[0, 0] == 0.0

    def test_mismatched_lists_rejected(self):
        with pytest.raises(ValidationError):
            refine_class([], [PromptSet((0, 0, 1), (0, 0, 1, 1), np.zeros((2, 2)))],
                         StubDecoder(), np.zeros((2, 2), dtype=np.float32))


class TestFuseRefined:
    def test_all_fallback_equals_unrefined(self):
        scores = random_scores(6, 7, 3, seed=11)
        labels = labels_from_scores(scores.scores)
        planes = {k: scores.plane(k) for k in np.unique(labels)}
        fused = fuse_refined(planes, scores)
        assert np.array_equal(fused.labels, labels)

    def test_absent_class_plane_zero(self):
        scores = random_scores(4, 4, 3, seed=2)
        fused = fuse_refined({}, scores)
        assert (fused.labels == 0).all()

    def test_boost_grows_only_where_it_wins(self):
        h = w = 4
        s = np.zeros((h, w, 2), dtype=np.float32)
        s[:, :, 0] = 0.6
        s[:, :, 1] = 0.4
        scores = ClassScoreMap(s)
        boosted = np.full((h, w), 0.5, dtype=np.float32)
        boosted[0, 0] = 0.7
        fused = fuse_refined({0: s[:, :, 0], 1: boosted}, scores)
        assert fused.labels[0, 0] == 1
        assert (fused.labels.reshape(-1)[1:] == 0).all()

    def test_single_class_unchanged(self):
        s = np.ones((3, 3, 1), dtype=np.float32)
        scores = ClassScoreMap(s)
        fused = fuse_refined({0: s[:, :, 0]}, scores)
        assert (fused.labels == 0).all()

    def test_bad_plane_shape(self):
        scores = random_scores(4, 4, 2, seed=1)
        with pytest.raises(ShapeError):
            fuse_refined({0: np.zeros((2, 2), dtype=np.float32)}, scores)
        with pytest.raises(ValidationError):
            fuse_refined({5: np.zeros((4, 4), dtype=np.float32)}, scores)


class TestRefineSegmentation:
    def test_identity_stub_alpha_one_preserves_argmax(self):
        scores = random_scores(32, 32, 3, seed=5)
        seg = SegmentationMap(labels_from_scores(scores.scores), 3)
        refined, stats = refine_segmentation(
            seg, scores, StubDecoder(), alpha=1.0, mask_hw=(32, 32)
        )
        assert np.array_equal(refined.labels, seg.labels)
        assert stats["fallbacks"] == 0
        assert stats["requests"] == stats["regions"] > 0

    def test_failing_decoder_full_fallback(self):
        scores = random_scores(16, 16, 2, seed=6)
        seg = SegmentationMap(labels_from_scores(scores.scores), 2)
        refined, stats = refine_segmentation(seg, scores, _FailingDecoder(), mask_hw=(16, 16))
        assert np.array_equal(refined.labels, seg.labels)
        assert stats["fallbacks"] == stats["classes"] > 0

    def test_skip_background(self):
        from trident.interchange import ClassVocabulary

        scores = random_scores(16, 16, 2, seed=7)
        vocab = ClassVocabulary(("background", "thing"), background_index=0)
        seg = SegmentationMap(labels_from_scores(scores.scores), 2, vocab)
        _, stats = refine_segmentation(
            seg, scores, StubDecoder(), skip_background=True, mask_hw=(16, 16)
        )
        assert stats["skipped"] == [0]

    def test_min_area_filters_specks(self):
        s = np.zeros((8, 8, 2), dtype=np.float32)
        s[:, :, 0] = 1.0
        s[0, 0, 0] = 0.0
        s[0, 0, 1] = 1.0  # single-pixel region of class 1
        scores = ClassScoreMap(s)
        seg = SegmentationMap(labels_from_scores(s), 2)
        _, stats = refine_segmentation(
            seg, scores, StubDecoder(), min_area=2, mask_hw=(8, 8)
        )
        # the speck was dropped: class 1 contributed no regions
        assert stats["regions"] == 1  # only class 0's big region

    def test_grid_mismatch(self):
        scores = random_scores(4, 4, 2, seed=3)
        seg = SegmentationMap(np.zeros((5, 5), dtype=np.int64), 2)
        with pytest.raises(ShapeError):
            refine_segmentation(seg, scores, StubDecoder())


SERVER_OK = textwrap.dedent(
    """
    import json, sys
    import numpy as np
    from trident.interchange import read_tensor, write_tensor
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        req = json.loads(line)
        m = read_tensor(req["mask_ref"])
        out = req["mask_ref"] + ".resp.trdt"
        write_tensor(np.clip(m, 0.0, 1.0).astype(np.float32), out)
        print(json.dumps({"id": req["id"], "mask_ref": out}), flush=True)
    """
)

SERVER_NOISY = textwrap.dedent(
    """
    import json, sys
    import numpy as np
    from trident.interchange import read_tensor, write_tensor
    for line in sys.stdin:
        req = json.loads(line.strip())
        m = read_tensor(req["mask_ref"])
        out = req["mask_ref"] + ".resp.trdt"
        write_tensor(np.clip(m, 0.0, 1.0).astype(np.float32), out)
        print(json.dumps({"id": 777000 + req["id"], "error": "stray"}), flush=True)
        print(json.dumps({"id": req["id"], "mask_ref": out}), flush=True)
    """
)

SERVER_ERROR = textwrap.dedent(
    """
    import json, sys
    for line in sys.stdin:
        req = json.loads(line.strip())
        print(json.dumps({"id": req["id"], "error": "no such image"}), flush=True)
    """
)


def _server_cmd(tmp_path, code, name):
    script = tmp_path / name
    script.write_text(code)
    return f"{sys.executable} {script}"


class TestSubprocessDecoder:
    def _prompts(self):
        b = np.ones((8, 8), dtype=np.uint8)
        m = np.random.default_rng(0).random((8, 8)).astype(np.float32)
        region = connected_components(b, 8)[0]
        return synth_prompts(region, b, m, mask_hw=(8, 8))

    def test_round_trip(self, tmp_path):
        ps = self._prompts()
        with SubprocessDecoder(_server_cmd(tmp_path, SERVER_OK, "ok.py")) as dec:
            out = dec.request("img0", ps)
            again = dec.request("img0", ps)
        assert np.array_equal(out, np.clip(ps.mask, 0, 1))
        assert np.array_equal(out, again)

    def test_buffers_unrelated_ids(self, tmp_path):
        ps = self._prompts()
        with SubprocessDecoder(_server_cmd(tmp_path, SERVER_NOISY, "noisy.py")) as dec:
            out = dec.request("img0", ps)
        assert np.array_equal(out, np.clip(ps.mask, 0, 1))

    def test_error_response_raises(self, tmp_path):
        ps = self._prompts()
        with SubprocessDecoder(_server_cmd(tmp_path, SERVER_ERROR, "err.py")) as dec:
            with pytest.raises(DecoderError, match="no such image"):
                dec.request("img0", ps)

    def test_dead_process_raises(self, tmp_path):
        ps = self._prompts()
        with SubprocessDecoder(f"{sys.executable} -c 'pass'") as dec:
            with pytest.raises(DecoderError, match="ended"):
                dec.request("img0", ps)

    def test_bad_command_raises(self):
        with pytest.raises(DecoderError):
            SubprocessDecoder("/nonexistent/decoder-binary")

    def test_empty_command_raises(self):
        with pytest.raises(DecoderError, match="empty"):
            SubprocessDecoder("")
