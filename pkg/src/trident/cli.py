"""Operator entry point.

Subcommands:

* ``segment``      run one paradigm over bundles, write masks + scores + logs
* ``compare``      run both paradigms on the same bundles, report the gap
* ``selfcheck``    generate synthetic fixtures and verify the invariant suite
* ``synth``        write a synthetic bundle to disk
* ``decoder-stub`` JSON-lines decoder that echoes the mask prompt (clamped)

Exit codes: 0 success, 1 selfcheck property failure, 2 validation or
configuration failure, 3 decoder failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import struct
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .correlation import hybrid_affinity
from .errors import ConfigError, DecoderError, TridentError, ValidationError
from .interchange import (
    default_palette,
    load_bundle,
    read_label_png,
    read_tensor,
    write_segmentation,
    write_tensor,
)
from .metrics import ConfusionMatrix, miou, seam_disagreement_rate
from .numerics import cosine_matrix, softmax_rows
from .pipeline import (
    CORR_CHOICES,
    PARADIGMS,
    PipelineOptions,
    run_paradigm,
)
from .presets import PRESET_NAMES, get_preset
from .refine import SubprocessDecoder, refine_segmentation
from .synth import SceneSpec, contrast_scene, generate_bundle
from .tiling import plan_windows

log = logging.getLogger(__name__)

DECODER_CMD_ENV = "TRIDENT_DECODER_CMD"


@dataclass(frozen=True)
class RunConfig:
    """One segmentation run, fully specified.

    Geometry comes from a preset name or an explicit triple, never both.
    With neither, each bundle's own layout is accepted as-is.
    """

    preset: str | None = None
    shorter_side: int | None = None
    window: int | None = None
    stride: int | None = None
    paradigm: str = "trident"
    corr: str = "affinity"
    epsilon: float = 0.0
    alpha: float = 0.005
    refine: bool = False
    decoder_cmd: str | None = None
    deterministic: bool = False
    workers: int = 1
    out: str | None = None

    def __post_init__(self):
        self.options()  # paradigm / corr / epsilon / alpha range checks
        explicit = (self.shorter_side, self.window, self.stride)
        given = [v for v in explicit if v is not None]
        if given and len(given) != 3:
            raise ConfigError(
                "explicit geometry needs all of shorter_side, window, stride"
            )
        if given and self.preset is not None:
            raise ConfigError("give a preset or explicit geometry, not both")
        if self.preset is not None:
            get_preset(self.preset)
        if given:
            short, window, stride = explicit
            if min(given) < 1:
                raise ConfigError("geometry values must be positive")
            if stride > window:
                raise ConfigError(f"stride {stride} exceeds window {window}")
            if window > short:
                raise ConfigError(f"window {window} exceeds shorter side {short}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")

    def options(self) -> PipelineOptions:
        return PipelineOptions(
            paradigm=self.paradigm,
            corr=self.corr,
            epsilon=self.epsilon,
            alpha=self.alpha,
        )

    def geometry(self) -> tuple[int, int, int] | None:
        """(shorter_side, window, stride) to enforce, or None for any."""
        if self.preset is not None:
            p = get_preset(self.preset)
            return (p.short_side, p.window, p.stride)
        if self.window is not None:
            return (self.shorter_side, self.window, self.stride)
        return None


_CONFIG_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def load_config_file(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(data) - _CONFIG_FIELDS)
    if unknown:
        raise ConfigError(f"config file {path}: unknown keys {unknown}")
    return data


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Flags beat the config file; the file beats built-in defaults."""
    merged: dict = {}
    if getattr(args, "config", None):
        merged.update(load_config_file(args.config))
    for name in _CONFIG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    try:
        return RunConfig(**merged)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def _check_layout(bundle, config: RunConfig, where: str) -> None:
    geo = config.geometry()
    if geo is None:
        return
    short, window, stride = geo
    if bundle.layout.window != window or bundle.layout.stride != stride:
        raise ConfigError(
            f"{where}: bundle layout {bundle.layout.window}/{bundle.layout.stride} "
            f"does not match configured {window}/{stride}"
        )
    if min(bundle.image_hw) != short:
        log.warning(
            "%s: shorter side %d differs from configured %d", where,
            min(bundle.image_hw), short,
        )


def _load_bundles(bundle_paths, config: RunConfig):
    named = []
    seen = set()
    for p in bundle_paths:
        bundle = load_bundle(p)
        _check_layout(bundle, config, str(p))
        name = Path(p).name
        if name in seen:
            raise ConfigError(f"duplicate bundle name '{name}' would collide in --out")
        seen.add(name)
        named.append((name, bundle))
    return named


def _bundle_miou(bundle, labels) -> float | None:
    if bundle.ground_truth is None:
        return None
    gt = read_label_png(bundle.ground_truth)
    return miou(ConfusionMatrix(bundle.num_classes).add(labels, gt))


def cmd_segment(config: RunConfig, bundle_paths: list[str]) -> int:
    if config.out is None:
        raise ConfigError("segment needs --out for its masks and logs")
    options = config.options()
    decoder = None
    if config.refine:
        cmd = config.decoder_cmd or os.environ.get(DECODER_CMD_ENV)
        if not cmd:
            raise DecoderError(
                "refinement needs a decoder: pass --decoder-cmd or set "
                f"{DECODER_CMD_ENV} (the built-in stub is "
                f"'{sys.executable} -m trident.cli decoder-stub')"
            )
        decoder = SubprocessDecoder(cmd)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    named = _load_bundles(bundle_paths, config)
    # the decoder pipe is serialized, so refinement runs single-worker
    workers = 1 if (config.deterministic or decoder is not None) else config.workers

    def one(item):
        name, bundle = item
        t0 = time.perf_counter()
        seg, score = run_paradigm(bundle, options)
        refine_stats = None
        if decoder is not None:
            seg, refine_stats = refine_segmentation(
                seg, score, decoder, alpha=config.alpha, image_ref=bundle.image_ref
            )
        record = {
            "bundle": name,
            "paradigm": options.paradigm,
            "correlation": options.corr,
            "epsilon": options.epsilon,
            "windows": bundle.num_windows,
            "image_hw": list(bundle.image_hw),
            "seconds": None if config.deterministic
            else round(time.perf_counter() - t0, 4),
            "miou": _bundle_miou(bundle, seg.labels),
            "refine": refine_stats,
        }
        write_segmentation(
            seg.labels, default_palette(bundle.num_classes), out / f"{name}.png"
        )
        write_tensor(score.scores, out / f"{name}.scores.trdt")
        (out / f"{name}.json").write_text(json.dumps(record, indent=2))
        return record

    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                records = list(pool.map(one, named))
        else:
            records = [one(item) for item in named]
    finally:
        if decoder is not None:
            decoder.close()
    for r in records:
        miou_s = "-" if r["miou"] is None else f"{r['miou']:.4f}"
        print(f"{r['bundle']}: windows={r['windows']} miou={miou_s}")
    print(f"wrote {len(records)} mask(s) to {out}")
    return 0


def cmd_compare(config: RunConfig, bundle_paths: list[str]) -> int:
    """Both paradigms on identical inputs; per-image quality and seam gap."""
    named = _load_bundles(bundle_paths, config)
    rows = []
    for name, bundle in named:
        base_opts = dataclasses.replace(config.options(), paradigm="baseline")
        base_seg, _ = run_paradigm(bundle, base_opts)
        row = {
            "bundle": name,
            "windows": bundle.num_windows,
            "baseline_miou": _bundle_miou(bundle, base_seg.labels),
            "baseline_seam": seam_disagreement_rate(base_seg.labels, bundle.layout),
            "trident_miou": None,
            "trident_seam": None,
            "miou_delta": None,
            "unavailable": None,
        }
        try:
            tri_opts = dataclasses.replace(config.options(), paradigm="trident")
            tri_seg, _ = run_paradigm(bundle, tri_opts)
        except ConfigError as e:
            row["unavailable"] = str(e)
        else:
            row["trident_miou"] = _bundle_miou(bundle, tri_seg.labels)
            row["trident_seam"] = seam_disagreement_rate(tri_seg.labels, bundle.layout)
            if row["baseline_miou"] is not None and row["trident_miou"] is not None:
                row["miou_delta"] = row["trident_miou"] - row["baseline_miou"]
        rows.append(row)

    def fmt(v, plus=False):
        if v is None:
            return "-"
        return f"{v:+.4f}" if plus else f"{v:.4f}"

    header = (
        f"{'bundle':<20} {'win':>4} {'base mIoU':>10} {'tri mIoU':>10} "
        f"{'delta':>8} {'base seam':>10} {'tri seam':>10}"
    )
    print(header)
    print("-" * len(header))
    for r in rows:
        if r["unavailable"] is not None:
            print(
                f"{r['bundle']:<20} {r['windows']:>4} {fmt(r['baseline_miou']):>10} "
                f"{'unavailable':>10} {'-':>8} {fmt(r['baseline_seam']):>10} {'-':>10}"
            )
        else:
            print(
                f"{r['bundle']:<20} {r['windows']:>4} {fmt(r['baseline_miou']):>10} "
                f"{fmt(r['trident_miou']):>10} {fmt(r['miou_delta'], plus=True):>8} "
                f"{fmt(r['baseline_seam']):>10} {fmt(r['trident_seam']):>10}"
            )
    deltas = [r["miou_delta"] for r in rows if r["miou_delta"] is not None]
    report = {
        "correlation": config.corr,
        "epsilon": config.epsilon,
        "images": rows,
        "mean_miou_delta": float(np.mean(deltas)) if deltas else None,
    }
    if deltas:
        print(f"mean mIoU delta (trident - baseline): {report['mean_miou_delta']:+.4f}")
    if config.out is not None:
        out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.json").write_text(json.dumps(report, indent=2))
        print(f"wrote {out / 'compare.json'}")
    return 0


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _selfcheck_properties(tmp: Path):
    """(name, thunk) pairs; a thunk raises to signal failure."""
    spec = SceneSpec(
        height=64,
        width=64,
        class_names=("left", "right"),
        rectangles=((1, 0, 32, 64, 64),),
        sigma_amb=0.0,
        seed=3,
    )
    layout = plan_windows(64, 64, 32, 16, 16)
    opts = PipelineOptions(epsilon=0.25)

    def bundle_roundtrip():
        generate_bundle(spec, layout, tmp / "clean")
        load_bundle(tmp / "clean")

    def reproducible_bytes():
        generate_bundle(spec, layout, tmp / "rep1")
        generate_bundle(spec, layout, tmp / "rep2")
        if _tree_digest(tmp / "rep1") != _tree_digest(tmp / "rep2"):
            raise AssertionError("same seed produced different bytes")

    def separable_miou():
        bundle = load_bundle(tmp / "clean")
        gt = read_label_png(bundle.ground_truth)
        for paradigm in PARADIGMS:
            seg, _ = run_paradigm(
                bundle, dataclasses.replace(opts, paradigm=paradigm)
            )
            m = miou(ConfusionMatrix(bundle.num_classes).add(seg.labels, gt))
            if m != 1.0:
                raise AssertionError(f"{paradigm} mIoU {m} on a separable scene")

    def contrast_margin():
        cspec, clayout = contrast_scene()
        bundle = generate_bundle(cspec, clayout, tmp / "contrast")
        gt = read_label_png(bundle.ground_truth)
        results = {}
        for paradigm in PARADIGMS:
            seg, _ = run_paradigm(
                bundle, dataclasses.replace(opts, paradigm=paradigm)
            )
            results[paradigm] = (
                miou(ConfusionMatrix(bundle.num_classes).add(seg.labels, gt)),
                seam_disagreement_rate(seg.labels, bundle.layout),
            )
        (bm, bs), (tm, ts) = results["baseline"], results["trident"]
        if not tm > bm:
            raise AssertionError(f"trident mIoU {tm} <= baseline {bm}")
        if not ts <= bs:
            raise AssertionError(f"trident seam rate {ts} > baseline {bs}")

    def affinity_row_stochastic():
        rng = np.random.default_rng(11)
        feats = rng.normal(size=(48, 8)).astype(np.float32)
        c = cosine_matrix(feats, feats)
        a = hybrid_affinity(softmax_rows(c), c, 0.3, (6, 8))
        sums = a.matrix.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-5:
            raise AssertionError("affinity rows do not sum to one")
        masked = (c < 0.3) & ~np.eye(48, dtype=bool)
        if a.matrix[masked].any():
            raise AssertionError("sub-threshold entries leaked into the affinity")

    def nan_rejected():
        d = tmp / "nan"
        generate_bundle(spec, layout, d)
        p = d / "sam_features.trdt"
        raw = bytearray(p.read_bytes())
        raw[-4:] = struct.pack("<f", float("nan"))
        p.write_bytes(bytes(raw))
        try:
            load_bundle(d)
        except TridentError:
            return
        raise AssertionError("NaN payload was accepted")

    def magic_rejected():
        d = tmp / "magic"
        generate_bundle(spec, layout, d)
        p = d / "win000_values.trdt"
        raw = bytearray(p.read_bytes())
        raw[0] ^= 0xFF
        p.write_bytes(bytes(raw))
        try:
            load_bundle(d)
        except TridentError:
            return
        raise AssertionError("corrupted magic bytes were accepted")

    return [
        ("bundle-roundtrip", bundle_roundtrip),
        ("reproducible-bytes", reproducible_bytes),
        ("separable-miou", separable_miou),
        ("contrast-margin", contrast_margin),
        ("affinity-row-stochastic", affinity_row_stochastic),
        ("nan-rejected", nan_rejected),
        ("magic-rejected", magic_rejected),
    ]


def cmd_selfcheck() -> int:
    failures = 0
    with tempfile.TemporaryDirectory(prefix="trident-selfcheck-") as td:
        for name, thunk in _selfcheck_properties(Path(td)):
            try:
                thunk()
            except Exception as e:
                print(f"FAIL {name}: {e}")
                failures += 1
            else:
                print(f"PASS {name}")
    if failures:
        print(f"{failures} propert{'y' if failures == 1 else 'ies'} failed")
        return 1
    print("all properties hold")
    return 0


def cmd_synth(scene: str, out: str, seed: int, sigma: float | None) -> int:
    if scene == "contrast":
        spec, layout = contrast_scene(
            sigma_amb=0.9 if sigma is None else sigma, seed=seed
        )
    else:
        spec = SceneSpec(
            height=128,
            width=128,
            class_names=("left", "right"),
            rectangles=((1, 0, 64, 128, 128),),
            sigma_amb=0.0 if sigma is None else sigma,
            seed=seed,
        )
        layout = plan_windows(128, 128, 64, 32, 16)
    bundle = generate_bundle(spec, layout, out)
    print(
        f"wrote bundle {out}: {bundle.num_windows} windows, "
        f"{bundle.num_classes} classes, seed {seed}"
    )
    return 0


def cmd_decoder_stub(stdin=None, stdout=None) -> int:
    """JSON-lines decoder: reply mask = prompt mask clamped to [0, 1].

    Never crashes on a malformed request; a reply carries either mask_ref
    or error, correlated by id when one was parseable.
    """
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        rid = None
        try:
            req = json.loads(line)
            if not isinstance(req, dict):
                raise ValidationError("request must be a JSON object")
            rid = req.get("id")
            ref = req.get("mask_ref")
            if not isinstance(ref, str):
                raise ValidationError("request lacks mask_ref")
            mask = read_tensor(ref)
            out_path = Path(ref).with_suffix(".resp.trdt")
            write_tensor(np.clip(mask, 0.0, 1.0).astype(np.float32), out_path)
            resp = {"id": rid, "mask_ref": str(out_path)}
        except Exception as e:
            resp = {"id": rid, "error": str(e) or type(e).__name__}
        print(json.dumps(resp), file=stdout, flush=True)
    return 0


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE",
                   help="JSON config file; explicit flags override its values")
    p.add_argument("--preset", choices=PRESET_NAMES)
    p.add_argument("--shorter-side", dest="shorter_side", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--paradigm", choices=PARADIGMS)
    p.add_argument("--corr", choices=CORR_CHOICES)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                   default=None)
    p.add_argument("--workers", type=int)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trident",
        description="Training-free open-vocabulary segmentation over tensor bundles",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    seg = sub.add_parser("segment", help="segment bundles, write masks and scores")
    _run_flags(seg)
    seg.add_argument("--refine", action=argparse.BooleanOptionalAction, default=None)
    seg.add_argument("--decoder-cmd", dest="decoder_cmd",
                     help=f"decoder command line (fallback: ${DECODER_CMD_ENV})")
    seg.add_argument("bundles", nargs="+")
    seg.set_defaults(func=lambda a: cmd_segment(resolve_config(a), a.bundles))

    cmp = sub.add_parser("compare", help="run both paradigms, report the gap")
    _run_flags(cmp)
    cmp.add_argument("bundles", nargs="+")
    cmp.set_defaults(func=lambda a: cmd_compare(resolve_config(a), a.bundles))

    chk = sub.add_parser("selfcheck", help="verify invariants on synthetic fixtures")
    chk.set_defaults(func=lambda a: cmd_selfcheck())

    syn = sub.add_parser("synth", help="write a synthetic bundle")
    syn.add_argument("--scene", choices=("contrast", "stripes"), default="contrast")
    syn.add_argument("--out", required=True)
    syn.add_argument("--seed", type=int, default=7)
    syn.add_argument("--sigma", type=float, default=None)
    syn.set_defaults(func=lambda a: cmd_synth(a.scene, a.out, a.seed, a.sigma))

    stub = sub.add_parser("decoder-stub", help="stdin/stdout JSON-lines decoder stub")
    stub.set_defaults(func=lambda a: cmd_decoder_stub())

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DecoderError as e:
        print(f"decoder error: {e}", file=sys.stderr)
        return 3
    except TridentError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
