"""Command-line front door: bundle export and the decoder service."""
from __future__ import annotations

import argparse
import logging
import sys

from trident.errors import TridentError

from .decoder_service import serve_decoder
from .errors import ExporterError
from .export import ExportJob, export_bundle, load_models


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trident-export",
        description="Export segmentation bundles from model checkpoints and serve mask decoding",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    exp = sub.add_parser("export", help="write one bundle per image")
    exp.add_argument("--images", nargs="+", required=True, help="input image paths")
    exp.add_argument("--preset", required=True, help="benchmark preset name")
    exp.add_argument("--clip", required=True, help="CLIP checkpoint path or id")
    exp.add_argument("--dino", required=True, help="guidance ViT checkpoint path or id")
    exp.add_argument("--sam", required=True, help="dense encoder checkpoint path or id")
    exp.add_argument("--classes", required=True, help="comma-separated class names")
    exp.add_argument("--out", required=True, help="directory receiving bundle subdirectories")
    exp.add_argument("--seed", type=int, default=0)
    exp.add_argument("--device", default="auto", help="auto, cpu, or cuda[:N]")

    srv = sub.add_parser("serve-decoder", help="decode prompt requests over stdin/stdout")
    srv.add_argument("--sam", required=True, help="dense encoder checkpoint path or id")
    srv.add_argument("--cache-dir", default=None, help="persist image embeddings here")
    srv.add_argument("--device", default="auto")
    return parser


def cmd_export(args) -> int:
    classes = tuple(c.strip() for c in args.classes.split(",") if c.strip())
    models = load_models(args.clip, args.dino, args.sam, args.device)
    for image in args.images:
        job = ExportJob(
            image=image,
            preset=args.preset,
            clip=args.clip,
            dino=args.dino,
            sam=args.sam,
            classes=classes,
            out_dir=args.out,
            seed=args.seed,
            device=args.device,
        )
        print(export_bundle(job, models=models))
    return 0


def cmd_serve(args) -> int:
    serve_decoder(args.sam, device=args.device, cache_dir=args.cache_dir)
    return 0


def main(argv=None) -> int:
    # stdout stays clean: it is the protocol channel under serve-decoder
    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export":
            return cmd_export(args)
        return cmd_serve(args)
    except (ExporterError, TridentError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
