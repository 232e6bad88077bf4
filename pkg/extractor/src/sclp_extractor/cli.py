"""Command line for the one-shot feature extraction tool."""

from __future__ import annotations

import argparse
import sys

from .backbone import BackboneUnavailableError, TokenizerOverflowError
from .extract import DEFAULT_LAYERS, ExtractError, ExtractJob, embed_prompt_list, extract_image_features


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sclp-extract")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", required=True, help="output root for SCLP files")
        p.add_argument("--backbone", default="vit-l-14-336")
        p.add_argument("--checkpoint", default=None, help="local weight file for real backbones")

    p = sub.add_parser("images", help="extract multi-level patch grids and CLS vectors")
    common(p)
    p.add_argument("--manifest", default=None, help="dataset manifest JSON naming ids and feature paths")
    p.add_argument("--images-root", default=None, help="directory the manifest image ids resolve under")
    p.add_argument("--list", dest="image_list", default=None, help="newline-delimited image paths")
    p.add_argument("--resize", type=int, default=518)
    p.add_argument("--layers", type=int, nargs="+", default=list(DEFAULT_LAYERS))

    p = sub.add_parser("prompts", help="embed a key/channel/prompt list")
    common(p)
    p.add_argument("--list", dest="prompt_list", required=True)
    p.add_argument("--output-file", default=None, help="defaults to <out>/text_features.sclp")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "images":
            job = ExtractJob(
                output_root=args.out,
                backbone_id=args.backbone,
                checkpoint=args.checkpoint,
                resize=args.resize,
                layers=tuple(args.layers),
                manifest_path=args.manifest,
                images_root=args.images_root,
                image_list=args.image_list,
            )
            summary = extract_image_features(job)
            print(f"extracted {summary['count']} images at grid {summary['grid']} -> {args.out}")
        else:
            job = ExtractJob(
                output_root=args.out,
                backbone_id=args.backbone,
                checkpoint=args.checkpoint,
                prompt_list=args.prompt_list,
            )
            summary = embed_prompt_list(job, out_path=args.output_file)
            print(f"embedded {summary['count']} prompt keys -> {args.out}")
        return 0
    except (ExtractError, BackboneUnavailableError, TokenizerOverflowError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
