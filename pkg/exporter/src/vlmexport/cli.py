"""Command-line export: image + instruction -> CAT1 attention file."""

from __future__ import annotations

import argparse
import json
import sys

from vlmexport.export import DEFAULT_LAYER, ExportRequest, export_attention


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vlmexport",
        description="export text-to-image decoder attention as a CAT1 file",
    )
    parser.add_argument("--checkpoint", required=True, help="local checkpoint directory")
    parser.add_argument("--image", required=True)
    parser.add_argument("--text", required=True, help='instruction, e.g. "detect the apple"')
    parser.add_argument("--layer", type=int, default=DEFAULT_LAYER)
    parser.add_argument("--out", required=True)
    parser.add_argument(
        "--build-tiny", action="store_true",
        help="first build a miniature random-weight checkpoint at --checkpoint",
    )
    return parser


def dispatch(argv: list[str]) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 2
    try:
        if args.build_tiny:
            from vlmexport.tinyzoo import build_tiny_checkpoint

            build_tiny_checkpoint(args.checkpoint)
        written = export_attention(
            ExportRequest(
                image_path=args.image,
                instruction=args.text,
                layer_index=args.layer,
                output_path=args.out,
            ),
            checkpoint=args.checkpoint,
        )
        print(json.dumps({"out": args.out, "bytes": written, "layer": args.layer}))
        return 0
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
