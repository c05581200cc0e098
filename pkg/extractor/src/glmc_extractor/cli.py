"""Command line: embed a manifest's images into a .glmc container."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .backbones import load_backbone
from .container import ContainerError
from .pipeline import ExtractionError, PromptTemplate, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glmc-extract",
        description="Embed images with a vision-language backbone into a .glmc container",
    )
    parser.add_argument("--images", required=True, help="directory holding the image files")
    parser.add_argument("--manifest", required=True, help="CSV manifest naming the images to embed")
    parser.add_argument("--backbone", default="tiny-resnet",
                        help="backbone name (tiny-resnet, tiny-vit, hf-clip-vit-base-patch16)")
    parser.add_argument("--template", default="a photo of a [CLASS]",
                        help="prompt template with one [CLASS] placeholder")
    parser.add_argument("--out", required=True, help="output .glmc path")
    parser.add_argument("--batch-size", type=int, default=16, help="inference batch size")
    parser.add_argument("--classes", help="file with one class name per line; "
                                          "defaults to the manifest's category union")
    return parser


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        classes = None
        if args.classes:
            lines = Path(args.classes).read_text(encoding="utf-8").splitlines()
            classes = [line.strip() for line in lines if line.strip()]
        backbone = load_backbone(args.backbone)
        summary = export(
            backbone,
            images_dir=args.images,
            manifest_path=args.manifest,
            out_path=args.out,
            classes=classes,
            template=PromptTemplate(args.template),
            batch_size=args.batch_size,
        )
    except (ExtractionError, ContainerError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(
        f"{summary.out_path}: {summary.n_images} images, {summary.n_classes} classes, "
        f"width {summary.feature_width}"
    )
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))
