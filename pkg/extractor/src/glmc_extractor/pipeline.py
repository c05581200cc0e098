"""Extraction pipeline: prompts to text features, image files to containers."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from . import __version__
from .backbones import preprocessor
from .container import ExportRecord, read_manifest_rows, write_container

PLACEHOLDER = "[CLASS]"
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".bmp", ".webp")


class ExtractionError(RuntimeError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    """A prompt string with exactly one [CLASS] placeholder."""

    template: str = "a photo of a [CLASS]"

    def __post_init__(self):
        if self.template.count(PLACEHOLDER) != 1:
            raise ExtractionError(
                f"template must contain exactly one {PLACEHOLDER} placeholder: '{self.template}'"
            )

    def apply(self, class_name: str) -> str:
        return self.template.replace(PLACEHOLDER, class_name)


def encode_text(backbone, classes: Sequence[str], template: PromptTemplate) -> np.ndarray:
    """One text feature row per class, in the given class order."""
    if not classes:
        raise ExtractionError("class list is empty")
    return backbone.encode_text([template.apply(name) for name in classes])


def resolve_image_files(images_dir, image_ids: Sequence[str]) -> dict[str, Path]:
    """Map each image_id to a file under images_dir; error listing all misses."""
    images_dir = Path(images_dir)
    resolved: dict[str, Path] = {}
    missing = []
    for image_id in image_ids:
        candidates = [images_dir / image_id]
        candidates += [images_dir / f"{image_id}{ext}" for ext in IMAGE_EXTENSIONS]
        found = next((c for c in candidates if c.is_file()), None)
        if found is None:
            missing.append(image_id)
        else:
            resolved[image_id] = found
    if missing:
        raise ExtractionError(f"no image file for: {', '.join(sorted(missing))}")
    return resolved


def encode_image_files(backbone, files: dict[str, Path], batch_size: int = 16) -> list[ExportRecord]:
    """Run batched inference over image files, preserving the id order given."""
    if batch_size < 1:
        raise ExtractionError(f"batch size must be >= 1, got {batch_size}")
    preprocess = preprocessor(backbone)
    records: list[ExportRecord] = []
    ids = list(files)
    for start in range(0, len(ids), batch_size):
        chunk = ids[start : start + batch_size]
        tensors = []
        for image_id in chunk:
            with Image.open(files[image_id]) as image:
                tensors.append(preprocess(image.convert("RGB")))
        encodings = backbone.encode_images(torch.stack(tensors))
        for image_id, enc in zip(chunk, encodings):
            records.append(ExportRecord(image_id, enc.global_feature, enc.local_features, enc.grid))
    return records


@dataclass(frozen=True)
class ExportSummary:
    n_images: int
    n_classes: int
    feature_width: int
    out_path: Path


def export(
    backbone,
    images_dir,
    manifest_path,
    out_path,
    classes: Sequence[str] | None = None,
    template: PromptTemplate = PromptTemplate(),
    batch_size: int = 16,
) -> ExportSummary:
    """Embed every manifest image and write a .glmc container.

    `classes` defaults to the sorted union of the manifest's categories;
    exporting an OOD set for an existing benchmark should pass the ID
    vocabulary explicitly so all containers share one class list. A partial
    output file is removed if anything fails mid-export.
    """
    rows = read_manifest_rows(manifest_path)
    if not rows:
        raise ExtractionError(f"{manifest_path}: manifest lists no images")
    if classes is None:
        classes = sorted({category for row in rows for category in row.categories})
        if not classes:
            raise ExtractionError(
                "manifest has no categories to derive a class list from; pass classes explicitly"
            )
    files = resolve_image_files(images_dir, [row.image_id for row in rows])
    text_matrix = encode_text(backbone, classes, template)
    records = encode_image_files(backbone, files, batch_size=batch_size)
    meta = dict(backbone.meta())
    meta["template"] = template.template
    meta["extractor_version"] = __version__
    out_path = Path(out_path)
    try:
        write_container(out_path, classes, text_matrix, records, meta)
    except BaseException:
        out_path.unlink(missing_ok=True)
        raise
    return ExportSummary(len(records), len(classes), text_matrix.shape[1], out_path)
