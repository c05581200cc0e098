"""Writer for the .glmc embedding container and reader for dataset manifests.

The container layout (shared contract with the evaluation engine, little-
endian): magic "GLMC", format version u32=1, K u32, C u32, image count
u32; K class names (u32 byte length + UTF-8); K*C float32 text matrix,
row-major; per image: length-prefixed UTF-8 id, H u16, W u16, C float32
global vector, H*W x C float32 local matrix (row-major over the grid);
finally a meta block: u32 count of length-prefixed key/value pairs in
sorted key order. Writes are bit-deterministic for identical inputs.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

MAGIC = b"GLMC"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    """Invalid content handed to the container writer."""


@dataclass(frozen=True)
class ExportRecord:
    """One image's features, ready for serialization."""

    image_id: str
    global_feature: np.ndarray  # (C,)
    local_features: np.ndarray  # (H*W, C), row-major over the grid
    grid: tuple[int, int]


def _check_finite_rows(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise ContainerError(f"{what}: non-finite value")
    rows = arr if arr.ndim == 2 else arr[None, :]
    if (np.abs(rows).max(axis=1) == 0.0).any():
        raise ContainerError(f"{what}: zero row")


def _write_str(sink: BinaryIO, text: str) -> None:
    data = text.encode("utf-8")
    sink.write(struct.pack("<I", len(data)))
    sink.write(data)


def write_container(
    destination,
    classes: Sequence[str],
    text_matrix: np.ndarray,
    records: Sequence[ExportRecord],
    meta: dict[str, str],
) -> None:
    """Serialize features to `destination` (path or binary sink)."""
    text_matrix = np.asarray(text_matrix, dtype=np.float32)
    k, c = text_matrix.shape
    if k != len(classes) or k < 1:
        raise ContainerError(f"text matrix has {k} rows for {len(classes)} classes")
    if len(set(classes)) != len(classes) or any(not name for name in classes):
        raise ContainerError("class names must be unique and non-empty")
    _check_finite_rows(text_matrix, "text matrix")
    seen: set[str] = set()
    for record in records:
        if record.image_id in seen:
            raise ContainerError(f"duplicate image_id '{record.image_id}'")
        seen.add(record.image_id)
        h, w = record.grid
        if record.local_features.shape != (h * w, c) or record.global_feature.shape != (c,):
            raise ContainerError(f"image '{record.image_id}': inconsistent feature shapes")
        _check_finite_rows(record.global_feature, f"image '{record.image_id}' global")
        _check_finite_rows(record.local_features, f"image '{record.image_id}' local")

    if isinstance(destination, (str, Path)):
        with open(destination, "wb") as sink:
            _write(sink, classes, text_matrix, records, meta)
    else:
        _write(destination, classes, text_matrix, records, meta)


def _write(sink: BinaryIO, classes, text_matrix, records, meta) -> None:
    k, c = text_matrix.shape
    sink.write(MAGIC)
    sink.write(struct.pack("<IIII", FORMAT_VERSION, k, c, len(records)))
    for name in classes:
        _write_str(sink, name)
    sink.write(text_matrix.astype("<f4", copy=False).tobytes())
    for record in records:
        _write_str(sink, record.image_id)
        h, w = record.grid
        sink.write(struct.pack("<HH", h, w))
        sink.write(record.global_feature.astype("<f4", copy=False).tobytes())
        sink.write(record.local_features.astype("<f4", copy=False).tobytes())
    sink.write(struct.pack("<I", len(meta)))
    for key in sorted(meta):
        _write_str(sink, key)
        _write_str(sink, str(meta[key]))


@dataclass(frozen=True)
class ManifestRow:
    image_id: str
    split: str
    dataset_name: str
    categories: tuple[str, ...]


def read_manifest_rows(path) -> list[ManifestRow]:
    """Parse the header-less CSV manifest consumed by the evaluation engine."""
    rows = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8", newline="") as stream:
        for line_no, fields in enumerate(csv.reader(stream), start=1):
            if not fields or (len(fields) == 1 and not fields[0].strip()):
                continue
            if len(fields) != 4:
                raise ContainerError(f"{path}: line {line_no}: expected 4 fields, got {len(fields)}")
            image_id, split, dataset_name, categories = (f.strip() for f in fields)
            if split not in ("ID", "OOD"):
                raise ContainerError(f"{path}: line {line_no}: unknown split '{split}'")
            if image_id in seen:
                raise ContainerError(f"{path}: line {line_no}: duplicate image_id '{image_id}'")
            seen.add(image_id)
            rows.append(
                ManifestRow(image_id, split, dataset_name,
                            tuple(c.strip() for c in categories.split("|") if c.strip()))
            )
    return rows
