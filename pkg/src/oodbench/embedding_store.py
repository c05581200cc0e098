"""Portable storage for pre-extracted image/text features and dataset manifests.

The binary container decouples the scoring engine from any model runtime:
any extractor that can emit per-image global features, per-image local
feature maps, and per-class text features in a shared space can produce it.

File layout (little-endian throughout):

    magic "GLMC"                      4 bytes
    format version                    u32 (currently 1)
    K, C, image count                 u32 each
    K class names                     u32 byte length + UTF-8 payload each
    text matrix                       K*C float32, row-major
    per image:
        image_id                      u32 byte length + UTF-8 payload
        H, W                          u16 each
        global vector                 C float32
        local matrix                  H*W rows * C float32, row-major over the (H, W) grid
    meta entries                      u32 count, then per entry a length-prefixed
                                      UTF-8 key and value (written in sorted key order)

Features are stored unnormalized; cosine normalization happens at scoring
time. In memory, tensors are float64; the container stores single
precision, so writing is exact whenever the values are single-precision
representable (true for everything `read_embedding_set` returns) and
quantizes otherwise. Manifests are header-less UTF-8 CSV:
image_id,split,dataset_name,categories with categories a '|'-separated
class list, possibly empty.

Loaded sets are read-only and safe to share across evaluation workers.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import BinaryIO, Iterable, TextIO

import numpy as np

from .errors import FormatError, ManifestParseError, TruncationError, ValidationError

MAGIC = b"GLMC"
FORMAT_VERSION = 1


def _as_float_matrix(value, field_name: str) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(value, dtype=np.float64))
    if arr.ndim != 2:
        raise ValidationError(f"{field_name}: expected a 2-D matrix, got ndim={arr.ndim}")
    return arr


def _as_float_vector(value, field_name: str) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(value, dtype=np.float64))
    if arr.ndim != 1:
        raise ValidationError(f"{field_name}: expected a 1-D vector, got ndim={arr.ndim}")
    return arr


def _check_rows(arr: np.ndarray, field_name: str) -> None:
    """Every row must be finite and nonzero so cosine similarity is defined."""
    if not np.isfinite(arr).all():
        raise ValidationError(f"{field_name}: non-finite value")
    rows = arr.reshape(-1, arr.shape[-1]) if arr.ndim == 2 else arr.reshape(1, -1)
    if (np.abs(rows).max(axis=1) == 0.0).any():
        raise ValidationError(f"{field_name}: zero vector")


@dataclass(frozen=True, eq=False)
class ClassVocabulary:
    """Ordered class names; the ordering is the canonical class index downstream."""

    classes: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if len(self.classes) < 1:
            raise ValidationError("vocabulary.classes: must contain at least one class")
        if any(not c for c in self.classes):
            raise ValidationError("vocabulary.classes: empty class name")
        if len(set(self.classes)) != len(self.classes):
            raise ValidationError("vocabulary.classes: duplicate class name")

    def __len__(self) -> int:
        return len(self.classes)

    def index(self, name: str) -> int:
        return self.classes.index(name)

    def __eq__(self, other) -> bool:
        return isinstance(other, ClassVocabulary) and self.classes == other.classes


@dataclass(frozen=True, eq=False)
class TextFeatures:
    """Per-class text features: one row per vocabulary class, in canonical order."""

    vocabulary: ClassVocabulary
    matrix: np.ndarray  # K x C float64

    def __post_init__(self):
        object.__setattr__(self, "matrix", _as_float_matrix(self.matrix, "text.matrix"))
        self.validate()

    def validate(self) -> None:
        if self.matrix.shape[0] != len(self.vocabulary):
            raise ValidationError(
                f"text.matrix: {self.matrix.shape[0]} rows for {len(self.vocabulary)} classes"
            )
        _check_rows(self.matrix, "text.matrix")

    @property
    def k(self) -> int:
        return self.matrix.shape[0]

    @property
    def c(self) -> int:
        return self.matrix.shape[1]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TextFeatures)
            and self.vocabulary == other.vocabulary
            and np.array_equal(self.matrix, other.matrix)
        )


@dataclass(frozen=True, eq=False)
class ImageFeatures:
    """One image: a global feature plus a row-major (H, W) grid of local features."""

    image_id: str
    global_: np.ndarray  # (C,)
    local: np.ndarray  # (H*W, C), row-major over the grid
    grid: tuple[int, int]  # (H, W)

    def __post_init__(self):
        object.__setattr__(self, "global_", _as_float_vector(self.global_, f"image '{self.image_id}'.global"))
        object.__setattr__(self, "local", _as_float_matrix(self.local, f"image '{self.image_id}'.local"))
        object.__setattr__(self, "grid", (int(self.grid[0]), int(self.grid[1])))
        self.validate()

    def validate(self) -> None:
        name = f"image '{self.image_id}'"
        if not self.image_id:
            raise ValidationError("image_id: empty")
        h, w = self.grid
        if h < 1 or w < 1:
            raise ValidationError(f"{name}.grid: dimensions must be positive, got ({h}, {w})")
        if self.local.shape[0] != h * w:
            raise ValidationError(f"{name}.local: {self.local.shape[0]} rows for grid {h}x{w}")
        if self.local.shape[1] != self.global_.shape[0]:
            raise ValidationError(f"{name}.local: row width {self.local.shape[1]} != global width {self.global_.shape[0]}")
        _check_rows(self.global_, f"{name}.global")
        _check_rows(self.local, f"{name}.local")

    @property
    def c(self) -> int:
        return self.global_.shape[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ImageFeatures)
            and self.image_id == other.image_id
            and self.grid == other.grid
            and np.array_equal(self.global_, other.global_)
            and np.array_equal(self.local, other.local)
        )


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """Text features plus image features sharing one space, with free-form metadata."""

    text: TextFeatures
    images: tuple[ImageFeatures, ...]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "meta", dict(self.meta))
        self.validate()

    def validate(self) -> None:
        self.text.validate()
        seen: set[str] = set()
        for image in self.images:
            image.validate()
            if image.image_id in seen:
                raise ValidationError(f"images: duplicate image_id '{image.image_id}'")
            seen.add(image.image_id)
            if image.c != self.text.c:
                raise ValidationError(
                    f"image '{image.image_id}': feature width {image.c} != text width {self.text.c}"
                )
        for key, value in self.meta.items():
            if not isinstance(key, str) or not isinstance(value, str):
                raise ValidationError(f"meta: non-string entry {key!r}")

    def image_ids(self) -> list[str]:
        return [img.image_id for img in self.images]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EmbeddingSet)
            and self.text == other.text
            and self.images == other.images
            and self.meta == other.meta
        )


class Split(Enum):
    ID = "ID"
    OOD = "OOD"


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    split: Split
    dataset_name: str
    categories: tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    """Ground-truth ID/OOD labels, with optional per-image category lists."""

    entries: tuple[ManifestEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        seen: set[str] = set()
        for entry in self.entries:
            if entry.image_id in seen:
                raise ValidationError(f"manifest: duplicate image_id '{entry.image_id}'")
            seen.add(entry.image_id)

    def __len__(self) -> int:
        return len(self.entries)

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.image_id: e for e in self.entries}

    def __eq__(self, other) -> bool:
        return isinstance(other, DatasetManifest) and self.entries == other.entries


# ---------------------------------------------------------------------------
# Binary container I/O
# ---------------------------------------------------------------------------

def _write_u32(sink: BinaryIO, value: int) -> None:
    sink.write(struct.pack("<I", value))


def _write_u16(sink: BinaryIO, value: int) -> None:
    if not 0 <= value <= 0xFFFF:
        raise ValidationError(f"grid dimension {value} does not fit in u16")
    sink.write(struct.pack("<H", value))


def _write_str(sink: BinaryIO, text: str) -> None:
    data = text.encode("utf-8")
    _write_u32(sink, len(data))
    sink.write(data)


def write_embedding_set(embedding_set: EmbeddingSet, destination) -> None:
    """Serialize a validated set to `destination` (path or binary sink).

    Re-validates before writing so post-construction mutation of the arrays
    cannot produce a corrupt file. Writing is deterministic: equal sets
    produce bit-identical files.
    """
    embedding_set.validate()
    if isinstance(destination, (str, Path)):
        with open(destination, "wb") as sink:
            _write_payload(embedding_set, sink)
    else:
        _write_payload(embedding_set, destination)


def _write_payload(embedding_set: EmbeddingSet, sink: BinaryIO) -> None:
    text = embedding_set.text
    sink.write(MAGIC)
    _write_u32(sink, FORMAT_VERSION)
    _write_u32(sink, text.k)
    _write_u32(sink, text.c)
    _write_u32(sink, len(embedding_set.images))
    for name in text.vocabulary.classes:
        _write_str(sink, name)
    sink.write(text.matrix.astype("<f4", copy=False).tobytes())
    for image in embedding_set.images:
        _write_str(sink, image.image_id)
        h, w = image.grid
        _write_u16(sink, h)
        _write_u16(sink, w)
        sink.write(image.global_.astype("<f4", copy=False).tobytes())
        sink.write(image.local.astype("<f4", copy=False).tobytes())
    _write_u32(sink, len(embedding_set.meta))
    for key in sorted(embedding_set.meta):
        _write_str(sink, key)
        _write_str(sink, embedding_set.meta[key])


class _Reader:
    def __init__(self, source: BinaryIO):
        self._source = source

    def read_exact(self, n: int, what: str) -> bytes:
        data = self._source.read(n)
        if len(data) != n:
            raise TruncationError(what, expected=n, actual=len(data))
        return data

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.read_exact(4, what))[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.read_exact(2, what))[0]

    def string(self, what: str) -> str:
        length = self.u32(f"{what} length")
        data = self.read_exact(length, what)
        try:
            return data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{what}: invalid UTF-8") from exc

    def matrix(self, rows: int, cols: int, what: str) -> np.ndarray:
        data = self.read_exact(rows * cols * 4, what)
        return np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(rows, cols)

    def vector(self, length: int, what: str) -> np.ndarray:
        data = self.read_exact(length * 4, what)
        return np.frombuffer(data, dtype="<f4").astype(np.float64)


def read_embedding_set(source) -> EmbeddingSet:
    """Parse and validate an embedding file from `source` (path or binary stream)."""
    if isinstance(source, (str, Path)):
        with open(source, "rb") as stream:
            return _read_payload(stream)
    return _read_payload(source)


def _read_payload(stream: BinaryIO) -> EmbeddingSet:
    reader = _Reader(stream)
    magic = reader.read_exact(len(MAGIC), "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = reader.u32("format version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    k = reader.u32("class count")
    c = reader.u32("feature width")
    n_images = reader.u32("image count")
    classes = [reader.string(f"class name {i}") for i in range(k)]
    text = TextFeatures(ClassVocabulary(tuple(classes)), reader.matrix(k, c, "text matrix"))
    images = []
    for i in range(n_images):
        image_id = reader.string(f"image {i} id")
        h = reader.u16(f"image {i} grid height")
        w = reader.u16(f"image {i} grid width")
        global_ = reader.vector(c, f"image '{image_id}' global vector")
        local = reader.matrix(h * w, c, f"image '{image_id}' local matrix")
        images.append(ImageFeatures(image_id, global_, local, (h, w)))
    n_meta = reader.u32("meta count")
    meta = {}
    for i in range(n_meta):
        key = reader.string(f"meta key {i}")
        meta[key] = reader.string(f"meta value {i}")
    trailing = stream.read(1)
    if trailing:
        raise FormatError("trailing bytes after meta section")
    return EmbeddingSet(text, tuple(images), meta)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def read_manifest(source) -> DatasetManifest:
    """Parse a header-less CSV manifest from a path or an open text stream."""
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8", newline="") as stream:
            return _parse_manifest(stream)
    return _parse_manifest(source)


def _parse_manifest(stream: TextIO) -> DatasetManifest:
    entries = []
    for line_no, row in enumerate(csv.reader(stream), start=1):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 4:
            raise ManifestParseError(line_no, f"expected 4 fields, got {len(row)}")
        image_id, split_token, dataset_name, categories_field = (f.strip() for f in row)
        if not image_id:
            raise ManifestParseError(line_no, "empty image_id")
        try:
            split = Split(split_token)
        except ValueError:
            raise ManifestParseError(line_no, f"unknown split token '{split_token}'") from None
        categories = tuple(c.strip() for c in categories_field.split("|") if c.strip())
        entries.append(ManifestEntry(image_id, split, dataset_name, categories))
    return DatasetManifest(tuple(entries))


def write_manifest(manifest: DatasetManifest, destination) -> None:
    """Inverse of read_manifest; useful for exporting fixtures."""
    def emit(stream: TextIO) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        for e in manifest.entries:
            writer.writerow([e.image_id, e.split.value, e.dataset_name, "|".join(e.categories)])

    if isinstance(destination, (str, Path)):
        with open(destination, "w", encoding="utf-8", newline="") as stream:
            emit(stream)
    else:
        emit(destination)


# ---------------------------------------------------------------------------
# Join
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JoinedRow:
    features: ImageFeatures
    entry: ManifestEntry


@dataclass(frozen=True)
class JoinedTable:
    """Inner join of features and labels, in canonical (sorted image_id) order."""

    rows: tuple[JoinedRow, ...]
    n_unlabeled_features: int
    n_missing_features: int

    def __len__(self) -> int:
        return len(self.rows)

    def split_rows(self, split: Split) -> list[JoinedRow]:
        return [r for r in self.rows if r.entry.split is split]


def join(embedding_set: EmbeddingSet, manifest: DatasetManifest) -> JoinedTable:
    """Inner-join features with manifest labels on image_id.

    Raises ValidationError when the intersection is empty or a manifest
    category is not in the set's vocabulary. Counts of unmatched rows on
    either side are reported on the result, not raised.
    """
    known = set(embedding_set.text.vocabulary.classes)
    by_id = manifest.by_id()
    rows = []
    for image in embedding_set.images:
        entry = by_id.get(image.image_id)
        if entry is None:
            continue
        for category in entry.categories:
            if category not in known:
                raise ValidationError(
                    f"manifest entry '{entry.image_id}': category '{category}' not in vocabulary"
                )
        rows.append(JoinedRow(image, entry))
    if not rows:
        raise ValidationError("join: no image_id appears in both the embedding set and the manifest")
    rows.sort(key=lambda r: r.features.image_id)
    feature_ids = set(embedding_set.image_ids())
    n_unlabeled = len(feature_ids - set(by_id))
    n_missing = len(set(by_id) - feature_ids)
    return JoinedTable(tuple(rows), n_unlabeled_features=n_unlabeled, n_missing_features=n_missing)
