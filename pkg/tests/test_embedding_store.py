"""Container format, manifest parsing, and join semantics."""

import io
import struct

import numpy as np
import pytest

from oodbench import (
    ClassVocabulary,
    DatasetManifest,
    EmbeddingSet,
    FormatError,
    ImageFeatures,
    ManifestEntry,
    ManifestParseError,
    Split,
    TextFeatures,
    TruncationError,
    ValidationError,
    join,
    read_embedding_set,
    read_manifest,
    write_embedding_set,
    write_manifest,
)
from synth import make_image, make_text, random_embedding_set


def to_bytes(embedding_set):
    buf = io.BytesIO()
    write_embedding_set(embedding_set, buf)
    return buf.getvalue()


def from_bytes(data):
    return read_embedding_set(io.BytesIO(data))


# ---------------------------------------------------------------------------
# Type invariants
# ---------------------------------------------------------------------------

def test_vocabulary_rejects_empty_and_duplicates():
    with pytest.raises(ValidationError):
        ClassVocabulary(())
    with pytest.raises(ValidationError):
        ClassVocabulary(("cat", ""))
    with pytest.raises(ValidationError):
        ClassVocabulary(("cat", "cat"))


def test_text_features_reject_zero_row_and_nan():
    with pytest.raises(ValidationError):
        make_text([[0.0, 0.0], [1.0, 0.0]])
    with pytest.raises(ValidationError):
        make_text([[np.nan, 1.0]])


def test_image_features_validate_grid_and_rows():
    with pytest.raises(ValidationError):
        ImageFeatures("a", [1.0, 0.0], [[1.0, 0.0]], (0, 1))
    with pytest.raises(ValidationError):
        ImageFeatures("a", [1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], (3, 1))
    with pytest.raises(ValidationError):
        ImageFeatures("a", [1.0, 0.0], [[0.0, 0.0]], (1, 1))
    with pytest.raises(ValidationError, match="'a'"):
        ImageFeatures("a", [1.0, 0.0], [[1.0, np.inf]], (1, 1))


def test_embedding_set_rejects_width_mismatch_and_duplicate_ids():
    text = make_text([[1.0, 0.0]])
    img = make_image("a", [1.0, 0.0, 0.0], [[1.0, 0.0, 0.0]])
    with pytest.raises(ValidationError):
        EmbeddingSet(text, (img,))
    ok = make_image("a", [1.0, 0.0], [[1.0, 0.0]])
    with pytest.raises(ValidationError):
        EmbeddingSet(text, (ok, ok))


# ---------------------------------------------------------------------------
# Binary round trips
# ---------------------------------------------------------------------------

def test_minimal_round_trip():
    text = make_text([[0.5, -1.5]], names=("thing",))
    image = make_image("only", [3.0, 4.0], [[1.0, 2.0]], grid=(1, 1))
    original = EmbeddingSet(text, (image,), {"backbone": "unit"})
    restored = from_bytes(to_bytes(original))
    assert restored == original


def test_empty_image_list_round_trip():
    original = EmbeddingSet(make_text(np.eye(2)), (), {})
    restored = from_bytes(to_bytes(original))
    assert restored == original
    assert restored.images == ()


def test_round_trip_randomized(rng):
    for _ in range(40):
        original = random_embedding_set(rng)
        assert from_bytes(to_bytes(original)) == original


def test_write_is_deterministic(rng):
    original = random_embedding_set(rng, n_images=3)
    clone = EmbeddingSet(original.text, original.images, dict(reversed(original.meta.items())))
    assert to_bytes(original) == to_bytes(clone)


def test_write_rejects_mutated_nan_local():
    image = make_image("imx", [1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]])
    embedding_set = EmbeddingSet(make_text(np.eye(2)), (image,))
    image.local[1, 0] = np.nan
    with pytest.raises(ValidationError, match="imx"):
        write_embedding_set(embedding_set, io.BytesIO())


def test_bad_magic_and_version_rejected(rng):
    data = bytearray(to_bytes(random_embedding_set(rng, n_images=1)))
    corrupt = bytes(b"X") + bytes(data[1:])
    with pytest.raises(FormatError):
        from_bytes(corrupt)
    bumped = bytes(data[:4]) + struct.pack("<I", 99) + bytes(data[8:])
    with pytest.raises(FormatError):
        from_bytes(bumped)


def test_truncation_reports_expected_vs_actual(rng):
    data = to_bytes(random_embedding_set(rng, n_images=2))
    with pytest.raises(TruncationError) as info:
        from_bytes(data[: len(data) // 2])
    assert info.value.expected > info.value.actual


def test_every_strict_prefix_fails(rng):
    data = to_bytes(random_embedding_set(rng, n_images=1, k=2, c=3))
    for cut in range(len(data)):
        with pytest.raises(FormatError):
            from_bytes(data[:cut])


def test_trailing_bytes_rejected(rng):
    data = to_bytes(random_embedding_set(rng, n_images=1))
    with pytest.raises(FormatError):
        from_bytes(data + b"\x00")


def float_regions(embedding_set):
    """Byte ranges of every float tensor, mirroring the documented layout."""
    offset = len(b"GLMC") + 4 + 12
    for name in embedding_set.text.vocabulary.classes:
        offset += 4 + len(name.encode())
    k, c = embedding_set.text.matrix.shape
    regions = [(offset, offset + k * c * 4)]
    offset += k * c * 4
    for image in embedding_set.images:
        offset += 4 + len(image.image_id.encode()) + 4
        regions.append((offset, offset + c * 4))
        offset += c * 4
        size = image.local.shape[0] * c * 4
        regions.append((offset, offset + size))
        offset += size
    return regions


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_injected_non_finite_detected(rng, bad):
    embedding_set = random_embedding_set(rng, n_images=2, k=2, c=4)
    data = bytearray(to_bytes(embedding_set))
    for start, end in float_regions(embedding_set):
        position = start + 4 * int(rng.integers(0, (end - start) // 4))
        patched = bytearray(data)
        patched[position : position + 4] = struct.pack("<f", bad)
        with pytest.raises(ValidationError):
            from_bytes(bytes(patched))


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def test_manifest_basic_parse():
    manifest = read_manifest(io.StringIO("img1,ID,imagenet,\nimg2,OOD,inat,\n"))
    assert len(manifest) == 2
    assert manifest.entries[0] == ManifestEntry("img1", Split.ID, "imagenet", ())
    assert manifest.entries[1].split is Split.OOD


def test_manifest_categories_split_on_pipe():
    manifest = read_manifest(io.StringIO("img1,ID,coco,cat|dog\n"))
    assert manifest.entries[0].categories == ("cat", "dog")


def test_manifest_unknown_split_names_line():
    with pytest.raises(ManifestParseError, match="line 2"):
        read_manifest(io.StringIO("img1,ID,imagenet,\nimg2,BOTH,imagenet,\n"))


def test_manifest_duplicate_id_rejected():
    with pytest.raises(ValidationError):
        read_manifest(io.StringIO("img1,ID,a,\nimg1,OOD,b,\n"))


def test_manifest_wrong_field_count():
    with pytest.raises(ManifestParseError, match="line 1"):
        read_manifest(io.StringIO("img1,ID,imagenet\n"))


def test_manifest_file_round_trip(tmp_path):
    manifest = DatasetManifest(
        (
            ManifestEntry("a", Split.ID, "set1", ("cat",)),
            ManifestEntry("b", Split.OOD, "set2", ()),
        )
    )
    path = tmp_path / "manifest.csv"
    write_manifest(manifest, path)
    assert read_manifest(path) == manifest


# ---------------------------------------------------------------------------
# Join
# ---------------------------------------------------------------------------

def build_set(ids, c=2):
    text = make_text(np.eye(c)[:2], names=("cat", "dog"))
    images = tuple(make_image(i, np.ones(c), np.ones((1, c))) for i in ids)
    return EmbeddingSet(text, images)


def entries(*specs):
    return DatasetManifest(tuple(ManifestEntry(i, split, "d", cats) for i, split, cats in specs))


def test_join_counts_unmatched_rows():
    embedding_set = build_set(["a", "b", "c"])
    manifest = entries(("a", Split.ID, ()), ("b", Split.OOD, ()))
    table = join(embedding_set, manifest)
    assert len(table) == 2
    assert table.n_unlabeled_features == 1
    assert table.n_missing_features == 0


def test_join_empty_intersection_is_error():
    with pytest.raises(ValidationError):
        join(build_set(["a"]), entries(("z", Split.ID, ())))


def test_join_perfect_match():
    embedding_set = build_set(["a", "b", "c", "d", "e"])
    manifest = entries(*((i, Split.ID, ()) for i in "abcde"))
    table = join(embedding_set, manifest)
    assert len(table) == 5
    assert table.n_unlabeled_features == 0 and table.n_missing_features == 0


def test_join_order_independent(rng):
    ids = [f"img{i}" for i in range(6)]
    embedding_set = build_set(ids)
    manifest = entries(*((i, Split.ID, ()) for i in ids))
    shuffled_images = list(embedding_set.images)
    rng.shuffle(shuffled_images)
    shuffled_entries = list(manifest.entries)
    rng.shuffle(shuffled_entries)
    reordered = join(
        EmbeddingSet(embedding_set.text, tuple(shuffled_images)),
        DatasetManifest(tuple(shuffled_entries)),
    )
    baseline = join(embedding_set, manifest)
    assert [r.features.image_id for r in baseline.rows] == [r.features.image_id for r in reordered.rows]
    assert baseline.rows == tuple(reordered.rows)


def test_join_rejects_unknown_category():
    with pytest.raises(ValidationError, match="zebra"):
        join(build_set(["a"]), entries(("a", Split.ID, ("zebra",))))
