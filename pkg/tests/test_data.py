import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scrawl.data import (
    DIGITS,
    LETTERS,
    Charset,
    GlyphImage,
    IdxDataset,
    ascii_to_label,
    label_to_ascii,
    load_corpus,
    load_idx_dataset,
    make_batches,
    pad_batch,
    pad_to,
    parse_idx_images,
    parse_idx_labels,
    serialize_idx_images,
    serialize_idx_labels,
)
from scrawl.errors import (
    BadMagicError,
    EmptyDatasetError,
    OutOfCharsetError,
    TargetTooSmallError,
    TruncatedFileError,
    ZeroDimensionError,
)
from scrawl.pgm import parse_pgm, pgm_bytes, read_pgm, write_pgm

MNIST_DIR = os.environ.get("SCRAWL_MNIST_DIR", "data")


def idx_image_bytes(count, rows, cols, pixels):
    return struct.pack(">iiii", 2051, count, rows, cols) + bytes(pixels)


def test_parse_idx_images_scaling():
    data = idx_image_bytes(1, 2, 2, [0, 255, 128, 0])
    images = parse_idx_images(data)
    assert images.shape == (1, 2, 2)
    np.testing.assert_allclose(images[0], [[0.0, 1.0], [128 / 255, 0.0]],
                               atol=1e-7)


def test_parse_idx_images_empty_input():
    with pytest.raises(TruncatedFileError):
        parse_idx_images(b"")


def test_parse_idx_images_bad_magic():
    data = struct.pack(">iiii", 2049, 1, 1, 1) + b"\x00"
    with pytest.raises(BadMagicError):
        parse_idx_images(data)


def test_parse_idx_images_truncated_payload():
    data = idx_image_bytes(2, 2, 2, [0] * 7)  # declares 8 pixel bytes
    with pytest.raises(TruncatedFileError):
        parse_idx_images(data)


def test_parse_idx_images_zero_dimension():
    data = struct.pack(">iiii", 2051, 1, 0, 5)
    with pytest.raises(ZeroDimensionError):
        parse_idx_images(data)


def test_parse_idx_labels_passthrough():
    data = struct.pack(">ii", 2049, 3) + bytes([7, 0, 9])
    np.testing.assert_array_equal(parse_idx_labels(data), [7, 0, 9])


def test_parse_idx_labels_wrong_kind():
    data = struct.pack(">ii", 2051, 0)
    with pytest.raises(BadMagicError):
        parse_idx_labels(data)


@pytest.mark.skipif(
    not os.path.exists(os.path.join(MNIST_DIR, "train-images-idx3-ubyte")),
    reason="official MNIST files not present (set SCRAWL_MNIST_DIR)")
def test_official_mnist_files():
    with open(os.path.join(MNIST_DIR, "train-images-idx3-ubyte"), "rb") as f:
        images = parse_idx_images(f.read())
    assert images.shape == (60000, 28, 28)
    with open(os.path.join(MNIST_DIR, "train-labels-idx1-ubyte"), "rb") as f:
        labels = parse_idx_labels(f.read())
    assert len(labels) == 60000
    assert labels.min() >= 0 and labels.max() <= 9


@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 5),
       st.integers(0, 2 ** 32 - 1))
@settings(max_examples=25, deadline=None)
def test_idx_roundtrip_bytes_identical(n, h, w, seed):
    rng = np.random.default_rng(seed)
    raw = rng.integers(0, 256, size=(n, h, w), dtype=np.uint8)
    data = struct.pack(">iiii", 2051, n, h, w) + raw.tobytes()
    assert serialize_idx_images(parse_idx_images(data)) == data
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    ldata = struct.pack(">ii", 2049, n) + labels.tobytes()
    assert serialize_idx_labels(parse_idx_labels(ldata)) == ldata


def test_normalization_bounds():
    rng = np.random.default_rng(0)
    raw = rng.integers(0, 256, size=(20, 4, 4), dtype=np.uint8)
    images = parse_idx_images(struct.pack(">iiii", 2051, 20, 4, 4) + raw.tobytes())
    assert images.min() >= 0.0 and images.max() <= 1.0


def test_label_ascii_mapping():
    assert label_to_ascii(0) == 48
    assert label_to_ascii(9) == 57
    with pytest.raises(OutOfCharsetError):
        label_to_ascii(10)
    assert label_to_ascii(0, LETTERS) == ord("A")
    assert label_to_ascii(26, LETTERS) == ord("a")
    assert ascii_to_label(57) == 9
    # bijection over the whole charset
    for cs in (DIGITS, LETTERS):
        for i in range(cs.size):
            assert ascii_to_label(label_to_ascii(i, cs), cs) == i


def test_charset_rejects_duplicates():
    with pytest.raises(ValueError):
        Charset("dup", "aa")


def make_dataset(n, h=4, w=4, seed=0):
    rng = np.random.default_rng(seed)
    return IdxDataset(rng.random((n, h, w)).astype(np.float32),
                      rng.integers(0, 10, size=n))


def test_make_batches_drops_short_final():
    ds = make_dataset(10)
    batches = make_batches(ds, 3, seed=0)
    assert len(batches) == 3
    assert all(len(b[0]) == 3 for b in batches)


def test_make_batches_deterministic_and_seed_sensitive():
    ds = make_dataset(16)
    a = make_batches(ds, 4, seed=1)
    b = make_batches(ds, 4, seed=1)
    for (ia, la), (ib, lb) in zip(a, b):
        np.testing.assert_array_equal(ia, ib)
        np.testing.assert_array_equal(la, lb)
    c = make_batches(ds, 4, seed=2)
    assert any(not np.array_equal(x[0], y[0]) for x, y in zip(a, c))


def test_make_batches_epoch_coverage():
    ds = make_dataset(17, seed=3)
    # tag every sample by a unique pixel value so batches can be traced back
    ds.images[:, 0, 0] = np.arange(17) / 17.0
    batches = make_batches(ds, 5, seed=9)
    seen = np.concatenate([np.round(b[0][:, 0, 0] * 17).astype(int) for b in batches])
    assert len(seen) == 15
    assert len(set(seen.tolist())) == 15  # no duplicates


def test_make_batches_empty_and_oversized():
    with pytest.raises(EmptyDatasetError):
        make_batches(IdxDataset(np.zeros((0, 2, 2)), np.zeros(0, int)), 1, 0)
    with pytest.raises(ValueError):
        make_batches(make_dataset(4), 5, 0)


def test_pad_to_centering_and_identity():
    img = np.ones((28, 28), dtype=np.float32)
    out = pad_to(img, 32)
    assert out.shape == (32, 32)
    assert out[2:30, 2:30].min() == 1.0
    assert out.sum() == img.sum()  # border is zero

    same = pad_to(np.ones((32, 32), np.float32), 32)
    np.testing.assert_array_equal(same, np.ones((32, 32)))

    with pytest.raises(TargetTooSmallError):
        pad_to(img, 16)


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 10 ** 6))
@settings(max_examples=30, deadline=None)
def test_pad_to_preserves_ink(h, w, seed):
    rng = np.random.default_rng(seed)
    img = rng.random((h, w))
    target = max(h, w) + int(rng.integers(0, 5))
    out = pad_to(img, target)
    assert abs(out.sum() - img.sum()) < 1e-9


def test_pad_to_glyph_image_type():
    g = GlyphImage(np.ones((3, 3)) * 0.5)
    out = pad_to(g, 5)
    assert isinstance(out, GlyphImage)
    assert out.height == out.width == 5


def test_pad_batch_matches_pad_to():
    rng = np.random.default_rng(5)
    images = rng.random((4, 6, 6)).astype(np.float32)
    out = pad_batch(images, 9)
    for i in range(4):
        np.testing.assert_array_equal(out[i], pad_to(images[i], 9))


def test_glyph_image_invariants():
    with pytest.raises(ValueError):
        GlyphImage(np.array([1.0, 2.0]))  # 1D
    with pytest.raises(ValueError):
        GlyphImage(np.full((2, 2), 1.5))  # out of range
    with pytest.raises(ValueError):
        GlyphImage(np.full((2, 2), np.nan))


def test_load_idx_dataset_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    raw = rng.integers(0, 256, size=(5, 3, 3), dtype=np.uint8)
    labels = rng.integers(0, 10, size=5, dtype=np.uint8)
    ipath = tmp_path / "imgs.idx"
    lpath = tmp_path / "labs.idx"
    ipath.write_bytes(struct.pack(">iiii", 2051, 5, 3, 3) + raw.tobytes())
    lpath.write_bytes(struct.pack(">ii", 2049, 5) + labels.tobytes())
    ds = load_idx_dataset(ipath, lpath)
    assert ds.count == 5
    np.testing.assert_array_equal(ds.labels, labels)
    assert isinstance(ds.glyph(0), GlyphImage)


# --- PGM -------------------------------------------------------------------------


def test_pgm_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    img = np.round(rng.random((5, 8)) * 255) / 255.0
    path = tmp_path / "img.pgm"
    write_pgm(path, img)
    back = read_pgm(path)
    np.testing.assert_allclose(back, img, atol=1e-12)


def test_pgm_header_with_comment():
    img = parse_pgm(b"P5\n# a comment\n2 2\n255\n\x00\xff\x80\x00")
    assert img.shape == (2, 2)
    assert img[0, 1] == 1.0


def test_pgm_errors():
    with pytest.raises(BadMagicError):
        parse_pgm(b"P6\n1 1\n255\n\x00")
    with pytest.raises(TruncatedFileError):
        parse_pgm(b"P5\n4 4\n255\n\x00")


# --- corpus ----------------------------------------------------------------------


def write_corpus(tmp_path, records):
    lines = []
    for i, (word, writer, img) in enumerate(records):
        name = f"w{i}.pgm"
        (tmp_path / name).write_bytes(pgm_bytes(img))
        lines.append(f"{word}\t{writer}\t{name}")
    manifest = tmp_path / "manifest.tsv"
    manifest.write_text("# corpus fixture\n" + "\n".join(lines) + "\n",
                        encoding="utf-8")
    return manifest


def test_load_corpus(tmp_path):
    img = np.zeros((8, 12))
    img[2:6, 1:4] = 1.0
    img[2:6, 8:11] = 1.0
    manifest = write_corpus(tmp_path, [("ab", "writer1", img)])
    corpus = load_corpus(manifest)
    assert len(corpus) == 1
    rec = corpus.records[0]
    assert rec.word == "ab" and rec.writer_id == "writer1"
    assert rec.image.height == 8 and rec.image.width == 12


def test_load_corpus_rejects_out_of_charset_word(tmp_path):
    img = np.zeros((4, 4))
    img[1, 1] = 1.0
    manifest = write_corpus(tmp_path, [("a1", "w", img)])
    with pytest.raises(OutOfCharsetError):
        load_corpus(manifest)
    # but the same word is fine under the digit charset
    manifest2 = write_corpus(tmp_path, [("11", "w", img)])
    assert len(load_corpus(manifest2, DIGITS)) == 1
