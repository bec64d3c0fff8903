"""Dataset ingestion: IDX image/label files, label-to-ASCII mapping, batching,
padding, and the word-image corpus (PGM files plus a tab-separated manifest).

Parsing functions are pure and thread-safe; batch sequences are materialized
lists safe to iterate from one consumer.
"""

from __future__ import annotations

import os
import string
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    CorruptFileError,
    EmptyDatasetError,
    OutOfCharsetError,
    TargetTooSmallError,
    TruncatedFileError,
    ZeroDimensionError,
)
from .pgm import read_pgm

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


class Charset:
    """Ordered character set with a bijection charset index <-> ASCII code."""

    def __init__(self, name: str, chars: str):
        self.name = name
        self.chars = chars
        self._index = {ord(c): i for i, c in enumerate(chars)}
        if len(self._index) != len(chars):
            raise ValueError("charset contains duplicate characters")

    @property
    def size(self) -> int:
        return len(self.chars)

    def ascii_at(self, index: int) -> int:
        if not 0 <= index < len(self.chars):
            raise OutOfCharsetError(f"index {index} outside charset '{self.name}'")
        return ord(self.chars[index])

    def index_of(self, ascii_code: int) -> int:
        try:
            return self._index[int(ascii_code)]
        except KeyError:
            raise OutOfCharsetError(
                f"ASCII {ascii_code} is not in charset '{self.name}'") from None

    def __contains__(self, ascii_code: int) -> bool:
        return int(ascii_code) in self._index

    def __len__(self) -> int:
        return len(self.chars)

    def __repr__(self):
        return f"Charset({self.name!r}, {len(self.chars)} chars)"


DIGITS = Charset("digits", string.digits)
LETTERS = Charset("letters", string.ascii_uppercase + string.ascii_lowercase)

CHARSETS = {c.name: c for c in (DIGITS, LETTERS)}


@dataclass(frozen=True)
class GlyphImage:
    """Single-channel glyph: row-major grid in [0, 1], 0 = paper, 1 = full ink."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"glyph must be a 2D image, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("glyph contains non-finite pixels")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("glyph pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class IdxDataset:
    """Parallel image/label arrays: images (N, H, W) in [0, 1], labels (N,)."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images vs {len(self.labels)} labels")

    @property
    def count(self) -> int:
        return len(self.images)

    def __len__(self) -> int:
        return self.count

    def glyph(self, i: int) -> GlyphImage:
        return GlyphImage(self.images[i])

    def subset(self, index) -> "IdxDataset":
        return IdxDataset(self.images[index], self.labels[index])


def _read_header(data: bytes, n_dims: int, expected_magic: int) -> tuple:
    need = 4 * (1 + n_dims)
    if len(data) < 4:
        raise TruncatedFileError(f"file has {len(data)} bytes, header needs {need}")
    (magic,) = struct.unpack(">i", data[:4])
    if magic != expected_magic:
        raise BadMagicError(f"magic {magic}, expected {expected_magic}")
    if len(data) < need:
        raise TruncatedFileError(f"file has {len(data)} bytes, header needs {need}")
    dims = struct.unpack(f">{n_dims}i", data[4:need])
    return dims, data[need:]


def parse_idx_images(data: bytes) -> np.ndarray:
    """Parse IDX image bytes into a (count, H, W) float32 array scaled to
    [0, 1] by division by 255. All header integers are big-endian."""
    (count, rows, cols), payload = _read_header(data, 3, IDX_IMAGE_MAGIC)
    if count < 0:
        raise CorruptFileError(f"negative image count {count}")
    if count > 0 and (rows < 1 or cols < 1):
        raise ZeroDimensionError(f"image dims {rows}x{cols}")
    need = count * rows * cols
    if len(payload) < need:
        raise TruncatedFileError(
            f"payload has {len(payload)} of {need} declared pixel bytes")
    raw = np.frombuffer(payload[:need], dtype=np.uint8)
    return raw.reshape(count, rows, cols).astype(np.float32) / np.float32(255.0)


def parse_idx_labels(data: bytes) -> np.ndarray:
    """Parse IDX label bytes into a (count,) int array of values 0-255."""
    (count,), payload = _read_header(data, 1, IDX_LABEL_MAGIC)
    if count < 0:
        raise CorruptFileError(f"negative label count {count}")
    if len(payload) < count:
        raise TruncatedFileError(
            f"payload has {len(payload)} of {count} declared label bytes")
    return np.frombuffer(payload[:count], dtype=np.uint8).astype(np.int64)


def serialize_idx_images(images: np.ndarray) -> bytes:
    """Inverse of parse_idx_images: floats in [0, 1] back to raw IDX bytes."""
    images = np.asarray(images)
    n, h, w = images.shape
    raw = np.rint(images * 255.0).astype(np.uint8)
    return struct.pack(">iiii", IDX_IMAGE_MAGIC, n, h, w) + raw.tobytes()


def serialize_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    return struct.pack(">ii", IDX_LABEL_MAGIC, len(labels)) + \
        labels.astype(np.uint8).tobytes()


def load_idx_dataset(images_path, labels_path) -> IdxDataset:
    with open(images_path, "rb") as f:
        images = parse_idx_images(f.read())
    with open(labels_path, "rb") as f:
        labels = parse_idx_labels(f.read())
    return IdxDataset(images, labels)


def label_to_ascii(label: int, charset: Charset = DIGITS) -> int:
    """Map a class id to its ASCII code: digit d -> 48 + d, letters to their
    standard codes (index into the configured charset)."""
    return charset.ascii_at(int(label))


def ascii_to_label(ascii_code: int, charset: Charset = DIGITS) -> int:
    return charset.index_of(ascii_code)


def make_batches(dataset: IdxDataset, batch_size: int, seed) -> list:
    """Deterministically shuffled (images, labels) batches covering every
    sample exactly once per epoch; a short final batch is dropped so batch
    statistics stay well-defined.

    ``seed`` may be an int or a numpy Generator.
    """
    n = dataset.count
    if n == 0:
        raise EmptyDatasetError("cannot batch an empty dataset")
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size {batch_size} not in [1, {n}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    perm = rng.permutation(n)
    batches = []
    for start in range(0, n - batch_size + 1, batch_size):
        idx = perm[start : start + batch_size]
        batches.append((dataset.images[idx], dataset.labels[idx]))
    return batches


def pad_to(image, size: int):
    """Center an image on a size x size zero background. Accepts a GlyphImage
    or a 2D array and returns the same kind."""
    if isinstance(image, GlyphImage):
        return GlyphImage(pad_to(image.pixels, size))
    img = np.asarray(image)
    h, w = img.shape
    if size < max(h, w):
        raise TargetTooSmallError(f"target {size} smaller than image {h}x{w}")
    top = (size - h) // 2
    left = (size - w) // 2
    out = np.zeros((size, size), dtype=img.dtype)
    out[top : top + h, left : left + w] = img
    return out


def pad_batch(images: np.ndarray, size: int) -> np.ndarray:
    """pad_to applied across a (N, H, W) stack."""
    n, h, w = images.shape
    if size < max(h, w):
        raise TargetTooSmallError(f"target {size} smaller than images {h}x{w}")
    top = (size - h) // 2
    left = (size - w) // 2
    out = np.zeros((n, size, size), dtype=images.dtype)
    out[:, top : top + h, left : left + w] = images
    return out


# --- word-image corpus -------------------------------------------------------------


@dataclass
class CorpusRecord:
    word: str
    image: GlyphImage
    writer_id: str


@dataclass
class Corpus:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def load_corpus(manifest_path, charset: Charset = LETTERS) -> Corpus:
    """Read a corpus manifest: one ``word<TAB>writer_id<TAB>filename`` line per
    record, filenames resolved relative to the manifest, images as P5 PGM.
    Words must stay inside the given charset."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    records = []
    with open(manifest_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CorruptFileError(
                    f"{manifest_path}:{lineno}: expected 3 tab-separated fields")
            word, writer_id, filename = parts
            if not word or any(ord(c) not in charset for c in word):
                raise OutOfCharsetError(
                    f"{manifest_path}:{lineno}: word {word!r} has characters "
                    f"outside charset '{charset.name}'")
            image = read_pgm(os.path.join(base, filename))
            records.append(CorpusRecord(word, GlyphImage(image), writer_id))
    return Corpus(records)
