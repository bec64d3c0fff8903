"""Binary PGM (P5) image reading and writing.

Pixel values map linearly between bytes [0, maxval] and floats [0, 1]; high
values are ink. Round-trips through write/read are exact at maxval 255.
"""

from __future__ import annotations

import numpy as np

from .errors import BadMagicError, CorruptFileError, TruncatedFileError


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2D float image in [0, 1] as a maxval-255 P5 file."""
    data = pgm_bytes(image)
    with open(path, "wb") as f:
        f.write(data)


def pgm_bytes(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM wants a 2D image, got shape {img.shape}")
    h, w = img.shape
    raw = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (w, h) + raw.tobytes()


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    return parse_pgm(data)


def parse_pgm(data: bytes) -> np.ndarray:
    """Parse P5 bytes into a (H, W) float64 array in [0, 1]."""
    if not data.startswith(b"P5"):
        raise BadMagicError("not a binary PGM (P5) file")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptFileError("PGM header ended early")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(x) for x in fields)
    except ValueError as e:
        raise CorruptFileError(f"bad PGM header field: {e}") from e
    if w < 1 or h < 1 or not (0 < maxval < 256):
        raise CorruptFileError(f"bad PGM dimensions {w}x{h} maxval {maxval}")
    need = w * h
    raw = data[pos : pos + need]
    if len(raw) < need:
        raise TruncatedFileError(f"PGM payload has {len(raw)} of {need} bytes")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    return img.astype(np.float64) / float(maxval)
