"""Glyph geometry: ink bounding boxes, inter-letter spacing, stroke angles
between adjacent glyphs, and the letter-pair classification that decides
which pairs a handwriting profile tracks.

All functions are pure; safe for unlimited parallel use.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .data import GlyphImage
from .errors import (
    BlankBandError,
    BlankImageError,
    OutOfCharsetError,
    SegmentationError,
)

INK_THRESHOLD = 0.5   # symmetric midpoint of the [0, 1] grayscale range
BAND_FRACTION = 0.2   # edge-band width used by the stroke-angle estimator


def _pixels(image) -> np.ndarray:
    return image.pixels if isinstance(image, GlyphImage) else np.asarray(image)


@dataclass(frozen=True)
class InkBox:
    """Tightest axis-aligned box containing every pixel above threshold."""

    left: int
    right: int
    top: int
    bottom: int
    ink_count: int

    @property
    def width(self) -> int:
        return self.right - self.left + 1

    @property
    def height(self) -> int:
        return self.bottom - self.top + 1


def ink_box(image, threshold: float = INK_THRESHOLD) -> InkBox:
    px = _pixels(image)
    mask = px > threshold
    if not mask.any():
        raise BlankImageError("no ink above threshold")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return InkBox(left=int(cols[0]), right=int(cols[-1]),
                  top=int(rows[0]), bottom=int(rows[-1]),
                  ink_count=int(mask.sum()))


def measure_spacing(left_glyph, right_glyph, placement: int,
                    threshold: float = INK_THRESHOLD) -> int:
    """Horizontal gap in pixels between two glyphs sharing a canvas, the
    right glyph's image origin offset by ``placement`` columns. Zero means
    touching; overlaps come back negative."""
    lbox = ink_box(left_glyph, threshold)
    rbox = ink_box(right_glyph, threshold)
    return int(placement) + rbox.left - lbox.right - 1


def _band_centroid(px: np.ndarray, col_lo: int, col_hi: int,
                   threshold: float) -> tuple:
    """Ink-weighted centroid (y, x) of the columns [col_lo, col_hi]."""
    band = px[:, col_lo : col_hi + 1]
    w = np.where(band > threshold, band, 0.0)
    total = w.sum()
    if total <= 0:
        raise BlankBandError("measurement band has no ink")
    ys, xs = np.mgrid[0 : band.shape[0], col_lo : col_hi + 1]
    return float((w * ys).sum() / total), float((w * xs).sum() / total)


def measure_stroke_angle(left_glyph, right_glyph, placement: int,
                         dy: int = 0, threshold: float = INK_THRESHOLD,
                         band_fraction: float = BAND_FRACTION) -> float:
    """Signed stroke angle in degrees between two adjacent glyphs: positive =
    ascent (the stroke rises left to right), negative = descent.

    The stroke direction is taken from the ink centroid of the rightmost
    band of the left glyph (band width = ceil(band_fraction * ink width))
    to the centroid of the leftmost band of the right glyph, in canvas
    coordinates where y grows downward. ``placement``/``dy`` offset the
    right glyph's image origin on the shared canvas.
    """
    lpx, rpx = _pixels(left_glyph), _pixels(right_glyph)
    lbox = ink_box(lpx, threshold)
    rbox = ink_box(rpx, threshold)
    lband = max(1, math.ceil(band_fraction * lbox.width))
    rband = max(1, math.ceil(band_fraction * rbox.width))
    ly, lx = _band_centroid(lpx, lbox.right - lband + 1, lbox.right, threshold)
    ry, rx = _band_centroid(rpx, rbox.left, rbox.left + rband - 1, threshold)
    ry += dy
    rx += placement
    # canvas y grows downward, so a rising stroke has ly > ry
    return math.degrees(math.atan2(ly - ry, rx - lx))


class PairClass(enum.Enum):
    UPPER_LOWER = "upper_lower"
    LOWER_LOWER = "lower_lower"
    IGNORED = "ignored"


def classify_pair(first: str, second: str) -> PairClass:
    """Which profile layer an adjacent letter pair belongs to:
    uppercase->lowercase, lowercase->lowercase, or ignored (combinations that
    do not occur as in-word continuations)."""
    for ch in (first, second):
        if len(ch) != 1 or not ch.isascii() or not ch.isalpha():
            raise OutOfCharsetError(f"{ch!r} is not an ASCII letter")
    if first.isupper() and second.islower():
        return PairClass.UPPER_LOWER
    if first.islower() and second.islower():
        return PairClass.LOWER_LOWER
    return PairClass.IGNORED


@dataclass(frozen=True)
class PairMeasurement:
    first: str
    second: str
    spacing: float
    angle: float


def segment_ink_runs(image, threshold: float = INK_THRESHOLD) -> list:
    """Maximal runs of consecutive columns containing ink, as (first_col,
    last_col) pairs left to right."""
    px = _pixels(image)
    has_ink = (px > threshold).any(axis=0)
    runs = []
    start = None
    for col, on in enumerate(has_ink):
        if on and start is None:
            start = col
        elif not on and start is not None:
            runs.append((start, col - 1))
            start = None
    if start is not None:
        runs.append((start, len(has_ink) - 1))
    return runs


def measure_word_image(word: str, image,
                       threshold: float = INK_THRESHOLD) -> list:
    """Per-adjacent-pair spacing/angle measurements for a word image whose
    glyphs are separated by at least one blank column. The image must
    segment into exactly one ink run per letter."""
    px = _pixels(image)
    runs = segment_ink_runs(px, threshold)
    if len(runs) != len(word):
        raise SegmentationError(
            f"word {word!r} has {len(word)} letters but image segments into "
            f"{len(runs)} ink runs")
    measurements = []
    for (a_lo, a_hi), (b_lo, b_hi), first, second in zip(
            runs, runs[1:], word, word[1:]):
        left = px[:, a_lo : a_hi + 1]
        right = px[:, b_lo : b_hi + 1]
        placement = b_lo - a_lo
        spacing = measure_spacing(left, right, placement, threshold)
        angle = measure_stroke_angle(left, right, placement, 0, threshold)
        measurements.append(PairMeasurement(first, second, float(spacing), angle))
    return measurements
