"""Handwriting profile, penalty controller, and word composition.

The profile keeps running means of inter-letter spacing and stroke angle per
letter pair in a 26x26x2 layout (uppercase->lowercase and
lowercase->lowercase layers); a 10x10x1 digit variant reuses the same cell
machinery under its own charset tag.

The controller is a proportional penalty rule: after each composition it
moves every pair's placement threshold against the gap between the measured
geometry and the profile mean, so the objectives |measured - mean| are driven
to zero. On the idealized linear render model the error contracts with ratio
|1 - eta| per iteration.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import GlyphImage
from .errors import (
    CorruptFileError,
    IgnoredPairError,
    NoProfileDataError,
    OutOfCharsetError,
    VersionMismatchError,
)
from .metrics import (
    INK_THRESHOLD,
    PairClass,
    PairMeasurement,
    classify_pair,
    ink_box,
    measure_spacing,
    measure_stroke_angle,
)

PROFILE_MAGIC = b"SCRAWLHP"
PROFILE_VERSION = 1

DEFAULT_SPACING = 4.0  # px, for pairs outside the tracked classes
DEFAULT_ANGLE = 0.0    # degrees

_LAYOUTS = {"letters": (2, 26), "digits": (1, 10)}


class HandwritingProfile:
    """Per-pair running means of spacing (px) and stroke angle (degrees)."""

    def __init__(self, charset_tag: str = "letters"):
        if charset_tag not in _LAYOUTS:
            raise ValueError(f"unknown profile charset tag {charset_tag!r}")
        self.charset_tag = charset_tag
        layers, n = _LAYOUTS[charset_tag]
        self.mean_spacing = np.zeros((layers, n, n), dtype=np.float64)
        self.mean_angle = np.zeros((layers, n, n), dtype=np.float64)
        self.counts = np.zeros((layers, n, n), dtype=np.uint64)

    @classmethod
    def letters(cls) -> "HandwritingProfile":
        return cls("letters")

    @classmethod
    def digits(cls) -> "HandwritingProfile":
        return cls("digits")

    def cell(self, first: str, second: str):
        """(layer, row, col) for a tracked pair, or None if the pair is
        outside the tracked classes."""
        if self.charset_tag == "digits":
            if not (first.isdigit() and second.isdigit()):
                raise OutOfCharsetError(
                    f"pair {first}{second} not in the digit charset")
            return 0, int(first), int(second)
        cls = classify_pair(first, second)
        if cls is PairClass.IGNORED:
            return None
        layer = 0 if cls is PairClass.UPPER_LOWER else 1
        row = ord(first) - (ord("A") if cls is PairClass.UPPER_LOWER else ord("a"))
        col = ord(second) - ord("a")
        return layer, row, col

    def update(self, first: str, second: str, spacing: float, angle: float) -> None:
        """Fold one observation into the pair's running means."""
        cell = self.cell(first, second)
        if cell is None:
            raise IgnoredPairError(f"pair {first}{second} is not tracked")
        n = float(self.counts[cell])
        self.mean_spacing[cell] += (spacing - self.mean_spacing[cell]) / (n + 1.0)
        self.mean_angle[cell] += (angle - self.mean_angle[cell]) / (n + 1.0)
        self.counts[cell] += 1

    def has_data(self, first: str, second: str) -> bool:
        cell = self.cell(first, second)
        return cell is not None and self.counts[cell] > 0

    def means(self, first: str, second: str) -> tuple:
        """(mean spacing, mean angle) for a pair with observations."""
        cell = self.cell(first, second)
        if cell is None or self.counts[cell] == 0:
            raise NoProfileDataError(f"no observations for pair {first}{second}")
        return float(self.mean_spacing[cell]), float(self.mean_angle[cell])

    def coverage(self) -> tuple:
        """(cells with data, total cells) per table."""
        return int((self.counts > 0).sum()), int(self.counts.size)

    def __eq__(self, other):
        return (isinstance(other, HandwritingProfile)
                and self.charset_tag == other.charset_tag
                and np.array_equal(self.mean_spacing, other.mean_spacing)
                and np.array_equal(self.mean_angle, other.mean_angle)
                and np.array_equal(self.counts, other.counts))


def objective(measured: float, mean: float) -> float:
    """Penalty for one pair: |measured - mean|, zero exactly on target."""
    return abs(float(measured) - float(mean))


def profile_bytes(profile: HandwritingProfile) -> bytes:
    layers, n = _LAYOUTS[profile.charset_tag]
    tag = profile.charset_tag.encode("ascii")
    out = io.BytesIO()
    out.write(PROFILE_MAGIC)
    out.write(struct.pack("<I", PROFILE_VERSION))
    out.write(struct.pack("<H", len(tag)))
    out.write(tag)
    out.write(struct.pack("<II", layers, n))
    out.write(np.ascontiguousarray(profile.mean_spacing, dtype="<f8").tobytes())
    out.write(np.ascontiguousarray(profile.mean_angle, dtype="<f8").tobytes())
    out.write(np.ascontiguousarray(profile.counts, dtype="<u8").tobytes())
    return out.getvalue()


def save_profile(profile: HandwritingProfile, path) -> None:
    with open(path, "wb") as f:
        f.write(profile_bytes(profile))


def parse_profile(data: bytes) -> HandwritingProfile:
    f = io.BytesIO(data)
    if f.read(len(PROFILE_MAGIC)) != PROFILE_MAGIC:
        raise CorruptFileError("not a profile file (bad magic)")

    def read_exact(n):
        chunk = f.read(n)
        if len(chunk) != n:
            raise CorruptFileError("profile file truncated")
        return chunk

    (version,) = struct.unpack("<I", read_exact(4))
    if version != PROFILE_VERSION:
        raise VersionMismatchError(
            f"profile version {version}, this build reads {PROFILE_VERSION}")
    (taglen,) = struct.unpack("<H", read_exact(2))
    tag = read_exact(taglen).decode("ascii")
    if tag not in _LAYOUTS:
        raise CorruptFileError(f"unknown profile charset tag {tag!r}")
    layers, n = struct.unpack("<II", read_exact(8))
    if (layers, n) != _LAYOUTS[tag]:
        raise CorruptFileError(
            f"profile dims {layers}x{n}x{n} inconsistent with tag {tag!r}")
    count = layers * n * n
    profile = HandwritingProfile(tag)
    profile.mean_spacing = np.frombuffer(read_exact(8 * count), dtype="<f8") \
        .reshape(layers, n, n).copy()
    profile.mean_angle = np.frombuffer(read_exact(8 * count), dtype="<f8") \
        .reshape(layers, n, n).copy()
    profile.counts = np.frombuffer(read_exact(8 * count), dtype="<u8") \
        .reshape(layers, n, n).copy()
    return profile


def load_profile(path) -> HandwritingProfile:
    with open(path, "rb") as f:
        return parse_profile(f.read())


# --- controller ----------------------------------------------------------------------


def _round_px(v: float) -> int:
    return int(math.floor(v + 0.5))


@dataclass
class ControllerState:
    """Per-pair placement targets the penalty controller keeps adjusting.

    spacing_threshold holds the gap (px) the composer will aim for;
    angle_offset the upward shift (px) applied to the following glyph.
    """

    eta: float = 0.5
    eps_spacing: float = 0.5   # px
    eps_angle: float = 2.0     # degrees
    iteration: int = 0
    spacing_threshold: dict = field(default_factory=dict)
    angle_offset: dict = field(default_factory=dict)

    def ensure_pair(self, pair: tuple, profile: HandwritingProfile,
                    allow_defaults: bool = True) -> None:
        if pair in self.spacing_threshold:
            return
        sp, ang = pair_targets(profile, pair, allow_defaults)
        self.spacing_threshold[pair] = sp
        self.angle_offset[pair] = math.tan(math.radians(ang)) * (sp + 1.0)

    def copy(self) -> "ControllerState":
        return ControllerState(self.eta, self.eps_spacing, self.eps_angle,
                               self.iteration, dict(self.spacing_threshold),
                               dict(self.angle_offset))


def pair_targets(profile: HandwritingProfile, pair: tuple,
                 allow_defaults: bool = True) -> tuple:
    """Target (spacing, angle) for a pair: the profile means where observed,
    otherwise the global defaults (4 px, 0 degrees) unless strict mode."""
    first, second = pair
    if profile.has_data(first, second):
        return profile.means(first, second)
    if not allow_defaults:
        raise NoProfileDataError(f"no observations for pair {first}{second} "
                                 "and defaults are disabled")
    return DEFAULT_SPACING, DEFAULT_ANGLE


def _apply_update(state: ControllerState, pair: tuple, measured_spacing: float,
                  measured_angle: float, target_spacing: float,
                  target_angle: float) -> None:
    state.spacing_threshold[pair] -= state.eta * (measured_spacing - target_spacing)
    run = max(measured_spacing + 1.0, 1.0)
    step_measured = math.tan(math.radians(measured_angle)) * run
    step_target = math.tan(math.radians(target_angle)) * run
    state.angle_offset[pair] -= state.eta * (step_measured - step_target)


def controller_step(state: ControllerState, pair: tuple,
                    measured_spacing: float, measured_angle: float,
                    profile: HandwritingProfile) -> ControllerState:
    """Proportional penalty update of one pair's thresholds against the
    profile means. The angle error is converted to a vertical pixel step via
    tan over the measured horizontal run. Identity exactly when measured
    equals the mean."""
    first, second = pair
    target_sp, target_ang = profile.means(first, second)  # NoProfileData if empty
    state.ensure_pair(pair, profile)
    _apply_update(state, pair, measured_spacing, measured_angle,
                  target_sp, target_ang)
    state.iteration += 1
    return state


# --- composition ----------------------------------------------------------------------


@dataclass
class PairObjective:
    first: str
    second: str
    spacing_objective: float
    angle_objective: float


@dataclass
class CompositionResult:
    canvas: GlyphImage
    placements: list          # (x, y) canvas offsets per glyph, x strictly increasing
    measurements: list        # PairMeasurement per adjacent pair
    objectives: list          # PairObjective per adjacent pair


def gan_glyph_source(model):
    """Adapt a GanModel to the glyph-source callable compose() expects."""
    def source(char: str, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((1, model.config.noise_dim)).astype(np.float32)
        return model.generate_batch([ord(char)], z)[0]
    return source


def _gather_glyphs(word: str, glyph_source, seed) -> list:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    glyphs = []
    for ch in word:
        g = glyph_source(ch, rng)
        glyphs.append(np.asarray(g.pixels if isinstance(g, GlyphImage) else g,
                                 dtype=np.float64))
    return glyphs


def compose(word: str, glyph_source, profile: HandwritingProfile,
            state: ControllerState, seed=0, allow_defaults: bool = True,
            threshold: float = INK_THRESHOLD,
            _glyphs: list | None = None) -> CompositionResult:
    """Render a word left to right: each next glyph is placed so its ink
    starts spacing_threshold[pair] px after the previous glyph's ink ends,
    shifted up by angle_offset[pair] px. Realized geometry is re-measured
    and reported as per-pair objectives against the profile targets.

    ``glyph_source`` is a callable (char, rng) -> image; gan_glyph_source
    adapts a trained model.
    """
    if not word:
        raise ValueError("cannot compose an empty word")
    glyphs = _glyphs if _glyphs is not None else _gather_glyphs(word, glyph_source, seed)
    boxes = [ink_box(g, threshold) for g in glyphs]

    xs = [0]
    ys = [0]
    for i, (first, second) in enumerate(zip(word, word[1:])):
        pair = (first, second)
        state.ensure_pair(pair, profile, allow_defaults)
        gap = _round_px(state.spacing_threshold[pair])
        lift = _round_px(state.angle_offset[pair])
        x = xs[i] + boxes[i].right + 1 + gap - boxes[i + 1].left
        x = max(x, xs[i] + 1)  # placements stay strictly increasing
        xs.append(x)
        ys.append(ys[i] - lift)

    min_x, min_y = min(xs), min(ys)
    xs = [x - min_x for x in xs]
    ys = [y - min_y for y in ys]
    height = max(y + g.shape[0] for y, g in zip(ys, glyphs))
    width = max(x + g.shape[1] for x, g in zip(xs, glyphs))
    canvas = np.zeros((height, width), dtype=np.float64)
    for x, y, g in zip(xs, ys, glyphs):
        region = canvas[y : y + g.shape[0], x : x + g.shape[1]]
        np.maximum(region, g, out=region)

    measurements = []
    objectives = []
    for i, (first, second) in enumerate(zip(word, word[1:])):
        pair = (first, second)
        placement = xs[i + 1] - xs[i]
        dy = ys[i + 1] - ys[i]
        spacing = measure_spacing(glyphs[i], glyphs[i + 1], placement, threshold)
        angle = measure_stroke_angle(glyphs[i], glyphs[i + 1], placement, dy,
                                     threshold)
        measurements.append(PairMeasurement(first, second, float(spacing), angle))
        t_sp, t_ang = pair_targets(profile, pair, allow_defaults)
        objectives.append(PairObjective(first, second,
                                        objective(spacing, t_sp),
                                        objective(angle, t_ang)))

    return CompositionResult(canvas=GlyphImage(np.clip(canvas, 0.0, 1.0)),
                             placements=list(zip(xs, ys)),
                             measurements=measurements,
                             objectives=objectives)


@dataclass
class ConvergeResult:
    state: ControllerState
    iterations: int
    converged: bool
    history: list              # per iteration: list of PairObjective
    composition: CompositionResult


def converge(word: str, glyph_source, profile: HandwritingProfile,
             state: ControllerState, max_iters: int = 20, seed=0,
             allow_defaults: bool = True,
             threshold: float = INK_THRESHOLD) -> ConvergeResult:
    """Alternate compose / controller updates until every pair's spacing
    objective <= eps_spacing and angle objective <= eps_angle, or max_iters
    is reached. Non-convergence is reported in the result, not raised.

    Glyphs are generated once (deterministic under seed) and re-placed each
    iteration.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    glyphs = _gather_glyphs(word, glyph_source, seed)
    history = []
    result = None
    for iteration in range(1, max_iters + 1):
        result = compose(word, glyph_source, profile, state, seed,
                         allow_defaults, threshold, _glyphs=glyphs)
        history.append(result.objectives)
        done = all(o.spacing_objective <= state.eps_spacing
                   and o.angle_objective <= state.eps_angle
                   for o in result.objectives)
        if done:
            return ConvergeResult(state, iteration, True, history, result)
        for meas in result.measurements:
            pair = (meas.first, meas.second)
            t_sp, t_ang = pair_targets(profile, pair, allow_defaults)
            _apply_update(state, pair, meas.spacing, meas.angle, t_sp, t_ang)
        state.iteration += 1
    return ConvergeResult(state, max_iters, False, history, result)
