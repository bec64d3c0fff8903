"""Character-conditioned generator and matching-aware discriminator.

The generator concatenates a noise vector with a learned character embedding,
projects to a 4x4 seed map, and upsamples through three transposed
convolutions to a 32x32 glyph in [0, 1]:

    (Z+E) -> 256x4x4 -> 128x8x8 -> 64x16x16 -> 1x32x32

The discriminator mirrors it with strided convolutions, flattens the 4x4
feature map, concatenates its own character embedding, and projects to a
sigmoid score:

    1x32x32 -> 64x16x16 -> 128x8x8 -> 256x4x4 -> flatten(4096) (+) E -> scalar

Each net owns its embedding table so the training steps stay isolated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import DIGITS, Charset, GlyphImage
from .errors import DimMismatchError

SCORE_EPS = 1e-7  # discriminate() never returns exactly 0 or 1


@dataclass
class GanConfig:
    charset: Charset = field(default_factory=lambda: DIGITS)
    noise_dim: int = 100
    embed_dim: int = 16
    image_size: int = 32
    gen_channels: tuple = (256, 128, 64)
    disc_channels: tuple = (64, 128, 256)
    leak: float = 0.2


class Generator:
    def __init__(self, config: GanConfig, rng, dtype=np.float32):
        c = config
        g1, g2, g3 = c.gen_channels
        self.config = c
        self.seed_hw = c.image_size // 8
        self.embed = nn.Embedding(c.charset.size, c.embed_dim, rng, dtype, name="g.embed")
        self.proj = nn.Linear(c.noise_dim + c.embed_dim, g1 * self.seed_hw ** 2,
                              rng, dtype, name="g.proj")
        self.bn0 = nn.BatchNorm2d(g1, dtype=dtype, name="g.bn0")
        self.up1 = nn.ConvTranspose2d(g1, g2, rng=rng, dtype=dtype, name="g.up1")
        self.bn1 = nn.BatchNorm2d(g2, dtype=dtype, name="g.bn1")
        self.up2 = nn.ConvTranspose2d(g2, g3, rng=rng, dtype=dtype, name="g.up2")
        self.bn2 = nn.BatchNorm2d(g3, dtype=dtype, name="g.bn2")
        self.up3 = nn.ConvTranspose2d(g3, 1, rng=rng, dtype=dtype, name="g.up3")
        self.last_feature_shapes: list = []

    def forward(self, z, char_idx, training: bool, update_running: bool = True):
        c = self.config
        z = z if isinstance(z, nn.Tensor) else nn.Tensor(z)
        if z.data.ndim != 2 or z.data.shape[1] != c.noise_dim:
            raise DimMismatchError(f"noise shape {z.data.shape}, want (B, {c.noise_dim})")
        e = self.embed(np.asarray(char_idx))
        h = nn.concat(z, e, axis=1)
        h = self.proj(h)
        h = nn.reshape(h, (z.data.shape[0], c.gen_channels[0], self.seed_hw, self.seed_hw))
        shapes = [h.shape]
        h = nn.leaky_relu(self.bn0(h, training, update_running), c.leak)
        h = nn.leaky_relu(self.bn1(self.up1(h), training, update_running), c.leak)
        shapes.append(h.shape)
        h = nn.leaky_relu(self.bn2(self.up2(h), training, update_running), c.leak)
        shapes.append(h.shape)
        h = self.up3(h)
        shapes.append(h.shape)
        self.last_feature_shapes = shapes
        # tanh squashing mapped affinely onto the glyph value range [0, 1]
        return nn.scale_shift(nn.tanh(h), 0.5, 0.5)

    def layers(self):
        return [self.embed, self.proj, self.bn0, self.up1, self.bn1,
                self.up2, self.bn2, self.up3]

    def params(self):
        return [p for layer in self.layers() for p in layer.params()]


class Discriminator:
    def __init__(self, config: GanConfig, rng, dtype=np.float32):
        c = config
        d1, d2, d3 = c.disc_channels
        self.config = c
        feat_hw = c.image_size // 8
        self.conv1 = nn.Conv2d(1, d1, rng=rng, dtype=dtype, name="d.conv1")
        self.conv2 = nn.Conv2d(d1, d2, rng=rng, dtype=dtype, name="d.conv2")
        self.bn2 = nn.BatchNorm2d(d2, dtype=dtype, name="d.bn2")
        self.conv3 = nn.Conv2d(d2, d3, rng=rng, dtype=dtype, name="d.conv3")
        self.bn3 = nn.BatchNorm2d(d3, dtype=dtype, name="d.bn3")
        self.embed = nn.Embedding(c.charset.size, c.embed_dim, rng, dtype, name="d.embed")
        # near-neutral head init: untrained scores start around 0.5
        self.head = nn.Linear(d3 * feat_hw ** 2 + c.embed_dim, 1, rng, dtype,
                              init_std=0.002, name="d.head")
        self.flat_dim = d3 * feat_hw ** 2
        self.last_feature_shapes: list = []

    def forward(self, x, char_idx, training: bool, update_running: bool = True):
        c = self.config
        x = x if isinstance(x, nn.Tensor) else nn.Tensor(x)
        if x.data.ndim != 4 or x.data.shape[1] != 1 or \
                x.data.shape[2] != c.image_size or x.data.shape[3] != c.image_size:
            raise DimMismatchError(
                f"image batch shape {x.data.shape}, want (B, 1, {c.image_size}, {c.image_size})")
        # zero-center the [0, 1] glyph range before the conv stack
        h = nn.scale_shift(x, 2.0, -1.0)
        h = nn.leaky_relu(self.conv1(h), c.leak)  # no norm on the first layer
        shapes = [h.shape]
        h = nn.leaky_relu(self.bn2(self.conv2(h), training, update_running), c.leak)
        shapes.append(h.shape)
        h = nn.leaky_relu(self.bn3(self.conv3(h), training, update_running), c.leak)
        shapes.append(h.shape)
        b = x.data.shape[0]
        h = nn.reshape(h, (b, self.flat_dim))
        shapes.append(h.shape)
        e = self.embed(np.asarray(char_idx))
        h = nn.concat(h, e, axis=1)
        score = nn.sigmoid(nn.reshape(self.head(h), (b,)))
        shapes.append(score.shape)
        self.last_feature_shapes = shapes
        return score

    def layers(self):
        return [self.conv1, self.conv2, self.bn2, self.conv3, self.bn3,
                self.embed, self.head]

    def params(self):
        return [p for layer in self.layers() for p in layer.params()]


class GanModel:
    """Generator/discriminator pair plus the shared hyperparameters."""

    def __init__(self, config: GanConfig | None = None, seed: int = 0,
                 dtype=np.float32):
        self.config = config or GanConfig()
        rng = np.random.default_rng(seed)
        self.generator = Generator(self.config, rng, dtype)
        self.discriminator = Discriminator(self.config, rng, dtype)

    @property
    def charset(self) -> Charset:
        return self.config.charset

    def g_params(self):
        return self.generator.params()

    def d_params(self):
        return self.discriminator.params()

    def named_params(self):
        return {p.name: p for p in self.g_params() + self.d_params()}

    def named_buffers(self):
        out = {}
        for net in (self.generator, self.discriminator):
            for layer in net.layers():
                if isinstance(layer, nn.BatchNorm2d):
                    for name, arr in layer.buffers():
                        out[name] = arr
        return out

    def ascii_to_index(self, ascii_codes) -> np.ndarray:
        codes = np.atleast_1d(np.asarray(ascii_codes))
        return np.array([self.charset.index_of(a) for a in codes], dtype=np.int64)

    # --- inference helpers ---------------------------------------------------

    def generate_batch(self, ascii_codes, z: np.ndarray, training: bool = False,
                       update_running: bool = False) -> np.ndarray:
        """Glyph images (B, H, W) in [0, 1] for the given chars and noise."""
        idx = self.ascii_to_index(ascii_codes)
        z = np.asarray(z)
        if z.ndim != 2 or z.shape != (len(idx), self.config.noise_dim):
            raise DimMismatchError(
                f"noise shape {z.shape}, want ({len(idx)}, {self.config.noise_dim})")
        out = self.generator.forward(z, idx, training=training,
                                     update_running=update_running)
        return out.data.reshape(len(idx), self.config.image_size, self.config.image_size)

    def score_batch(self, images: np.ndarray, ascii_codes,
                    training: bool = False, update_running: bool = False) -> np.ndarray:
        idx = self.ascii_to_index(ascii_codes)
        x = np.asarray(images).reshape(len(idx), 1, self.config.image_size,
                                       self.config.image_size)
        out = self.discriminator.forward(x, idx, training=training,
                                         update_running=update_running)
        return out.data


def sample_noise(count: int, seed, dim: int = 100) -> np.ndarray:
    """Deterministic standard-normal noise vectors, one per row."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.standard_normal((count, dim)).astype(np.float32)


def embed(model: GanModel, ascii_code: int) -> np.ndarray:
    """The generator-side embedding row for a character (copy)."""
    idx = model.charset.index_of(ascii_code)
    return model.generator.embed.table.data[idx].copy()


def generate(model: GanModel, ascii_code: int, z: np.ndarray) -> GlyphImage:
    """One glyph for one character, in inference mode (running batch-norm
    statistics, deterministic given params)."""
    z = np.asarray(z, dtype=np.float32).reshape(1, -1)
    img = model.generate_batch([ascii_code], z)[0]
    return GlyphImage(np.clip(img.astype(np.float64), 0.0, 1.0))


def discriminate(model: GanModel, image, ascii_code: int) -> float:
    """Matching score for (image, character), strictly inside (0, 1)."""
    px = image.pixels if isinstance(image, GlyphImage) else np.asarray(image)
    if px.shape != (model.config.image_size, model.config.image_size):
        raise DimMismatchError(
            f"image shape {px.shape}, want {(model.config.image_size,) * 2}")
    s = model.score_batch(px[None, ...].astype(np.float32), [ascii_code])[0]
    return float(np.clip(s, SCORE_EPS, 1.0 - SCORE_EPS))
