import numpy as np
import pytest

from scrawl.data import DIGITS, GlyphImage
from scrawl.errors import DimMismatchError, OutOfCharsetError
from scrawl.gan import (
    GanConfig,
    GanModel,
    discriminate,
    embed,
    generate,
    sample_noise,
)


@pytest.fixture(scope="module")
def model():
    return GanModel(GanConfig(), seed=11)


def test_embed_returns_table_row(model):
    e = embed(model, 48)
    np.testing.assert_array_equal(e, model.generator.embed.table.data[0])
    assert e.shape == (model.config.embed_dim,)


def test_embed_deterministic(model):
    np.testing.assert_array_equal(embed(model, 53), embed(model, 53))


def test_embed_out_of_charset(model):
    with pytest.raises(OutOfCharsetError):
        embed(model, 65)  # 'A' on the digit charset


def test_generate_shape_and_range(model):
    z = sample_noise(1, 3, model.config.noise_dim)[0]
    img = generate(model, ord("7"), z)
    assert isinstance(img, GlyphImage)
    assert (img.height, img.width) == (32, 32)
    assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0


def test_generate_deterministic(model):
    z = sample_noise(1, 4, model.config.noise_dim)[0]
    a = generate(model, ord("3"), z)
    b = generate(model, ord("3"), z)
    np.testing.assert_array_equal(a.pixels, b.pixels)


def test_generate_noise_sensitivity(model):
    z = sample_noise(2, 5, model.config.noise_dim)
    a = generate(model, ord("1"), z[0])
    b = generate(model, ord("1"), z[1])
    assert np.any(a.pixels != b.pixels)


def test_generate_dim_mismatch(model):
    with pytest.raises(DimMismatchError):
        generate(model, ord("1"), np.zeros(7, np.float32))


def test_discriminate_score_in_open_interval(model):
    rng = np.random.default_rng(0)
    for _ in range(5):
        img = rng.random((32, 32))
        s = discriminate(model, img, ord("2"))
        assert 0.0 < s < 1.0
        assert np.isfinite(s)


def test_discriminate_deterministic(model):
    img = np.random.default_rng(1).random((32, 32))
    assert discriminate(model, img, ord("8")) == discriminate(model, img, ord("8"))


def test_discriminate_dim_mismatch(model):
    with pytest.raises(DimMismatchError):
        discriminate(model, np.zeros((28, 28)), ord("1"))


def test_sample_noise_deterministic():
    a = sample_noise(5, 7)
    b = sample_noise(5, 7)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (5, 100)


def test_sample_noise_single():
    assert sample_noise(1, 0, dim=64).shape == (1, 64)
    with pytest.raises(ValueError):
        sample_noise(0, 0)


def test_sample_noise_moments():
    z = sample_noise(10000, 123)
    assert np.all(np.abs(z.mean(axis=0)) < 0.05)
    assert np.all(np.abs(z.std(axis=0) - 1.0) < 0.05)


@pytest.mark.parametrize("batch", [2, 16])
def test_generator_shape_chain(model, batch):
    z = sample_noise(batch, 9, model.config.noise_dim)
    codes = [ord("0") + i % 10 for i in range(batch)]
    out = model.generate_batch(codes, z)
    assert out.shape == (batch, 32, 32)
    assert model.generator.last_feature_shapes == [
        (batch, 256, 4, 4),
        (batch, 128, 8, 8),
        (batch, 64, 16, 16),
        (batch, 1, 32, 32),
    ]


@pytest.mark.parametrize("batch", [2, 16])
def test_discriminator_shape_chain(model, batch):
    rng = np.random.default_rng(10)
    images = rng.random((batch, 32, 32)).astype(np.float32)
    codes = [ord("0") + i % 10 for i in range(batch)]
    scores = model.score_batch(images, codes)
    assert scores.shape == (batch,)
    assert model.discriminator.last_feature_shapes == [
        (batch, 64, 16, 16),
        (batch, 128, 8, 8),
        (batch, 256, 4, 4),
        (batch, 4096),
        (batch,),
    ]


def test_conditioning_changes_output(model):
    # different chars, same noise: embeddings differ, so images differ
    z = sample_noise(1, 21, model.config.noise_dim)
    a = generate(model, ord("0"), z[0])
    b = generate(model, ord("9"), z[0])
    assert np.abs(a.pixels - b.pixels).mean() > 0


def test_model_init_deterministic():
    m1 = GanModel(GanConfig(), seed=3)
    m2 = GanModel(GanConfig(), seed=3)
    for p1, p2 in zip(m1.g_params() + m1.d_params(),
                      m2.g_params() + m2.d_params()):
        np.testing.assert_array_equal(p1.data, p2.data)
