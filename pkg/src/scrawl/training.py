"""Matching-aware adversarial training.

Each discriminator update sees three input types: real images with the
correct character (target real), generated images (target fake), and real
images paired with a deliberately wrong character (target fake, weighted).
The generator update then pushes its samples toward scoring real.

Also here: versioned binary checkpoints with exact round-trips, the CSV
training log, a nearest-class-mean conditional-fidelity probe, and the
discriminator-as-verifier entry point.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import CHARSETS, DIGITS, Charset, GlyphImage, IdxDataset, make_batches, pad_batch, pad_to
from .errors import (
    CharsetTooSmallError,
    ConfigInvalidError,
    CorruptFileError,
    DegenerateBatchError,
    DimMismatchError,
    EmptyClassError,
    VersionMismatchError,
)
from .gan import SCORE_EPS, GanConfig, GanModel

CHECKPOINT_MAGIC = b"SCRAWLCP"
CHECKPOINT_VERSION = 1

LOG_COLUMNS = ("step", "d_loss_real", "d_loss_fake", "d_loss_mismatch",
               "g_loss", "s_real", "s_fake", "s_mismatch")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    mismatch_weight: float = 0.5
    charset: Charset = field(default_factory=lambda: DIGITS)
    checkpoint_interval: int = 0  # steps between interval checkpoints; 0 = final only
    out_dir: str | None = None

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigInvalidError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigInvalidError(
                f"batch_size must be >= 2 for batch statistics, got {self.batch_size}")
        if self.mismatch_weight < 0:
            raise ConfigInvalidError(
                f"mismatch_weight must be >= 0, got {self.mismatch_weight}")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ConfigInvalidError("learning rates must be positive")
        if self.checkpoint_interval < 0:
            raise ConfigInvalidError("checkpoint_interval must be >= 0")


@dataclass
class StepRecord:
    step: int
    d_loss_real: float
    d_loss_fake: float
    d_loss_mismatch: float
    g_loss: float
    s_real: float
    s_fake: float
    s_mismatch: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, rec: StepRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("step indices must be strictly increasing")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def to_csv(self) -> str:
        lines = [",".join(LOG_COLUMNS)]
        for r in self.records:
            lines.append(",".join([str(r.step)] + [
                repr(getattr(r, c)) for c in LOG_COLUMNS[1:]]))
        return "\n".join(lines) + "\n"


def mismatch_chars(labels: np.ndarray, charset_size: int, seed) -> np.ndarray:
    """For each label index, a uniformly random *different* index from the
    same charset. Deterministic under the seed (int or Generator)."""
    if charset_size < 2:
        raise CharsetTooSmallError("need at least 2 characters to mismatch")
    labels = np.asarray(labels)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    draw = rng.integers(0, charset_size - 1, size=labels.shape)
    return np.where(draw >= labels, draw + 1, draw)


def _scores_and_loss(model: GanModel, images, idx, target: float, training=True,
                     update_running=True):
    scores = model.discriminator.forward(images, idx, training, update_running)
    t = np.full(scores.data.shape, target, dtype=scores.data.dtype)
    return scores, nn.bce_loss(scores, t)


def discriminator_step(model: GanModel, opt_d: nn.Adam, real_images: np.ndarray,
                       labels: np.ndarray, config: TrainConfig, rng) -> StepRecord:
    """One discriminator update over the three input types. Touches only
    discriminator parameters; the generator (including its running batch-norm
    statistics) is left bit-identical."""
    b = len(real_images)
    if b < 2:
        raise DegenerateBatchError("discriminator step needs batch size >= 2")
    idx = np.asarray(labels)
    real = nn.Tensor(real_images.reshape(b, 1, *real_images.shape[-2:]))

    nn.zero_grad(model.d_params())
    z = rng.standard_normal((b, model.config.noise_dim)).astype(real_images.dtype)
    fake = model.generator.forward(nn.Tensor(z), idx, training=True,
                                   update_running=False).detach()
    wrong = mismatch_chars(idx, model.charset.size, rng)

    s_real, l_real = _scores_and_loss(model, real, idx, 1.0)
    s_fake, l_fake = _scores_and_loss(model, fake, idx, 0.0)
    s_mis, l_mis = _scores_and_loss(model, real, wrong, 0.0)

    total = nn.add(nn.add(l_real, l_fake),
                   nn.scale_shift(l_mis, config.mismatch_weight))
    nn.backward(total)
    opt_d.step()

    return StepRecord(
        step=-1,
        d_loss_real=float(l_real.data),
        d_loss_fake=float(l_fake.data),
        d_loss_mismatch=float(l_mis.data),
        g_loss=float("nan"),
        s_real=float(s_real.data.mean()),
        s_fake=float(s_fake.data.mean()),
        s_mismatch=float(s_mis.data.mean()),
    )


def generator_step(model: GanModel, opt_g: nn.Adam, labels: np.ndarray,
                   config: TrainConfig, rng, dtype=np.float32) -> float:
    """One generator update: push generated (image, char) pairs toward a real
    score. Discriminator parameters and running statistics are untouched."""
    idx = np.asarray(labels)
    b = len(idx)
    if b < 2:
        raise DegenerateBatchError("generator step needs batch size >= 2")
    nn.zero_grad(model.g_params())
    d_params = model.d_params()
    for p in d_params:
        p.requires_grad = False
    try:
        z = rng.standard_normal((b, model.config.noise_dim)).astype(dtype)
        fake = model.generator.forward(nn.Tensor(z), idx, training=True)
        scores = model.discriminator.forward(fake, idx, training=True,
                                             update_running=False)
        loss = nn.bce_loss(scores, np.ones(b, dtype=scores.data.dtype))
        nn.backward(loss)
        opt_g.step()
    finally:
        for p in d_params:
            p.requires_grad = True
    return float(loss.data)


@dataclass
class Checkpoint:
    """Complete training state: enough to resume bit-exactly."""

    version: int
    charset_name: str
    noise_dim: int
    embed_dim: int
    image_size: int
    step: int
    params: dict            # name -> float32 ndarray (includes running stats)
    opt_d: dict             # {"t": int, "moments": {name: ndarray}}
    opt_g: dict
    rng_state: dict | None  # PCG64 state dict

    def config(self) -> GanConfig:
        return GanConfig(charset=CHARSETS[self.charset_name],
                         noise_dim=self.noise_dim, embed_dim=self.embed_dim,
                         image_size=self.image_size)


def snapshot(model: GanModel, opt_d: nn.Adam | None = None,
             opt_g: nn.Adam | None = None, rng=None, step: int = 0) -> Checkpoint:
    params = {p.name: p.data.copy() for p in model.g_params() + model.d_params()}
    for name, arr in model.named_buffers().items():
        params[name] = arr.copy()

    def opt_state(opt):
        if opt is None:
            return {"t": 0, "moments": {}}
        return {"t": opt.t,
                "moments": {name: arr.copy() for name, arr in opt.state_arrays()}}

    rng_state = None
    if rng is not None:
        rng_state = rng.bit_generator.state
    return Checkpoint(
        version=CHECKPOINT_VERSION,
        charset_name=model.charset.name,
        noise_dim=model.config.noise_dim,
        embed_dim=model.config.embed_dim,
        image_size=model.config.image_size,
        step=step,
        params=params,
        opt_d=opt_state(opt_d),
        opt_g=opt_state(opt_g),
        rng_state=rng_state,
    )


def restore_model(ckpt: Checkpoint) -> GanModel:
    model = GanModel(ckpt.config(), seed=0)
    named = model.named_params()
    buffers = model.named_buffers()
    for name, arr in ckpt.params.items():
        if name in named:
            if named[name].data.shape != arr.shape:
                raise CorruptFileError(f"checkpoint param {name} has shape "
                                       f"{arr.shape}, model wants {named[name].data.shape}")
            named[name].data = arr.copy()
        elif name in buffers:
            buffers[name][...] = arr
        else:
            raise CorruptFileError(f"checkpoint has unknown parameter {name!r}")
    return model


def restore_optimizers(ckpt: Checkpoint, model: GanModel,
                       config: TrainConfig) -> tuple:
    opt_d = nn.Adam(model.d_params(), lr=config.lr_d, beta1=config.beta1,
                    beta2=config.beta2)
    opt_g = nn.Adam(model.g_params(), lr=config.lr_g, beta1=config.beta1,
                    beta2=config.beta2)
    for opt, state in ((opt_d, ckpt.opt_d), (opt_g, ckpt.opt_g)):
        opt.t = state["t"]
        moments = state["moments"]
        if moments:
            for kind, arrays in (("m", opt.m), ("v", opt.v)):
                for p, arr in zip(opt.params, arrays):
                    key = f"{kind}.{p.name}"
                    if key in moments:
                        arr[...] = moments[key]
    return opt_d, opt_g


# --- checkpoint serialization ---------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("ascii")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(f) -> str:
    (n,) = struct.unpack("<H", _read_exact(f, 2))
    return _read_exact(f, n).decode("ascii")


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CorruptFileError(f"file truncated: wanted {n} bytes, got {len(data)}")
    return data


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    arr32 = np.ascontiguousarray(arr, dtype="<f4")
    head = _pack_str(name) + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr32.tobytes()


def _unpack_array(f) -> tuple:
    name = _unpack_str(f)
    (ndim,) = struct.unpack("<B", _read_exact(f, 1))
    shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4").reshape(shape)
    return name, data.copy()


def _pack_rng(state: dict | None) -> bytes:
    if state is None:
        return struct.pack("<B", 0)
    inner = state["state"]
    return (struct.pack("<B", 1)
            + int(inner["state"]).to_bytes(16, "little")
            + int(inner["inc"]).to_bytes(16, "little")
            + struct.pack("<II", int(state["has_uint32"]), int(state["uinteger"])))


def _unpack_rng(f) -> dict | None:
    (flag,) = struct.unpack("<B", _read_exact(f, 1))
    if flag == 0:
        return None
    s = int.from_bytes(_read_exact(f, 16), "little")
    inc = int.from_bytes(_read_exact(f, 16), "little")
    has_u32, uint = struct.unpack("<II", _read_exact(f, 8))
    return {"bit_generator": "PCG64", "state": {"state": s, "inc": inc},
            "has_uint32": has_u32, "uinteger": uint}


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", ckpt.version))
    out.write(_pack_str(ckpt.charset_name))
    out.write(struct.pack("<III", ckpt.noise_dim, ckpt.embed_dim, ckpt.image_size))
    out.write(struct.pack("<Q", ckpt.step))
    out.write(_pack_rng(ckpt.rng_state))
    out.write(struct.pack("<I", len(ckpt.params)))
    for name in ckpt.params:  # insertion order is the canonical order
        out.write(_pack_array(name, ckpt.params[name]))
    for opt in (ckpt.opt_d, ckpt.opt_g):
        out.write(struct.pack("<QI", opt["t"], len(opt["moments"])))
        for name, arr in opt["moments"].items():
            out.write(_pack_array(name, arr))
    return out.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(ckpt))


def parse_checkpoint(data: bytes) -> Checkpoint:
    f = io.BytesIO(data)
    magic = f.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise CorruptFileError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(f, 4))
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    charset_name = _unpack_str(f)
    if charset_name not in CHARSETS:
        raise CorruptFileError(f"unknown charset tag {charset_name!r}")
    noise_dim, embed_dim, image_size = struct.unpack("<III", _read_exact(f, 12))
    (step,) = struct.unpack("<Q", _read_exact(f, 8))
    rng_state = _unpack_rng(f)
    (n_params,) = struct.unpack("<I", _read_exact(f, 4))
    params = {}
    for _ in range(n_params):
        name, arr = _unpack_array(f)
        params[name] = arr
    opts = []
    for _ in range(2):
        t, n = struct.unpack("<QI", _read_exact(f, 12))
        moments = {}
        for _ in range(n):
            name, arr = _unpack_array(f)
            moments[name] = arr
        opts.append({"t": int(t), "moments": moments})
    return Checkpoint(version=version, charset_name=charset_name,
                      noise_dim=noise_dim, embed_dim=embed_dim,
                      image_size=image_size, step=int(step), params=params,
                      opt_d=opts[0], opt_g=opts[1], rng_state=rng_state)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())


# --- the training loop ------------------------------------------------------------


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(epoch,)))


def train(config: TrainConfig, dataset: IdxDataset,
          resume: Checkpoint | None = None, log_cb=None) -> tuple:
    """Run the full alternating loop: one discriminator update then one
    generator update per batch. Fully reproducible under (config, dataset,
    seed); returns (final Checkpoint, TrainLog).

    ``resume`` continues bit-exactly from a previous checkpoint (epochs in
    ``config`` count the *additional* epochs to run).
    """
    config.validate()
    if len(dataset) == 0:
        raise ConfigInvalidError("dataset is empty")
    if dataset.labels.min() < 0 or dataset.labels.max() >= config.charset.size:
        raise ConfigInvalidError("dataset labels fall outside the charset")
    if config.batch_size > len(dataset):
        raise ConfigInvalidError(
            f"batch_size {config.batch_size} exceeds dataset size {len(dataset)}")

    images = dataset.images.astype(np.float32, copy=False)
    if images.shape[1] != images.shape[2]:
        raise ConfigInvalidError("training images must be square")

    if resume is not None:
        model = restore_model(resume)
        opt_d, opt_g = restore_optimizers(resume, model, config)
        rng = np.random.default_rng()
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        step = resume.step
    else:
        model = GanModel(GanConfig(charset=config.charset), seed=config.seed)
        opt_d = nn.Adam(model.d_params(), lr=config.lr_d, beta1=config.beta1,
                        beta2=config.beta2)
        opt_g = nn.Adam(model.g_params(), lr=config.lr_g, beta1=config.beta1,
                        beta2=config.beta2)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed,
                                                           spawn_key=(0xC0FFEE,)))
        step = 0

    if images.shape[1] != model.config.image_size:
        images = pad_batch(images, model.config.image_size)
    padded = IdxDataset(images, dataset.labels)

    steps_per_epoch = len(dataset) // config.batch_size
    first_epoch = step // max(steps_per_epoch, 1)

    log = TrainLog()
    for epoch in range(first_epoch, first_epoch + config.epochs):
        batches = make_batches(padded, config.batch_size,
                               _epoch_rng(config.seed, epoch))
        for batch_images, batch_labels in batches:
            rec = discriminator_step(model, opt_d, batch_images, batch_labels,
                                     config, rng)
            g_loss = generator_step(model, opt_g, batch_labels, config, rng)
            step += 1
            rec.step = step
            rec.g_loss = g_loss
            log.append(rec)
            if log_cb is not None:
                log_cb(rec)
            if config.checkpoint_interval and config.out_dir and \
                    step % config.checkpoint_interval == 0:
                ck = snapshot(model, opt_d, opt_g, rng, step)
                save_checkpoint(ck, f"{config.out_dir}/checkpoint_{step:06d}.ckpt")

    final = snapshot(model, opt_d, opt_g, rng, step)
    return final, log


# --- evaluation --------------------------------------------------------------------


def class_mean_images(dataset: IdxDataset, n_classes: int,
                      image_size: int | None = None) -> np.ndarray:
    """Per-class mean image (n_classes, H, W); raises EmptyClassError if a
    class has no samples."""
    images = dataset.images
    if image_size is not None and images.shape[1] != image_size:
        images = pad_batch(images.astype(np.float32, copy=False), image_size)
    means = np.zeros((n_classes, images.shape[1], images.shape[2]), dtype=np.float64)
    for c in range(n_classes):
        mask = dataset.labels == c
        if not mask.any():
            raise EmptyClassError(f"reference dataset has no samples of class {c}")
        means[c] = images[mask].mean(axis=0)
    return means


def nearest_class_mean(images: np.ndarray, means: np.ndarray) -> np.ndarray:
    """Classify by smallest pixelwise L2 distance to the class means."""
    flat = images.reshape(len(images), -1).astype(np.float64)
    mflat = means.reshape(len(means), -1)
    d2 = ((flat[:, None, :] - mflat[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def evaluate_conditional_fidelity(provider, reference: IdxDataset,
                                  n_samples: int, seed,
                                  charset: Charset | None = None) -> float:
    """Fraction of generated images whose nearest class-mean (computed from
    the reference set) matches the conditioned character.

    ``provider`` is anything with generate_batch(ascii_codes, z) and the
    GanModel config attributes; a GanModel or a stub both work.
    """
    charset = charset or provider.config.charset
    size = provider.config.image_size
    means = class_mean_images(reference, charset.size, size)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    labels = np.arange(n_samples) % charset.size
    codes = [charset.ascii_at(i) for i in labels]
    z = rng.standard_normal((n_samples, provider.config.noise_dim)).astype(np.float32)
    generated = []
    for start in range(0, n_samples, 256):
        sl = slice(start, min(start + 256, n_samples))
        generated.append(provider.generate_batch(codes[sl], z[sl]))
    predicted = nearest_class_mean(np.concatenate(generated), means)
    return float((predicted == labels).mean())


def verify(model: GanModel, image, ascii_code: int) -> float:
    """Score an (image, claimed character) pair with the trained
    discriminator, inference mode. Smaller images are zero-padded up to the
    model's input size."""
    px = image.pixels if isinstance(image, GlyphImage) else np.asarray(image)
    size = model.config.image_size
    if px.shape[0] > size or px.shape[1] > size:
        raise DimMismatchError(f"image {px.shape} larger than model input {size}")
    if px.shape != (size, size):
        px = pad_to(px, size)
    s = model.score_batch(px[None].astype(np.float32), [ascii_code])[0]
    return float(np.clip(s, SCORE_EPS, 1.0 - SCORE_EPS))
