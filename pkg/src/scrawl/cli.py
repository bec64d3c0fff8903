"""Command-line entry point.

Subcommands: train, sample, profile, compose, verify. Every option can also
come from a flat ``key = value`` config file (UTF-8, ``#`` comments) passed
with --config; command-line flags override config-file values, which
override built-in defaults. The effective configuration is echoed to the
diagnostic stream at the start of each run.

Exit codes: 0 success, 1 invalid configuration or precondition, 2 I/O
failure, 3 training error. Data goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .composer import (
    ControllerState,
    HandwritingProfile,
    converge,
    gan_glyph_source,
    load_profile,
    save_profile,
)
from .data import CHARSETS, load_corpus, load_idx_dataset
from .errors import (
    ConfigInvalidError,
    IgnoredPairError,
    OutOfCharsetError,
    ScrawlError,
    SegmentationError,
)
from .metrics import measure_word_image
from .pgm import read_pgm, write_pgm
from .training import (
    TrainConfig,
    load_checkpoint,
    restore_model,
    save_checkpoint,
    train,
    verify,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_TRAINING = 3


def _bool(v: str) -> bool:
    return v.strip().lower() in ("1", "true", "yes", "on")


# dest -> (type, default, help); None default means "must be provided"
_OPTIONS = {
    "train": {
        "images": (str, None, "IDX image file"),
        "labels": (str, None, "IDX label file"),
        "epochs": (int, 10, "training epochs"),
        "batch_size": (int, 64, "samples per batch (>= 2)"),
        "seed": (int, 0, "RNG seed"),
        "lr_g": (float, 2e-4, "generator learning rate"),
        "lr_d": (float, 2e-4, "discriminator learning rate"),
        "mismatch_weight": (float, 0.5, "weight of the wrong-character term"),
        "charset": (str, "digits", "digits | letters"),
        "checkpoint_interval": (int, 0, "steps between checkpoints (0 = final only)"),
        "limit": (int, 0, "use only the first N samples (0 = all)"),
        "out_dir": (str, "out", "output directory"),
    },
    "sample": {
        "checkpoint": (str, None, "trained checkpoint"),
        "chars": (str, None, "characters, one grid row each"),
        "per_char": (int, 8, "noise draws per character"),
        "seed": (int, 0, "RNG seed"),
        "out": (str, "samples.pgm", "output PGM path"),
    },
    "profile": {
        "manifest": (str, None, "corpus manifest (word\\twriter\\tfile per line)"),
        "charset": (str, "letters", "digits | letters"),
        "threshold": (float, 0.5, "ink threshold"),
        "out": (str, "profile.bin", "output profile path"),
    },
    "compose": {
        "word": (str, None, "word to compose"),
        "checkpoint": (str, None, "trained checkpoint"),
        "profile": (str, None, "handwriting profile file"),
        "seed": (int, 0, "RNG seed"),
        "max_iters": (int, 20, "controller iterations budget"),
        "eta": (float, 0.5, "controller step size"),
        "eps_spacing": (float, 0.5, "spacing tolerance, px"),
        "eps_angle": (float, 2.0, "angle tolerance, degrees"),
        "strict": (_bool, False, "fail instead of using defaults for untracked pairs"),
        "out_dir": (str, "out", "output directory"),
    },
    "verify": {
        "checkpoint": (str, None, "trained checkpoint"),
        "image": (str, None, "glyph image (PGM)"),
        "char": (str, None, "claimed character"),
    },
}

_REQUIRED = {
    "train": ("images", "labels"),
    "sample": ("checkpoint", "chars"),
    "profile": ("manifest",),
    "compose": ("word", "checkpoint", "profile"),
    "verify": ("checkpoint", "image", "char"),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scrawl",
        description="handwriting glyph GAN training, profiling, and word composition")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, options in _OPTIONS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="flat key = value config file")
        for dest, (typ, default, help_text) in options.items():
            flag = "--" + dest.replace("_", "-")
            if typ is _bool:
                p.add_argument(flag, dest=dest, action="store_const", const=True,
                               default=None, help=help_text)
            else:
                p.add_argument(flag, dest=dest, type=typ, default=None,
                               help=f"{help_text} (default {default})")
    return parser


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; blank lines and # comments ignored."""
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigInvalidError(f"{path}:{lineno}: expected key = value")
            key, _, raw = line.partition("=")
            values[key.strip().replace("-", "_")] = raw.strip()
    return values


def _effective_config(command: str, args: argparse.Namespace) -> dict:
    spec = _OPTIONS[command]
    cfg = {dest: default for dest, (_, default, _) in spec.items()}
    if args.config is not None:
        file_values = read_config_file(args.config)
        for key, raw in file_values.items():
            if key not in spec:
                raise ConfigInvalidError(f"unknown config key {key!r} for {command}")
            cfg[key] = spec[key][0](raw)
    for dest in spec:
        value = getattr(args, dest)
        if value is not None:
            cfg[dest] = value
    for dest in _REQUIRED[command]:
        if cfg[dest] is None:
            raise ConfigInvalidError(f"--{dest.replace('_', '-')} is required")
    return cfg


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _print_config(command: str, cfg: dict) -> None:
    _log(f"[scrawl {command}] effective configuration:")
    for key in sorted(cfg):
        _log(f"  {key} = {cfg[key]}")


def _charset(name: str):
    if name not in CHARSETS:
        raise ConfigInvalidError(f"unknown charset {name!r} (digits | letters)")
    return CHARSETS[name]


def _require_inputs(*paths) -> None:
    for p in paths:
        if not os.path.exists(p):
            raise FileNotFoundError(f"input file not found: {p}")


def cmd_train(cfg: dict) -> int:
    charset = _charset(cfg["charset"])
    _require_inputs(cfg["images"], cfg["labels"])
    dataset = load_idx_dataset(cfg["images"], cfg["labels"])
    if cfg["limit"]:
        dataset = dataset.subset(slice(0, cfg["limit"]))
    config = TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], seed=cfg["seed"],
        lr_g=cfg["lr_g"], lr_d=cfg["lr_d"], mismatch_weight=cfg["mismatch_weight"],
        charset=charset, checkpoint_interval=cfg["checkpoint_interval"],
        out_dir=cfg["out_dir"])
    config.validate()
    if dataset.labels.max() >= charset.size or dataset.labels.min() < 0:
        raise ConfigInvalidError("dataset labels fall outside the charset")
    os.makedirs(cfg["out_dir"], exist_ok=True)

    def on_step(rec):
        if rec.step % 50 == 0 or rec.step == 1:
            _log(f"step {rec.step}: d_loss={rec.d_loss_real + rec.d_loss_fake + rec.d_loss_mismatch:.4f} "
                 f"g_loss={rec.g_loss:.4f} s_real={rec.s_real:.3f} "
                 f"s_fake={rec.s_fake:.3f} s_mis={rec.s_mismatch:.3f}")

    try:
        checkpoint, log = train(config, dataset, log_cb=on_step)
    except (ConfigInvalidError, OutOfCharsetError, OSError):
        raise
    except Exception as e:  # loop-internal failures map to the training exit code
        raise RuntimeError(f"training failed: {e}") from e
    ckpt_path = os.path.join(cfg["out_dir"], "checkpoint_final.ckpt")
    save_checkpoint(checkpoint, ckpt_path)
    log_path = os.path.join(cfg["out_dir"], "train_log.csv")
    with open(log_path, "w", encoding="utf-8", newline="") as f:
        f.write(log.to_csv())
    _log(f"wrote {ckpt_path} and {log_path} ({len(log)} steps)")
    return EXIT_OK


def cmd_sample(cfg: dict) -> int:
    _require_inputs(cfg["checkpoint"])
    model = restore_model(load_checkpoint(cfg["checkpoint"]))
    chars = cfg["chars"]
    if not chars or cfg["per_char"] < 1:
        raise ConfigInvalidError("need at least one char and per-char >= 1")
    codes = []
    for ch in chars:
        if ord(ch) not in model.charset:
            raise OutOfCharsetError(
                f"char {ch!r} not in model charset '{model.charset.name}'")
        codes.append(ord(ch))
    rows, cols = len(codes), cfg["per_char"]
    rng = np.random.default_rng(cfg["seed"])
    z = rng.standard_normal((rows * cols, model.config.noise_dim)).astype(np.float32)
    all_codes = [c for c in codes for _ in range(cols)]
    images = model.generate_batch(all_codes, z)
    size = model.config.image_size
    grid = images.reshape(rows, cols, size, size).transpose(0, 2, 1, 3) \
        .reshape(rows * size, cols * size)
    out_dir = os.path.dirname(cfg["out"])
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    write_pgm(cfg["out"], grid)
    _log(f"wrote {cfg['out']}: {rows}x{cols} grid, {rows * size}x{cols * size} px")
    return EXIT_OK


def cmd_profile(cfg: dict) -> int:
    charset = _charset(cfg["charset"])
    _require_inputs(cfg["manifest"])
    corpus = load_corpus(cfg["manifest"], charset)
    if len(corpus) == 0:
        raise ConfigInvalidError(f"corpus manifest {cfg['manifest']} has no records")
    profile = HandwritingProfile(charset.name)
    used = skipped_records = ignored_pairs = 0
    for record in corpus:
        try:
            measurements = measure_word_image(record.word, record.image,
                                              cfg["threshold"])
        except SegmentationError:
            skipped_records += 1
            continue
        used += 1
        for m in measurements:
            try:
                profile.update(m.first, m.second, m.spacing, m.angle)
            except IgnoredPairError:
                ignored_pairs += 1
    out_dir = os.path.dirname(cfg["out"])
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    save_profile(profile, cfg["out"])
    covered, total = profile.coverage()
    print(f"records used: {used}  skipped: {skipped_records}  "
          f"ignored pairs: {ignored_pairs}")
    print(f"cells with data: {covered} / {total}")
    _log(f"wrote {cfg['out']}")
    return EXIT_OK


def cmd_compose(cfg: dict) -> int:
    _require_inputs(cfg["checkpoint"], cfg["profile"])
    model = restore_model(load_checkpoint(cfg["checkpoint"]))
    profile = load_profile(cfg["profile"])
    word = cfg["word"]
    if not word:
        raise ConfigInvalidError("word must be non-empty")
    for ch in word:
        if ord(ch) not in model.charset:
            raise OutOfCharsetError(
                f"char {ch!r} not in model charset '{model.charset.name}'")
    state = ControllerState(eta=cfg["eta"], eps_spacing=cfg["eps_spacing"],
                            eps_angle=cfg["eps_angle"])
    result = converge(word, gan_glyph_source(model), profile, state,
                      max_iters=cfg["max_iters"], seed=cfg["seed"],
                      allow_defaults=not cfg["strict"])
    os.makedirs(cfg["out_dir"], exist_ok=True)
    canvas_path = os.path.join(cfg["out_dir"], f"compose_{word}.pgm")
    write_pgm(canvas_path, result.composition.canvas.pixels)
    csv_path = os.path.join(cfg["out_dir"], "objectives.csv")
    pairs = [f"p{i}_{a}{b}" for i, (a, b) in enumerate(zip(word, word[1:]))]
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        header = ["iteration"]
        for name in pairs:
            header += [f"{name}_spacing", f"{name}_angle"]
        f.write(",".join(header) + "\n")
        for it, objectives in enumerate(result.history, 1):
            row = [str(it)]
            for o in objectives:
                row += [repr(o.spacing_objective), repr(o.angle_objective)]
            f.write(",".join(row) + "\n")
    status = "converged" if result.converged else "non-convergence"
    _log(f"{status} after {result.iterations} iteration(s); "
         f"wrote {canvas_path} and {csv_path}")
    return EXIT_OK


def cmd_verify(cfg: dict) -> int:
    _require_inputs(cfg["checkpoint"], cfg["image"])
    model = restore_model(load_checkpoint(cfg["checkpoint"]))
    ch = cfg["char"]
    if len(ch) != 1:
        raise ConfigInvalidError("--char wants exactly one character")
    if ord(ch) not in model.charset:
        raise OutOfCharsetError(
            f"char {ch!r} not in model charset '{model.charset.name}'")
    image = read_pgm(cfg["image"])
    score = verify(model, image, ord(ch))
    print(f"{score:.9f}")
    return EXIT_OK


_HANDLERS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "profile": cmd_profile,
    "compose": cmd_compose,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    command = args.command
    try:
        cfg = _effective_config(command, args)
    except (ConfigInvalidError, ValueError) as e:
        _log(f"error: {e}")
        return EXIT_CONFIG
    except OSError as e:
        _log(f"error: {e}")
        return EXIT_IO
    _print_config(command, cfg)
    try:
        return _HANDLERS[command](cfg)
    except (ConfigInvalidError, OutOfCharsetError) as e:
        _log(f"error: {e}")
        return EXIT_CONFIG
    except (OSError, ScrawlError) as e:
        _log(f"error: {e}")
        return EXIT_IO
    except RuntimeError as e:
        _log(f"error: {e}")
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
