import numpy as np
import pytest

from scrawl.data import IdxDataset, serialize_idx_images, serialize_idx_labels


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar-valued closure with respect to
    the array x (mutated in place and restored). The independent oracle for
    every analytic gradient in the library."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))


def blocky_digit_images(n: int | None = None, size: int = 28, seed: int = 0):
    """Real handwritten digit images (8x8 originals scaled up to ``size``)
    with labels; a deterministic offline stand-in for larger digit sets.

    When n exceeds the source count the extra samples are 1px translated
    copies of originals, never crossing into the last 500 samples so a
    held-out split at the tail stays disjoint.
    """
    from sklearn.datasets import load_digits

    digits = load_digits()
    base = digits.images / 16.0  # source range is 0..16
    labels = digits.target.astype(np.int64)
    scale = size // 8
    up = np.kron(base, np.ones((scale, scale)))
    pad = size - up.shape[1]
    if pad:
        up = np.pad(up, ((0, 0), (pad // 2, pad - pad // 2),
                         (pad // 2, pad - pad // 2)))
    up = up.astype(np.float32)
    if n is None or n <= len(up):
        sl = slice(0, n) if n else slice(None)
        return up[sl].copy(), labels[sl].copy()

    pool_end = len(up) - 500  # keep the tail pristine for held-out use
    rng = np.random.default_rng(seed)
    extra_images, extra_labels = [], []
    while len(up) + len(extra_images) < n:
        i = int(rng.integers(0, pool_end))
        dy, dx = (int(rng.integers(-1, 2)) for _ in range(2))
        img = np.roll(np.roll(up[i], dy, axis=0), dx, axis=1)
        extra_images.append(img)
        extra_labels.append(labels[i])
    images = np.concatenate([up[:pool_end], np.array(extra_images, np.float32),
                             up[pool_end:]])
    labs = np.concatenate([labels[:pool_end], np.array(extra_labels, np.int64),
                           labels[pool_end:]])
    return images, labs


def write_idx_pair(tmp_path, images: np.ndarray, labels: np.ndarray):
    img_path = tmp_path / "images.idx"
    lab_path = tmp_path / "labels.idx"
    img_path.write_bytes(serialize_idx_images(images))
    lab_path.write_bytes(serialize_idx_labels(labels))
    return img_path, lab_path


@pytest.fixture
def tiny_dataset() -> IdxDataset:
    """64 deterministic two-class synthetic glyphs: filled squares vs crosses."""
    return two_class_dataset(64)


def two_class_dataset(n: int, size: int = 28, seed: int = 1) -> IdxDataset:
    rng = np.random.default_rng(seed)
    images = np.zeros((n, size, size), dtype=np.float32)
    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        label = i % 2
        labels[i] = label
        jitter = int(rng.integers(-2, 3))
        c = size // 2 + jitter
        if label == 0:  # filled square
            images[i, c - 6 : c + 6, c - 6 : c + 6] = 1.0
        else:  # cross
            images[i, c - 8 : c + 8, c - 2 : c + 2] = 1.0
            images[i, c - 2 : c + 2, c - 8 : c + 8] = 1.0
    return IdxDataset(images, labels)
