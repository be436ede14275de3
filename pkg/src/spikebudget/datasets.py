"""Dataset loading: MNIST from IDX files, with a bundled-digits fallback.

MNIST is read from IDX containers under a data directory (SPIKEBUDGET_DATA
or --data). When no MNIST files are available, the scikit-learn handwritten
digits set (1797 8x8 images, bundled with the library, no download) stands
in: each class is split into train/test pools FIRST, upscaled to 28x28, and
then augmented with small random shifts and rotations until the requested
per-class counts are reached. The split-before-augment order keeps any
augmented test image derived only from test originals.

The dataset build uses its own fixed seed, independent of the run seed, so
every config/seed trains and evaluates on identical data.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .encoding import load_idx_file

DATA_ENV_VAR = "SPIKEBUDGET_DATA"
DATASET_BUILD_SEED = 0xD161757
IMAGE_HW = (28, 28)

MNIST_FILES = {
    "train_images": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "train_labels": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    "test_images": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    "test_labels": ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
}


@dataclass
class DatasetSplits:
    """Flat float images in [0,1] with integer labels, ready to rate-encode."""

    name: str
    train_x: np.ndarray  # (N, 784) float32
    train_y: np.ndarray  # (N,) int64
    test_x: np.ndarray
    test_y: np.ndarray
    image_hw: tuple[int, int] = IMAGE_HW
    num_classes: int = 10


def _find_idx_file(root: Path, names: tuple[str, ...]) -> Path | None:
    for name in names:
        for suffix in ("", ".gz"):
            p = root / (name + suffix)
            if p.exists():
                return p
    return None


def mnist_files_present(data_dir: str | os.PathLike | None) -> bool:
    if data_dir is None:
        return False
    root = Path(data_dir)
    return all(
        _find_idx_file(root, names) is not None for names in MNIST_FILES.values()
    )


def _subsample_per_class(x, y, per_class: int, num_classes: int = 10):
    keep = []
    for c in range(num_classes):
        idx = np.flatnonzero(y == c)[:per_class]
        if len(idx) < per_class:
            raise ValueError(f"class {c}: only {len(idx)} samples, need {per_class}")
        keep.append(idx)
    keep = np.concatenate(keep)
    return x[keep], y[keep]


def load_mnist(data_dir, train_per_class: int | None = None,
               test_per_class: int | None = None) -> DatasetSplits:
    """Read the four MNIST IDX files (optionally .gz) and normalize to [0,1]."""
    root = Path(data_dir)
    arrays = {}
    for key, names in MNIST_FILES.items():
        path = _find_idx_file(root, names)
        if path is None:
            raise FileNotFoundError(f"no IDX file for {key} under {root}")
        _, arrays[key] = load_idx_file(path)
    train_x = arrays["train_images"].reshape(len(arrays["train_images"]), -1)
    test_x = arrays["test_images"].reshape(len(arrays["test_images"]), -1)
    train_x = (train_x / 255.0).astype(np.float32)
    test_x = (test_x / 255.0).astype(np.float32)
    train_y = arrays["train_labels"].astype(np.int64)
    test_y = arrays["test_labels"].astype(np.int64)
    if train_per_class is not None:
        train_x, train_y = _subsample_per_class(train_x, train_y, train_per_class)
    if test_per_class is not None:
        test_x, test_y = _subsample_per_class(test_x, test_y, test_per_class)
    return DatasetSplits("mnist", train_x, train_y, test_x, test_y)


# ---------------------------------------------------------------------------
# Bundled-digits fallback


def _upscale(img8: np.ndarray) -> np.ndarray:
    # 8x8 -> 28x28 bilinear; digits pixels are 0..16
    big = ndimage.zoom(img8 / 16.0, 3.5, order=1)
    return np.clip(big, 0.0, 1.0)


def _augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    shifted = ndimage.shift(
        img, (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)),
        order=1, mode="constant",
    )
    rotated = ndimage.rotate(
        shifted, rng.uniform(-12.0, 12.0), reshape=False, order=1, mode="constant",
    )
    return np.clip(rotated, 0.0, 1.0)


def _grow_pool(pool: list[np.ndarray], target: int,
               rng: np.random.Generator) -> np.ndarray:
    out = list(pool)
    while len(out) < target:
        src = pool[int(rng.integers(len(pool)))]
        out.append(_augment(src, rng))
    return np.stack(out[:target])


def load_digits_upscaled(train_per_class: int = 256,
                         test_per_class: int = 128) -> DatasetSplits:
    """Build a 28x28 10-class set from the bundled scikit-learn digits."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    rng = np.random.default_rng(DATASET_BUILD_SEED)
    train_x, train_y, test_x, test_y = [], [], [], []
    for c in range(10):
        imgs = raw.images[raw.target == c]
        n_train_orig = int(round(len(imgs) * 0.6))
        big = [_upscale(img) for img in imgs]
        train_pool = big[:n_train_orig]
        test_pool = big[n_train_orig:]
        train_imgs = _grow_pool(train_pool, train_per_class, rng)
        test_imgs = _grow_pool(test_pool, test_per_class, rng)
        train_x.append(train_imgs.reshape(train_per_class, -1))
        test_x.append(test_imgs.reshape(test_per_class, -1))
        train_y.append(np.full(train_per_class, c, dtype=np.int64))
        test_y.append(np.full(test_per_class, c, dtype=np.int64))
    return DatasetSplits(
        "digits",
        np.concatenate(train_x).astype(np.float32),
        np.concatenate(train_y),
        np.concatenate(test_x).astype(np.float32),
        np.concatenate(test_y),
    )


_DIGITS_CACHE: dict[tuple[int, int], DatasetSplits] = {}


def load_dataset(name: str = "auto", data_dir=None,
                 train_per_class: int | None = 256,
                 test_per_class: int | None = 128) -> DatasetSplits:
    """Resolve a dataset by name: 'mnist', 'digits', or 'auto'.

    'auto' prefers MNIST IDX files under data_dir (or SPIKEBUDGET_DATA) and
    falls back to the bundled digits build.
    """
    if data_dir is None:
        data_dir = os.environ.get(DATA_ENV_VAR)
    if name == "mnist":
        return load_mnist(data_dir, train_per_class, test_per_class)
    if name == "digits":
        key = (train_per_class or 256, test_per_class or 128)
        if key not in _DIGITS_CACHE:
            _DIGITS_CACHE[key] = load_digits_upscaled(*key)
        return _DIGITS_CACHE[key]
    if name == "auto":
        if mnist_files_present(data_dir):
            return load_mnist(data_dir, train_per_class, test_per_class)
        return load_dataset("digits", None, train_per_class, test_per_class)
    raise ValueError(f"unknown dataset {name!r}")
