"""Dataset resolution: real MNIST IDX files when present, otherwise a surrogate.

The surrogate upsamples scikit-learn's bundled 8x8 digits to 28x28 and augments
them with shifts, blur and pixel noise, then writes genuine IDX files so the
same parser path is exercised.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from dcdpsgd.grad_engine import dataset_from_idx, write_idx
from dcdpsgd.rng import stream

DATA_DIR_ENV = "DCDPSGD_DATA_DIR"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
SURROGATE_FILES = {
    "train": ("surrogate-train-images-idx3-ubyte", "surrogate-train-labels-idx1-ubyte"),
    "test": ("surrogate-test-images-idx3-ubyte", "surrogate-test-labels-idx1-ubyte"),
}


class DataMissingError(FileNotFoundError):
    pass


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, Path.home() / ".cache" / "dcdpsgd"))


def _find(directory: Path, name: str) -> Optional[Path]:
    for candidate in (directory / name, directory / (name + ".gz")):
        if candidate.exists():
            return candidate
    return None


def find_mnist(directory=None) -> Optional[Tuple[Path, Path, Path, Path]]:
    directory = Path(directory) if directory is not None else default_data_dir()
    paths = [_find(directory, f) for split in ("train", "test") for f in MNIST_FILES[split]]
    return tuple(paths) if all(paths) else None


def _augment(images8: np.ndarray, rng) -> np.ndarray:
    """Upsample each 8x8 digit to 24x24, place it at a random offset on 28x28, blur, add noise."""
    from scipy import ndimage

    out = np.empty((images8.shape[0], 28, 28))
    for i, img8 in enumerate(images8):
        img = ndimage.zoom(img8 / 16.0, 3, order=1)
        canvas = np.zeros((28, 28))
        dy, dx = rng.integers(0, 5, size=2)
        canvas[dy : dy + 24, dx : dx + 24] = img
        canvas = ndimage.gaussian_filter(canvas, rng.uniform(0.3, 1.0))
        canvas += rng.normal(0.0, 0.05, canvas.shape)
        out[i] = canvas
    return np.clip(out * 255.0, 0, 255)


def make_mnist_surrogate(directory, n_train: int = 10000, n_test: int = 2000, seed: int = 0):
    """Write surrogate train/test IDX files built from disjoint digit pools."""
    from sklearn.datasets import load_digits

    digits = load_digits()
    rng = stream(seed, "surrogate")
    order = rng.permutation(len(digits.target))
    cut = int(0.75 * len(order))
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for split, pool, count in (("train", order[:cut], n_train), ("test", order[cut:], n_test)):
        pick = rng.integers(0, pool.size, size=count)
        idx = pool[pick]
        imgs = _augment(digits.images[idx], rng)
        img_name, lab_name = SURROGATE_FILES[split]
        write_idx(directory / img_name, imgs.astype(np.uint8))
        write_idx(directory / lab_name, digits.target[idx].astype(np.uint8))
        paths += [directory / img_name, directory / lab_name]
    return tuple(paths)


def load_mnist_class(directory=None, n_train: Optional[int] = None, seed: int = 0,
                     allow_surrogate: bool = True):
    """(train, test, source) where source is 'mnist' or 'surrogate'."""
    directory = Path(directory) if directory is not None else default_data_dir()
    found = find_mnist(directory)
    if found:
        train = dataset_from_idx(found[0], found[1])
        test = dataset_from_idx(found[2], found[3])
        source = "mnist"
    else:
        if not allow_surrogate:
            raise DataMissingError(f"no MNIST IDX files under {directory}")
        paths = [directory / f for split in ("train", "test") for f in SURROGATE_FILES[split]]
        if not all(p.exists() for p in paths):
            paths = make_mnist_surrogate(directory, n_train or 10000, seed=seed)
        train = dataset_from_idx(paths[0], paths[1])
        test = dataset_from_idx(paths[2], paths[3])
        source = "surrogate"
    if n_train is not None and n_train < train.n:
        pick = np.sort(stream(seed, "mnist_subset").choice(train.n, n_train, replace=False))
        train = train.subset(pick)
    return train, test, source
