"""Desk-scale synthetic datasets, toy networks and an AONTENSR dataset loader."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError
from ..tensor_net import LayerSpec, NetworkSpec, load_tensor, save_tensor


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ConfigurationError(f"{len(self.x)} samples but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def class_count(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, None))


def save_dataset(ds: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tensor(directory / "x.aont", ds.x)
    save_tensor(directory / "y.aont", ds.y.astype(np.float32))


def load_dataset(directory) -> Dataset:
    """Read ``x.aont`` and ``y.aont`` (labels stored as float32 integers)."""
    directory = Path(directory)
    for name in ("x.aont", "y.aont"):
        if not (directory / name).is_file():
            raise FileNotFoundError(f"dataset file not found: {directory / name}")
    y = load_tensor(directory / "y.aont")
    if np.any(y != np.round(y)) or np.any(y < 0):
        raise ConfigurationError("labels must be non-negative integers")
    return Dataset(load_tensor(directory / "x.aont"), y.astype(np.int64))


def gaussian_blobs(n: int, n_classes: int = 4, dim: int = 16, spread: float = 1.0,
                   separation: float = 3.0, seed: int = 0) -> Dataset:
    """Isotropic Gaussian clusters with random centers of norm ``separation``."""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_classes, dim))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    y = rng.integers(0, n_classes, n)
    x = centers[y] + spread * rng.standard_normal((n, dim))
    return Dataset(x, y)


def separable_pair(n: int, dim: int = 8, margin: float = 0.5, seed: int = 0) -> Dataset:
    """Two classes split by a random hyperplane with a guaranteed margin."""
    rng = np.random.default_rng(seed)
    normal = rng.standard_normal(dim)
    normal /= np.linalg.norm(normal)
    x = rng.standard_normal((n, dim))
    s = x @ normal
    y = (s > 0).astype(np.int64)
    x += np.outer(np.where(y == 1, margin, -margin), normal)
    return Dataset(x, y)


def _patterns(size: int) -> np.ndarray:
    i, j = np.mgrid[0:size, 0:size]
    return np.stack([
        (i // 2) % 2,             # horizontal stripes
        (j // 2) % 2,             # vertical stripes
        ((i + j) // 3) % 2,       # diagonal stripes
        ((i // 4) + (j // 4)) % 2,  # checkerboard
    ]).astype(np.float64) * 2 - 1


def pattern_images(n: int, size: int = 16, noise: float = 0.8, seed: int = 0) -> Dataset:
    """Four texture classes on ``size x size`` single-channel images.

    Each image is a randomly shifted copy of its class texture with random
    contrast plus Gaussian pixel noise.
    """
    rng = np.random.default_rng(seed)
    base = _patterns(size)
    y = rng.integers(0, len(base), n)
    shifts = rng.integers(0, size, (n, 2))
    contrast = rng.uniform(0.5, 1.0, n)
    x = np.empty((n, 1, size, size))
    for k in range(n):
        img = np.roll(base[y[k]], tuple(shifts[k]), axis=(0, 1))
        x[k, 0] = contrast[k] * img + noise * rng.standard_normal((size, size))
    return Dataset(x, y)


# ---------------------------------------------------------------------------
# toy networks


def _he(rng, fan_in, shape) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def toy_mlp(in_dim: int = 16, hidden: int = 32, classes: int = 4, seed: int = 0) -> NetworkSpec:
    rng = np.random.default_rng(seed)
    return NetworkSpec(
        layers=[
            LayerSpec("dense", "fc1", in_channels=in_dim, out_channels=hidden,
                      weights=_he(rng, in_dim, (hidden, in_dim)), bias=np.zeros(hidden)),
            LayerSpec("relu", "act1"),
            LayerSpec("dense", "fc2", in_channels=hidden, out_channels=classes,
                      weights=_he(rng, hidden, (classes, hidden)), bias=np.zeros(classes)),
        ],
        input_shape=(in_dim,),
        class_count=classes,
        name="toy-mlp",
    )


def toy_cnn(size: int = 16, classes: int = 4, width: int = 8, seed: int = 0) -> NetworkSpec:
    rng = np.random.default_rng(seed)
    c1, c2 = width, 2 * width
    return NetworkSpec(
        layers=[
            LayerSpec("conv2d", "conv1", kernel=3, stride=2, padding=1, in_channels=1, out_channels=c1,
                      weights=_he(rng, 9, (c1, 9)), bias=np.zeros(c1)),
            LayerSpec("relu", "act1"),
            LayerSpec("conv2d", "conv2", kernel=3, stride=2, padding=1, in_channels=c1, out_channels=c2,
                      weights=_he(rng, 9 * c1, (c2, 9 * c1)), bias=np.zeros(c2)),
            LayerSpec("relu", "act2"),
            LayerSpec("avg_pool", "gap"),
            LayerSpec("dense", "fc", in_channels=c2, out_channels=classes,
                      weights=_he(rng, c2, (classes, c2)), bias=np.zeros(classes)),
        ],
        input_shape=(1, size, size),
        class_count=classes,
        name="toy-cnn",
    )
