"""Synthetic image-classification data for desk-scale runs."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_eval.max())) + 1

    @property
    def image_shape(self) -> tuple:
        return self.x_train.shape[1:]

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "wb") as fh:
            np.savez(fh, x_train=self.x_train, y_train=self.y_train, x_eval=self.x_eval, y_eval=self.y_eval)

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path) as z:
            return cls(z["x_train"], z["y_train"], z["x_eval"], z["y_eval"])


def make_synthetic_dataset(
    seed: int = 0,
    classes: int = 8,
    samples: int = 1536,
    size: int = 12,
    channels: int = 3,
    noise: float = 1.2,
    eval_fraction: float = 0.25,
) -> Dataset:
    """Class-specific colored grating textures under random shifts and noise.

    Each class owns two plane-wave components with its own frequencies,
    orientations and per-channel color weights. A sample draws a random phase
    for each component (a translation of the texture), a random contrast and
    additive Gaussian pixel noise, so classes are separable only by local
    frequency/orientation/color content.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    n_comp = 2
    freq = rng.uniform(0.6, 2.4, size=(classes, n_comp))
    theta = rng.uniform(0.0, np.pi, size=(classes, n_comp))
    color = rng.normal(size=(classes, n_comp, channels))
    color /= np.linalg.norm(color, axis=-1, keepdims=True)

    labels = rng.permutation(np.arange(samples) % classes)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = rng.uniform(0.0, 2 * np.pi, size=(samples, n_comp))
    contrast = rng.uniform(0.7, 1.3, size=(samples, 1, 1, 1))
    images = np.zeros((samples, channels, size, size))
    for c in range(n_comp):
        f = freq[labels, c][:, None, None]
        th = theta[labels, c][:, None, None]
        arg = f * (np.cos(th) * xx + np.sin(th) * yy) + phase[:, c][:, None, None]
        wave = np.sin(arg)  # [S, H, W]
        images += color[labels, c][:, :, None, None] * wave[:, None]
    images = images * contrast + noise * rng.normal(size=images.shape)

    n_eval = int(round(samples * eval_fraction))
    return Dataset(images[n_eval:], labels[n_eval:], images[:n_eval], labels[:n_eval])


def batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches covering ``range(n)`` once; last one may be short."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
