"""Datasets and augmentation for the desk-scale training pipeline."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor4, bilinear_sample_many

_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes


@dataclass
class Dataset:
    images: Tensor4
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != self.images.n:
            raise CheckpointError("label count does not match image count")


def load_cifar10_binary(path, max_items: int | None = None,
                        split: str = "train") -> Dataset:
    """Read the standard CIFAR-10 binary layout.

    ``path`` may be one ``.bin`` file or the directory holding the batch
    files (train: data_batch_1..5.bin, test: test_batch.bin).  Pixels are
    scaled to [0, 1] then per-channel standardized using statistics of the
    loaded subset.
    """
    if os.path.isdir(path):
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] \
            if split == "train" else ["test_batch.bin"]
        files = [os.path.join(path, n) for n in names]
    else:
        files = [path]
    chunks = []
    label_chunks = []
    remaining = max_items
    for fname in files:
        if remaining is not None and remaining <= 0:
            break
        raw = np.fromfile(fname, dtype=np.uint8)
        if raw.size % _RECORD:
            raise CheckpointError(
                f"{fname}: size {raw.size} not a multiple of {_RECORD}")
        recs = raw.reshape(-1, _RECORD)
        if remaining is not None:
            recs = recs[:remaining]
            remaining -= len(recs)
        labels = recs[:, 0]
        if labels.size and labels.max() > 9:
            raise CheckpointError(f"{fname}: label byte > 9")
        label_chunks.append(labels.astype(np.int64))
        chunks.append(recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    if chunks:
        images = np.concatenate(chunks)
        labels = np.concatenate(label_chunks)
    else:
        images = np.zeros((0, 3, 32, 32))
        labels = np.zeros(0, dtype=np.int64)
    if len(images):
        mean = images.mean(axis=(0, 2, 3), keepdims=True)
        std = images.std(axis=(0, 2, 3), keepdims=True)
        images = (images - mean) / np.maximum(std, 1e-8)
    return Dataset(Tensor4(images), labels, split)


def make_synthetic_dataset(classes: int, n: int, seed: int,
                           size: int = 32) -> Dataset:
    """Deterministic oriented-Gaussian-blob images, balanced across classes.

    Each class renders an elongated blob at a class-specific position and
    orientation with a class-specific channel mixture, plus small jitter
    and pixel noise; easily separable by a small CNN.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    center = (size - 1) / 2.0
    radius = size / 4.0
    images = np.empty((n, 3, size, size))
    palette = np.stack([np.roll([1.0, 0.55, 0.2], k % 3) * (0.7 + 0.3 * ((k // 3) % 2))
                        for k in range(classes)])
    for i in range(n):
        k = labels[i]
        phi = 2 * np.pi * k / classes
        cy = center + radius * np.sin(phi) + rng.normal(0, 1.0)
        cx = center + radius * np.cos(phi) + rng.normal(0, 1.0)
        theta = np.pi * k / classes + rng.normal(0, 0.12)
        u = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
        v = -(yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
        blob = np.exp(-(u ** 2 / (2 * 5.0 ** 2) + v ** 2 / (2 * 1.8 ** 2)))
        amp = rng.uniform(0.8, 1.2)
        images[i] = amp * palette[k][:, None, None] * blob[None]
        images[i] += rng.normal(0, 0.05, size=(3, size, size))
    return Dataset(Tensor4(images), labels, "synthetic")


def _rotate_images(batch: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rotate each image about its center by its angle (radians), bilinear."""
    b, c, h, w = batch.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    out = np.empty_like(batch)
    for i in range(b):
        cos, sin = np.cos(angles[i]), np.sin(angles[i])
        # inverse map: rotate output coords by -angle about the center
        sx = cos * (xx - cx) + sin * (yy - cy) + cx
        sy = -sin * (xx - cx) + cos * (yy - cy) + cy
        for ch in range(c):
            out[i, ch] = bilinear_sample_many(batch[i, ch], sy, sx)
    return out


def augment(batch: np.ndarray, flip: bool = False, crop: bool = False,
            rotate: bool = False, rng=None, pad: int = 4,
            max_angle_deg: float = 15.0) -> np.ndarray:
    """Random horizontal flips, random zero-padded crops, random rotations.

    Flips are decided per sample at p=0.5; crops pad by 4 then take a
    random full-size window; rotations are uniform within +-15 degrees.
    With all flags off this is the identity.
    """
    if not (flip or crop or rotate):
        return batch
    if rng is None:
        rng = np.random.default_rng()
    b, c, h, w = batch.shape
    out = batch
    if flip:
        decide = rng.random(b) < 0.5
        out = np.where(decide[:, None, None, None], out[:, :, :, ::-1], out)
    if crop:
        padded = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=out.dtype)
        padded[:, :, pad:pad + h, pad:pad + w] = out
        oy = rng.integers(0, 2 * pad + 1, size=b)
        ox = rng.integers(0, 2 * pad + 1, size=b)
        out = np.stack([padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
                        for i in range(b)])
    if rotate:
        if h != w:
            raise ValueError("rotation augmentation requires square images")
        angles = rng.uniform(-np.deg2rad(max_angle_deg),
                             np.deg2rad(max_angle_deg), size=b)
        out = _rotate_images(np.ascontiguousarray(out), angles)
    return out
