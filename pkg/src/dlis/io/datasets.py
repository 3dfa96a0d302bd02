"""Labelled image sets: CIFAR-10 binary batches and seeded synthetic blobs."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..errors import DatasetError
from ..tensor import make_rng

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes - 1}]")

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.split, self.num_classes)

    def batches(self, batch_size):
        for lo in range(0, len(self), batch_size):
            yield self.images[lo:lo + batch_size], self.labels[lo:lo + batch_size]


def _read_cifar_file(path):
    if not os.path.isfile(path):
        raise DatasetError(f"missing CIFAR-10 batch file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise DatasetError(f"{path}: size {raw.size} is not a positive multiple of the "
                           f"{CIFAR_RECORD}-byte record")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetError(f"{path}: label {labels.max()} outside [0, 9]")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(directory, standardize=False):
    """Load the CIFAR-10 binary distribution from ``directory``.

    Pixels are scaled to [0, 1].  With ``standardize`` both splits are
    normalised per channel using the training-set mean and std.
    """
    parts = [_read_cifar_file(os.path.join(directory, f)) for f in CIFAR_TRAIN_FILES]
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    test_x, test_y = _read_cifar_file(os.path.join(directory, CIFAR_TEST_FILE))
    if standardize:
        mean = train_x.mean(axis=(0, 2, 3), keepdims=True)
        std = train_x.std(axis=(0, 2, 3), keepdims=True)
        train_x = (train_x - mean) / std
        test_x = (test_x - mean) / std
    return (Dataset(train_x, train_y, "train", 10), Dataset(test_x, test_y, "test", 10))


def synth_dataset(seed, n, classes=2, size=32, channels=3, noise=0.25, split="train"):
    """Class-conditional Gaussian-blob images.

    Each class owns one blob with a fixed centre, width and colour; samples
    add independent pixel noise.  Class templates depend only on ``seed`` and
    the geometry, so train and test sets drawn with different ``split`` tags
    share them.
    """
    if n < 1 or classes < 1:
        raise ValueError("n and classes must be >= 1")
    tmpl_rng = make_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    templates = np.empty((classes, channels, size, size))
    for k in range(classes):
        cy, cx = tmpl_rng.uniform(0.25 * size, 0.75 * size, size=2)
        width = tmpl_rng.uniform(0.12, 0.25) * size
        colour = tmpl_rng.uniform(0.2, 1.0, size=channels)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        templates[k] = colour[:, None, None] * blob
    sample_rng = make_rng(seed + (0 if split == "train" else 0x9E3779B97F4A7C15 % 2**63))
    labels = np.arange(n) % classes
    sample_rng.shuffle(labels)
    images = templates[labels] + noise * sample_rng.standard_normal((n, channels, size, size))
    return Dataset(np.clip(images, 0.0, 1.0).astype(np.float32), labels.astype(np.int64), split,
                   classes)
