"""Datasets: CIFAR-10 binary batches, synthetic template images, augmentation."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    """Images plus labels.

    ``images`` are either uint8 pixels (scaled by 1/255 on access) or floats
    used as-is; ``mean``/``std`` are then applied per channel.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    augment: bool = False

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def get(self, idx, rng=None):
        x = self.images[idx]
        x = x.astype(np.float32) / 255.0 if x.dtype == np.uint8 else x.astype(np.float32, copy=True)
        if rng is not None:
            x = augment(x, rng, size=x.shape[-1])
        if self.mean is not None:
            x -= self.mean.reshape(1, -1, 1, 1)
        if self.std is not None:
            x /= self.std.reshape(1, -1, 1, 1)
        return x, self.labels[idx]

    def batches(self, batch_size, order=None, rng=None, drop_last=False):
        """Yield (x, y) in ``order`` (default: stored order)."""
        idx = np.arange(len(self)) if order is None else np.asarray(order)
        stop = len(idx) - len(idx) % batch_size if drop_last else len(idx)
        for s in range(0, stop, batch_size):
            yield self.get(idx[s : s + batch_size], rng)


def crop_flip(batch, offsets, flips, pad=4):
    """Zero-pad by ``pad``, take the crop at ``offsets[i] = (dy, dx)``, then flip where ``flips[i]``."""
    n, c, h, w = batch.shape
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=batch.dtype)
    padded[:, :, pad : pad + h, pad : pad + w] = batch
    out = np.empty_like(batch)
    for i, ((dy, dx), f) in enumerate(zip(offsets, flips)):
        if not (0 <= dy <= 2 * pad and 0 <= dx <= 2 * pad):
            raise DataError(f"crop offset {(dy, dx)} outside [0, {2 * pad}]")
        crop = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = crop[:, :, ::-1] if f else crop
    return out


def augment(batch, rng, size=32, pad=4):
    """Pad to (size + 2*pad)^2, random size x size crop, horizontal flip with p=0.5."""
    if batch.ndim != 4 or batch.shape[2:] != (size, size):
        raise DataError(f"augment expects {size}x{size} images, got {batch.shape}")
    n = batch.shape[0]
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    return crop_flip(batch, offsets, flips, pad)


def _read_batch_file(path: Path):
    if not path.is_file():
        raise DataError(f"missing CIFAR-10 file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    whole = len(raw) // RECORD_BYTES * RECORD_BYTES
    if whole != len(raw) or len(raw) == 0:
        raise DataError(f"{path}: truncated record at byte offset {whole} (file is {len(raw)} bytes)")
    recs = raw.reshape(-1, RECORD_BYTES)
    labels = recs[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataError(f"{path}: label {labels[bad[0]]} at byte offset {bad[0] * RECORD_BYTES}")
    return recs[:, 1:].reshape(-1, *CIFAR_SHAPE), labels


def resolve_data_dir(path=None) -> Path:
    path = path or os.environ.get("RESREP_DATA_DIR")
    if not path:
        raise DataError("no data directory given and RESREP_DATA_DIR is unset")
    path = Path(path)
    if (path / "cifar-10-batches-bin").is_dir():
        path = path / "cifar-10-batches-bin"
    return path


def count_records(path, split="train") -> int:
    """Record count implied by file sizes alone."""
    path = resolve_data_dir(path)
    files = TRAIN_FILES if split == "train" else TEST_FILES
    return sum((path / f).stat().st_size // RECORD_BYTES for f in files)


def load_cifar10(path=None, split="train") -> Dataset:
    """Load the standard binary batches: 1 label byte + 3072 channel-major pixels per record."""
    if split not in ("train", "test"):
        raise DataError(f"split must be 'train' or 'test', got {split!r}")
    path = resolve_data_dir(path)
    files = TRAIN_FILES if split == "train" else TEST_FILES
    parts = [_read_batch_file(path / f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, 10, split, CIFAR_MEAN, CIFAR_STD, augment=split == "train")


def make_synthetic(num_classes=10, n=1000, seed=0, noise=1.0, shape=(3, 16, 16), split="train", smooth=2) -> Dataset:
    """Gaussian class templates plus i.i.d. noise.

    Templates depend only on ``seed`` so train and test splits share them;
    ``smooth`` box-blurs the templates so they carry local structure a small
    CNN can pick up.
    """
    if n < num_classes:
        raise DataError("need at least one example per class")
    rng = np.random.default_rng(seed)
    templates = rng.standard_normal((num_classes, *shape))
    for _ in range(smooth):
        templates = _box3(templates)
    templates /= templates.std(axis=(1, 2, 3), keepdims=True)
    srng = np.random.default_rng([seed, 0 if split == "train" else 1])
    labels = srng.permutation(np.arange(n) % num_classes)
    images = templates[labels] + noise * srng.standard_normal((n, *shape))
    return Dataset(images.astype(np.float32), labels, num_classes, split)


def _box3(x):
    p = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="wrap")
    h, w = x.shape[2:]
    return sum(p[:, :, i : i + h, j : j + w] for i in range(3) for j in range(3)) / 9.0
