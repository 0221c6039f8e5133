"""CIFAR binary loading, synthetic datasets, normalisation and batching."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError, TruncatedFileError

CIFAR_STATS = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
}

_CIFAR_FILES = {
    ("cifar10", "train"): [f"data_batch_{i}.bin" for i in range(1, 6)],
    ("cifar10", "test"): ["test_batch.bin"],
    ("cifar100", "train"): ["train.bin"],
    ("cifar100", "test"): ["test.bin"],
}
_CIFAR_SUBDIRS = {"cifar10": "cifar-10-batches-bin", "cifar100": "cifar-100-binary"}
_PIXELS = 32 * 32 * 3


@dataclass
class LabeledImageSet:
    images: np.ndarray  # N x H x W x C
    labels: np.ndarray  # N
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> "LabeledImageSet":
        return LabeledImageSet(self.images[idx], self.labels[idx], self.num_classes)


def normalize(x: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    return (x - np.asarray(mean, dtype=x.dtype)) / np.asarray(std, dtype=x.dtype)


def denormalize(x: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    return x * np.asarray(std, dtype=x.dtype) + np.asarray(mean, dtype=x.dtype)


def parse_cifar_records(buf: bytes, label_bytes: int, source: str = "<bytes>") -> Tuple[np.ndarray, np.ndarray]:
    """Decode raw records into ``uint8`` images (N x 32 x 32 x 3) and labels.

    The last label byte of each record is the label used (the fine label for
    CIFAR-100).
    """
    rec = label_bytes + _PIXELS
    if len(buf) % rec:
        n_full = len(buf) // rec
        raise TruncatedFileError(
            f"{source}: truncated record at byte offset {n_full * rec} "
            f"({len(buf)} bytes is not a multiple of the {rec}-byte record size)"
        )
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, rec)
    labels = raw[:, label_bytes - 1].astype(np.int64)
    images = raw[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def _resolve_cifar_dir(root: Path, variant: str) -> Path:
    first = _CIFAR_FILES[(variant, "test")][0]
    for cand in (root, root / _CIFAR_SUBDIRS[variant]):
        if (cand / first).exists():
            return cand
    return root


def load_cifar(directory, variant: str = "cifar10", split: str = "train",
               normalized: bool = True) -> LabeledImageSet:
    """Read the standard CIFAR binary batches under ``directory``."""
    if (variant, split) not in _CIFAR_FILES:
        raise ValueError(f"unknown CIFAR variant/split {variant!r}/{split!r}")
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    root = _resolve_cifar_dir(root, variant)
    label_bytes = 1 if variant == "cifar10" else 2
    num_classes = 10 if variant == "cifar10" else 100
    imgs, labs = [], []
    for fname in _CIFAR_FILES[(variant, split)]:
        path = root / fname
        if not path.exists():
            raise FileNotFoundError(f"missing CIFAR file {path}")
        im, lb = parse_cifar_records(path.read_bytes(), label_bytes, str(path))
        bad = np.nonzero(lb >= num_classes)[0]
        if bad.size:
            off = int(bad[0]) * (label_bytes + _PIXELS)
            raise FormatError(f"{path}: label {lb[bad[0]]} out of range at byte offset {off}")
        imgs.append(im)
        labs.append(lb)
    images = np.concatenate(imgs).astype(np.float32) / 255.0
    if normalized:
        images = normalize(images, *CIFAR_STATS[variant])
    return LabeledImageSet(images, np.concatenate(labs), num_classes)


def synth_dataset(num_classes: int, n_per_class: int, H: int, W: int, seed: int = 0,
                  noise: float = 0.3, channels: int = 3) -> LabeledImageSet:
    """Class-conditional sinusoidal gratings plus Gaussian noise.

    Each class has its own spatial frequency, orientation and per-channel
    phase.  Samples are ordered class-major.
    """
    if min(num_classes, n_per_class, H, W) < 1:
        raise ValueError("all synth_dataset sizes must be positive")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
    images = np.empty((num_classes * n_per_class, H, W, channels), dtype=np.float64)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    for c in range(num_classes):
        angle = np.pi * c / num_classes
        freq = 1.0 + c % 3
        phases = 2 * np.pi * (c + 1) * np.arange(channels) / (channels * num_classes)
        arg = 2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy)
        proto = np.stack([np.sin(arg + ph) for ph in phases], axis=-1)
        sl = slice(c * n_per_class, (c + 1) * n_per_class)
        images[sl] = proto + noise * rng.standard_normal((n_per_class, H, W, channels))
    return LabeledImageSet(images, labels, num_classes)


def batch_indices(n: int, batch_size: int, shuffle: bool = False, seed: int = 0) -> Iterator[np.ndarray]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def batches(data: LabeledImageSet, batch_size: int, shuffle: bool = False,
            seed: int = 0) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)``; the last batch may be short."""
    for idx in batch_indices(len(data), batch_size, shuffle, seed):
        yield data.images[idx], data.labels[idx]


def random_flip(x: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    """Horizontally mirror each image with probability ``p``."""
    flip = rng.random(len(x)) < p
    out = x.copy()
    out[flip] = out[flip, :, ::-1]
    return out


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0
    return out
