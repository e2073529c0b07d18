"""Datasets: synthetic generation, binary formats, augmentation and splits.

THDS dataset layout (all integers little-endian)::

    "THDS" | version u16 | H u16 | W u16 | C u16 | count u64
    per record: nlabels u16 | nlabels x u32 labels | H*W*C u8 pixels (H, W, C order)

Pixels are stored as bytes and exposed as floats in [0, 1].
"""
from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError

DATASET_MAGIC = b"THDS"
DATASET_VERSION = 1
CIFAR_RECORD = 1 + 32 * 32 * 3


@dataclass
class Dataset:
    pixels: np.ndarray  # uint8 (n, H, W, C)
    labels: tuple[tuple[int, ...], ...]
    ids: np.ndarray = field(default=None)  # position in the originating file

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be (n, H, W, C), got shape {self.pixels.shape}")
        self.labels = tuple(tuple(sorted(int(x) for x in lab)) for lab in self.labels)
        if len(self.labels) != len(self.pixels):
            raise ValueError(f"{len(self.pixels)} images but {len(self.labels)} label sets")
        if any(len(lab) == 0 for lab in self.labels):
            raise ValueError("every image needs at least one label")
        if self.ids is None:
            self.ids = np.arange(len(self.pixels), dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.pixels)

    @property
    def images(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    def subset(self, positions) -> Dataset:
        positions = np.asarray(positions, dtype=np.int64)
        return Dataset(self.pixels[positions], [self.labels[i] for i in positions], self.ids[positions])

    def primary_labels(self) -> np.ndarray:
        return np.array([lab[0] for lab in self.labels], dtype=np.int64)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Dataset)
            and np.array_equal(self.pixels, other.pixels)
            and self.labels == other.labels
            and np.array_equal(self.ids, other.ids)
        )


# -- synthetic data ----------------------------------------------------------


def _class_pattern(c: int, classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    r, g, b = colorsys.hsv_to_rgb(c / classes, 0.6, 0.7)
    angle = np.pi * c / classes
    freq = rng.uniform(1.0, 3.0)
    yy, xx = np.mgrid[0:size, 0:size] / size
    wave = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
    return np.array([r, g, b])[None, None, :] + 0.15 * wave[..., None]


def nearest_centroid_accuracy(images: np.ndarray, labels: np.ndarray) -> float:
    """Training-set accuracy of a nearest-class-mean classifier in pixel space."""
    x = images.reshape(len(images), -1)
    classes = np.unique(labels)
    centroids = np.stack([x[labels == c].mean(axis=0) for c in classes])
    d = ((x[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float((classes[d.argmin(axis=1)] == labels).mean())


def generate_synthetic(classes: int, per_class: int, size: int = 16, seed: int = 0,
                       noise: float = 0.08, min_accuracy: float = 0.9) -> Dataset:
    """Class-conditional images: one colour/stripe pattern per class plus noise.

    The result is checked with a nearest-centroid classifier and rejected if
    it is not separable to ``min_accuracy``.
    """
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if per_class < 1:
        raise ConfigError(f"need at least 1 image per class, got {per_class}")
    if size < 1:
        raise ConfigError(f"image size must be positive, got {size}")
    rng = np.random.default_rng(seed)
    patterns = [_class_pattern(c, classes, size, rng) for c in range(classes)]
    images, labels = [], []
    for c in range(classes):
        for _ in range(per_class):
            img = patterns[c] + noise * rng.standard_normal((size, size, 3))
            images.append(img)
            labels.append((c,))
    pixels = np.clip(np.rint(np.stack(images) * 255.0), 0, 255).astype(np.uint8)
    acc = nearest_centroid_accuracy(pixels.astype(np.float64) / 255.0, np.array([lab[0] for lab in labels]))
    if acc <= min_accuracy:
        raise ConfigError(f"synthetic classes are not separable: nearest-centroid accuracy {acc:.3f}")
    return Dataset(pixels, labels)


# -- file formats ------------------------------------------------------------


def dataset_to_bytes(ds: Dataset) -> bytes:
    h, w, c = ds.shape
    parts = [DATASET_MAGIC, struct.pack("<HHHHQ", DATASET_VERSION, h, w, c, len(ds))]
    for lab, img in zip(ds.labels, ds.pixels):
        parts.append(struct.pack(f"<H{len(lab)}I", len(lab), *lab))
        parts.append(img.tobytes())
    return b"".join(parts)


def dataset_from_bytes(buf: bytes) -> Dataset:
    view = memoryview(buf)
    pos = 0

    def need(n: int, what: str):
        if pos + n > len(view):
            raise FormatError(f"truncated dataset while reading {what}", pos)

    need(4, "magic")
    if bytes(view[:4]) != DATASET_MAGIC:
        raise FormatError(f"bad magic {bytes(view[:4])!r}, expected {DATASET_MAGIC!r}", 0)
    pos = 4
    need(16, "header")
    version, h, w, c, count = struct.unpack_from("<HHHHQ", view, pos)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", pos)
    pos += 16
    npix = h * w * c
    pixels = np.empty((count, h, w, c), dtype=np.uint8)
    labels = []
    for i in range(count):
        need(2, f"record {i} label count")
        (nl,) = struct.unpack_from("<H", view, pos)
        pos += 2
        need(4 * nl, f"record {i} labels")
        labels.append(struct.unpack_from(f"<{nl}I", view, pos))
        pos += 4 * nl
        need(npix, f"record {i} pixels")
        pixels[i] = np.frombuffer(view, dtype=np.uint8, count=npix, offset=pos).reshape(h, w, c)
        pos += npix
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last record", pos)
    try:
        return Dataset(pixels, labels)
    except ValueError as exc:
        raise FormatError(str(exc), pos) from None


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def read_cifar10_binary(path) -> Dataset:
    """CIFAR-10 binary batch: records of 1 label byte + 1024 R, 1024 G, 1024 B bytes."""
    buf = Path(path).read_bytes()
    if len(buf) % CIFAR_RECORD:
        whole = len(buf) - len(buf) % CIFAR_RECORD
        raise FormatError(f"CIFAR-10 file is not a whole number of {CIFAR_RECORD}-byte records", whole)
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    pixels = raw[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return Dataset(np.ascontiguousarray(pixels), [(int(x),) for x in raw[:, 0]])


def load_dataset(path, fmt: str = "thds") -> Dataset:
    if fmt == "thds":
        return dataset_from_bytes(Path(path).read_bytes())
    if fmt == "cifar10":
        return read_cifar10_binary(path)
    raise ConfigError(f"unknown dataset format {fmt!r} (expected 'thds' or 'cifar10')")


# -- augmentation ------------------------------------------------------------


@dataclass
class AugmentConfig:
    flip: bool = True
    crop_padding: int = 2

    def validate(self) -> None:
        if self.crop_padding < 0:
            raise ConfigError(f"augment.crop_padding must be >= 0, got {self.crop_padding}")


def flip_horizontal(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1, :]


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator, training: bool = True) -> np.ndarray:
    """Random horizontal flip (p=0.5) and reflect-pad + random crop; identity at eval time."""
    if not training:
        return image
    out = image
    if cfg.flip and rng.random() < 0.5:
        out = flip_horizontal(out)
    p = cfg.crop_padding
    if p > 0:
        h, w = image.shape[:2]
        padded = np.pad(out, ((p, p), (p, p), (0, 0)), mode="reflect")
        top, left = rng.integers(0, 2 * p + 1, size=2)
        out = padded[top:top + h, left:left + w, :]
    return out


# -- splits ------------------------------------------------------------------


@dataclass
class SplitConfig:
    queries_per_class: int = 10
    train_per_class: int = 25
    seed: int = 0

    def validate(self) -> None:
        if self.queries_per_class < 1 or self.train_per_class < 1:
            raise ConfigError("split.queries_per_class and split.train_per_class must be >= 1")


def split_protocol(ds: Dataset, queries_per_class: int, train_per_class: int, seed: int = 0):
    """Per class: draw query images, everything else is database; train is drawn from the database.

    Classes are keyed by each image's smallest label. Returns
    ``(train, query, database)``; each split keeps the original ids and order.
    """
    rng = np.random.default_rng(seed)
    keys = ds.primary_labels()
    query, train, database = [], [], []
    for c in np.unique(keys):
        members = np.flatnonzero(keys == c)
        if len(members) < queries_per_class + train_per_class:
            raise ConfigError(
                f"class {c} has {len(members)} images; cannot take {queries_per_class} queries "
                f"and {train_per_class} training images"
            )
        perm = rng.permutation(members)
        query.extend(perm[:queries_per_class])
        rest = perm[queries_per_class:]
        database.extend(rest)
        train.extend(rest[:train_per_class])
    return tuple(ds.subset(np.sort(np.array(part, dtype=np.int64))) for part in (train, query, database))


def stack_augmented(images: np.ndarray, positions: Sequence[int], cfg: AugmentConfig,
                    rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(images[i], cfg, rng) for i in positions])
