"""Datasets, file loaders and the synthetic desk benchmark.

Supported on-disk formats:

``cifar10-bin``
    Concatenated 3073-byte records: one label byte, then 3x32x32 pixel bytes
    (channel-major, row-major). Pixels are scaled to [0, 1].
``idx``
    The classic magic-number format. ``path`` names the image file; labels
    come from ``labels_path`` or the sibling file with ``images`` replaced by
    ``labels`` in its name. Unsigned-byte images are scaled by 1/255, float32
    images are taken as-is. 3-D image arrays are read as single-channel.
``raw``
    Native little-endian container written by :func:`save_raw`::

        b"SCRW"  u32 version=1
        u32 N, u32 C, u32 H, u32 W, u32 num_classes
        N x int32 labels
        N*C*H*W x float32 pixels in [0, 1]
``desk``
    Not a file: ``path`` is ``"<task>:<split>"`` (e.g. ``"A:train"``) and the
    synthetic benchmark is generated in memory.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np

FORMATS = ("cifar10-bin", "idx", "raw", "desk")
RAW_MAGIC = b"SCRW"
RAW_VERSION = 1
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("image values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def take(self, indices, split=None):
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], split or self.split, self.num_classes)

    def astype(self, dtype):
        return Dataset(self.images.astype(dtype), self.labels, self.split, self.num_classes)


def subset(dataset, size=2000, seed=0):
    """Deterministic ``size``-example subset (original order preserved)."""
    if size >= len(dataset):
        return dataset
    idx = np.sort(np.random.default_rng(seed).choice(len(dataset), size=size, replace=False))
    return dataset.take(idx)


# ---------------------------------------------------------------- loaders

def _read(path):
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from e
    if not raw:
        raise DataError(f"{path} is empty")
    return raw


def load_cifar10_bin(path, num_classes=10, split="train"):
    raw = _read(path)
    if len(raw) % CIFAR_RECORD:
        raise DataError(f"{path}: size {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= num_classes:
        raise DataError(f"{path}: label {labels.max()} exceeds {num_classes - 1}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255)
    return Dataset(images, labels, split, num_classes)


_IDX_TYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _read_idx(path):
    raw = _read(path)
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_TYPES:
        raise DataError(f"{path}: bad idx magic number")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated idx header")
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = np.dtype(_IDX_TYPES[raw[2]])
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) - header != expected:
        raise DataError(f"{path}: payload is {len(raw) - header} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(shape)


def load_idx(path, labels_path=None, num_classes=10, split="train"):
    if labels_path is None:
        base = os.path.basename(path)
        if "images" not in base:
            raise DataError(f"{path}: cannot infer labels file; pass labels_path")
        labels_path = os.path.join(os.path.dirname(path), base.replace("images", "labels"))
    images = _read_idx(path)
    labels = _read_idx(labels_path).astype(np.int64)
    if labels.ndim != 1:
        raise DataError(f"{labels_path}: labels must be 1-D")
    if labels.max(initial=0) >= num_classes:
        raise DataError(f"{labels_path}: label {labels.max()} exceeds {num_classes - 1}")
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4:
        raise DataError(f"{path}: expected 3-D or 4-D images, got {images.ndim}-D")
    if images.dtype == np.uint8:
        images = images.astype(np.float32) / np.float32(255)
    else:
        images = images.astype(np.float32)
    return Dataset(images, labels, split, num_classes)


def save_raw(dataset, path):
    n, c, h, w = dataset.images.shape
    with open(path, "wb") as f:
        f.write(RAW_MAGIC + struct.pack("<6I", RAW_VERSION, n, c, h, w, dataset.num_classes))
        f.write(dataset.labels.astype("<i4").tobytes())
        f.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())


def load_raw(path, split="train"):
    raw = _read(path)
    if raw[:4] != RAW_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 28:
        raise DataError(f"{path}: truncated header")
    version, n, c, h, w, classes = struct.unpack("<6I", raw[4:28])
    if version != RAW_VERSION:
        raise DataError(f"{path}: unsupported raw version {version}")
    expected = 28 + 4 * n + 4 * n * c * h * w
    if len(raw) != expected:
        raise DataError(f"{path}: {len(raw)} bytes, header implies {expected}")
    labels = np.frombuffer(raw, "<i4", n, 28).astype(np.int64)
    if n and labels.max() >= classes:
        raise DataError(f"{path}: label {labels.max()} exceeds {classes - 1}")
    images = np.frombuffer(raw, "<f4", n * c * h * w, 28 + 4 * n).reshape(n, c, h, w)
    return Dataset(images.astype(np.float32), labels, split, classes)


def load_dataset(path, fmt, num_classes=10, split="train", labels_path=None, seed=0):
    if fmt == "cifar10-bin":
        return load_cifar10_bin(path, num_classes, split)
    if fmt == "idx":
        return load_idx(path, labels_path, num_classes, split)
    if fmt == "raw":
        return load_raw(path, split)
    if fmt == "desk":
        task, _, which = str(path).partition(":")
        return desk_dataset(task or "A", which or split, seed=seed)
    raise DataError(f"unknown dataset format {fmt!r}; expected one of {FORMATS}")


# ------------------------------------------------------- synthetic benchmark

DESK_SIZES = {"train": 2000, "test": 500}
_TASK_IDS = {"A": 11, "B": 23}


def _templates(task, num_classes, channels, size):
    """Smooth colour fields, one per class, built from a few low-frequency waves."""
    rng = np.random.default_rng(_TASK_IDS[task] * 1000 + 7)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.empty((num_classes, channels, size, size))
    for k in range(num_classes):
        for ch in range(channels):
            field = np.zeros((size, size))
            for _ in range(3):
                fy, fx = rng.integers(-2, 3, size=2)
                if fy == 0 and fx == 0:
                    fx = 1
                phase = rng.uniform(0, 2 * np.pi)
                field += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * (fy * yy + fx * xx) / size + phase)
            field = (field - field.min()) / (np.ptp(field) + 1e-12)
            out[k, ch] = 0.25 + 0.5 * field
    return out


def desk_dataset(task="A", split="train", size=None, seed=0, num_classes=10, image_size=32, channels=3):
    """Synthetic 10-class image benchmark.

    Each class is a smooth colour pattern; examples are randomly shifted,
    contrast/brightness jittered and overlaid with light pixel noise. Task
    ``"B"`` uses an unrelated set of patterns (a transfer task for ``"A"``).
    Splits draw from disjoint RNG streams, so ``train`` and ``test`` never
    share examples.
    """
    if task not in _TASK_IDS:
        raise DataError(f"desk task must be one of {sorted(_TASK_IDS)}, got {task!r}")
    size = DESK_SIZES.get(split, 500) if size is None else size
    templates = _templates(task, num_classes, channels, image_size)
    split_id = {"train": 0, "test": 1}.get(split, 2)
    rng = np.random.default_rng([seed, _TASK_IDS[task], split_id])
    labels = rng.integers(0, num_classes, size=size)
    shifts = rng.integers(-3, 4, size=(size, 2))
    contrast = rng.uniform(0.7, 1.0, size=size)
    brightness = rng.uniform(-0.1, 0.1, size=size)
    images = np.empty((size, channels, image_size, image_size), dtype=np.float32)
    for i in range(size):
        t = np.roll(templates[labels[i]], tuple(shifts[i]), axis=(1, 2))
        img = 0.5 + contrast[i] * (t - 0.5) + brightness[i]
        img += rng.normal(0.0, 0.05, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, split, num_classes)
