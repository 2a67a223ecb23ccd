"""Dataset ingestion, synthesis, and user-subset derivation.

Images live in memory as float32 tensors normalized to [0,1] by a plain
1/255 scale (no mean/std statistics, no augmentation).  Datasets are
immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, FormatError, UsageError
from .tensor import Tensor

CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)

_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labeled image collection: N examples of shape 3×H×W in [0,1].

    ``label_map`` is populated by :func:`personalize` when labels were
    re-indexed; it maps original class id to the dense id used here.
    """

    images: Tensor
    labels: np.ndarray
    class_names: tuple[str, ...] | None = None
    label_map: dict[int, int] | None = None

    def __post_init__(self):
        imgs = self.images
        if not isinstance(imgs, Tensor):
            imgs = Tensor(np.asarray(imgs, dtype=np.float32))
            object.__setattr__(self, "images", imgs)
        if imgs.values.ndim != 4 or imgs.shape[1] != 3:
            raise DataError(f"images must be N×3×H×W, got {imgs.shape}")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.shape[0] != imgs.shape[0]:
            raise DataError(
                f"{labels.shape} labels for {imgs.shape[0]} images"
            )
        if labels.size and labels.min() < 0:
            raise DataError("negative class label")
        if self.class_names is not None and labels.size:
            if labels.max() >= len(self.class_names):
                raise DataError("label outside class_names range")
        labels = labels.copy()
        labels.setflags(write=False)
        imgs.values.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def num_examples(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        if self.class_names is not None:
            return len(self.class_names)
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def take(self, indices: np.ndarray) -> "Dataset":
        """New dataset holding the given rows, metadata carried over."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            Tensor(self.images.values[idx]),
            self.labels[idx],
            self.class_names,
            self.label_map,
        )


@dataclass(frozen=True)
class PersonalizationSpec:
    """Which classes make up the user's data, and how much of each."""

    kept_classes: tuple[int, ...]
    per_class_cap: int | None = None
    seed: int = 0

    def __post_init__(self):
        if len(self.kept_classes) == 0:
            raise ConfigError("kept_classes must be nonempty")
        if self.per_class_cap is not None and self.per_class_cap < 1:
            raise ConfigError(f"per_class_cap must be >= 1, got {self.per_class_cap}")


def load_cifar10_bin(paths) -> Dataset:
    """Read one or more binary batch files of 3073-byte records.

    Each record is a label byte followed by 3072 channel-major pixel
    bytes (the R plane of a 32×32 image, then G, then B).
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    chunks = []
    for path in paths:
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) == 0 or len(blob) % _RECORD_BYTES != 0:
            raise FormatError(
                f"{path}: {len(blob)} bytes is not a whole number of "
                f"{_RECORD_BYTES}-byte records"
            )
        chunks.append(np.frombuffer(blob, dtype=np.uint8).reshape(-1, _RECORD_BYTES))
    records = np.concatenate(chunks, axis=0)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"label byte {labels.max()} exceeds 9")
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255)
    return Dataset(Tensor(pixels), labels, CIFAR10_CLASSES)


def save_cifar10_bin(dataset: Dataset, path) -> None:
    """Write a dataset back to the binary batch format, bit-exactly.

    Requires 32×32 images whose values are exact multiples of 1/255
    (anything loaded or synthesized here qualifies); reloading the file
    reproduces the dataset bit for bit.
    """
    vals = dataset.images.values
    if vals.shape[1:] != (3, 32, 32):
        raise DataError(f"binary format needs 3×32×32 images, got {vals.shape[1:]}")
    if dataset.labels.size and dataset.labels.max() > 9:
        raise DataError("binary format carries labels 0..9 only")
    scaled = vals.astype(np.float64) * 255.0
    bytes_f = np.rint(scaled)
    if bytes_f.min() < 0 or bytes_f.max() > 255:
        raise DataError("pixel values outside [0,1]")
    quantized = (bytes_f / 255.0).astype(np.float32)
    if not np.array_equal(quantized, vals):
        raise DataError("pixel values are not multiples of 1/255")
    records = np.empty((vals.shape[0], _RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = dataset.labels
    records[:, 1:] = bytes_f.reshape(vals.shape[0], -1)
    with open(path, "wb") as fh:
        fh.write(records.tobytes())


def synth_dataset(
    num_classes: int,
    per_class: int,
    image_size: int = 32,
    seed: int = 0,
    noise: float = 0.1,
) -> Dataset:
    """Deterministic class-conditional gratings for fast tests.

    Class c gets a sinusoidal pattern at orientation pi*c/num_classes
    and spatial frequency 2 + (c mod 3), phase-shifted per channel, plus
    seeded Gaussian noise.  Pixels are clipped and quantized to
    multiples of 1/255 so the binary round-trip is lossless.
    """
    if num_classes < 1 or per_class < 1:
        raise UsageError("num_classes and per_class must be >= 1")
    if noise < 0:
        raise ConfigError(f"noise amplitude must be >= 0, got {noise}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(
        np.arange(image_size, dtype=np.float64),
        np.arange(image_size, dtype=np.float64),
        indexing="ij",
    )
    blocks = []
    for c in range(num_classes):
        theta = math.pi * c / num_classes
        freq = 2.0 + (c % 3)
        proj = (xx * math.cos(theta) + yy * math.sin(theta)) / image_size
        base = np.stack(
            [
                0.5 + 0.5 * np.sin(2 * math.pi * freq * proj + ch * 2 * math.pi / 3)
                for ch in range(3)
            ]
        )
        block = base[None] + rng.normal(0.0, noise, size=(per_class, 3, image_size, image_size))
        blocks.append(block)
    pixels = np.clip(np.concatenate(blocks, axis=0), 0.0, 1.0)
    pixels = (np.rint(pixels * 255.0) / 255.0).astype(np.float32)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    names = tuple(f"synth{c}" for c in range(num_classes))
    return Dataset(Tensor(pixels), labels, names)


def personalize(dataset: Dataset, spec: PersonalizationSpec, reindex: bool = True) -> Dataset:
    """Derive the user dataset: kept classes only, optionally capped.

    With ``reindex`` (the default) labels are remapped densely onto
    0..k-1 in ascending original-id order and the mapping is recorded on
    the result; with ``reindex=False`` original ids are preserved so the
    subset stays aligned with a head trained on the full label space.
    The input dataset is untouched either way.
    """
    kept = sorted(set(spec.kept_classes))
    nc = dataset.num_classes
    bad = [c for c in kept if c < 0 or c >= nc]
    if bad:
        raise ConfigError(f"kept_classes {bad} outside 0..{nc - 1}")
    labels = dataset.labels
    rng = np.random.default_rng(spec.seed)
    picks = []
    for c in kept:
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            raise DataError(f"class {c} absent from dataset")
        if spec.per_class_cap is not None and idx.size > spec.per_class_cap:
            idx = rng.choice(idx, size=spec.per_class_cap, replace=False)
        picks.append(idx)
    sel = np.sort(np.concatenate(picks))
    sub_labels = labels[sel]
    names = dataset.class_names
    label_map = None
    if reindex:
        label_map = {c: i for i, c in enumerate(kept)}
        lut = np.full(nc, -1, dtype=np.int64)
        lut[kept] = np.arange(len(kept), dtype=np.int64)
        sub_labels = lut[sub_labels]
        if names is not None:
            names = tuple(names[c] for c in kept)
    return Dataset(Tensor(dataset.images.values[sel]), sub_labels, names, label_map)


def split(dataset: Dataset, fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then cut: first ``fraction`` of rows vs the rest."""
    if not 0.0 < fraction < 1.0:
        raise UsageError(f"fraction must lie strictly inside (0,1), got {fraction}")
    n = dataset.num_examples
    k = int(round(fraction * n))
    if k == 0 or k == n:
        raise DataError(f"fraction {fraction} leaves an empty side for N={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.take(perm[:k]), dataset.take(perm[k:])
