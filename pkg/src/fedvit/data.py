"""Datasets: synthetic image generation, label-skew partitioning, splits, IDX files.

The synthetic generator emits one sinusoidal grating per class (distinct
orientation and spatial frequency) plus Gaussian pixel noise, clamped to
[0, 1]. The partitioner draws, per class, client proportions from a
symmetric Dirichlet and apportions that class's samples with the
largest-remainder rule, so the split is exactly conservative and a pure
function of its inputs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor

__all__ = [
    "Dataset",
    "SyntheticSpec",
    "PartitionSpec",
    "HeterogeneityStats",
    "PartitionError",
    "SplitError",
    "IdxFormatError",
    "IdxMagicError",
    "IdxTruncatedError",
    "IdxCountMismatchError",
    "generate_synthetic",
    "dirichlet_partition",
    "heterogeneity_stats",
    "train_test_split",
    "load_idx",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class PartitionError(Exception):
    """Partitioning could not satisfy the per-client minimum within budget."""


class SplitError(Exception):
    """A stratified split is impossible for the given data."""


class IdxFormatError(Exception):
    """Base class for malformed IDX files."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass
class Dataset:
    """Labelled image collection; images are ``[H, W, channels]`` tensors."""

    images: list[Tensor]
    labels: list[int]
    classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        for y in self.labels:
            if not 0 <= y < self.classes:
                raise ValueError(f"label {y} out of range [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices) -> "Dataset":
        return Dataset(
            [self.images[i] for i in indices],
            [self.labels[i] for i in indices],
            self.classes,
        )

    def class_counts(self) -> np.ndarray:
        counts = np.zeros(self.classes, dtype=np.int64)
        for y in self.labels:
            counts[y] += 1
        return counts


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int
    samples_per_class: int
    image_h: int
    image_w: int
    noise_sigma: float
    seed: int

    def __post_init__(self):
        if self.classes < 1 or self.samples_per_class < 1:
            raise ValueError("classes and samples_per_class must be positive")
        if self.image_h < 1 or self.image_w < 1:
            raise ValueError("image dimensions must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    alpha: float
    seed: int
    min_per_client: int = 1

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be at least 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.min_per_client < 0:
            raise ValueError("min_per_client must be non-negative")


@dataclass(frozen=True)
class HeterogeneityStats:
    """Per-client class histograms plus a single spread number.

    ``dispersion`` is the mean, over classes, of the across-client variance
    of the class frequency: 0 when every client sees the same label mix,
    larger the more the mixes diverge.
    """

    counts: np.ndarray       # [clients, classes] integer counts
    frequencies: np.ndarray  # [clients, classes] rows summing to 1
    dispersion: float


def _class_template(label: int, classes: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    theta = math.pi * label / classes
    freq = 2.0 + (label % 4)
    phase = 2.0 * math.pi * freq * (math.cos(theta) * xx + math.sin(theta) * yy) / max(h, w)
    return 0.5 + 0.25 * np.sin(phase)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Per-class grating templates plus i.i.d. Gaussian noise, clamped to [0, 1]."""
    rng = np.random.default_rng(spec.seed)
    images: list[Tensor] = []
    labels: list[int] = []
    for label in range(spec.classes):
        template = _class_template(label, spec.classes, spec.image_h, spec.image_w)
        for _ in range(spec.samples_per_class):
            pixels = template
            if spec.noise_sigma > 0:
                pixels = template + rng.normal(0.0, spec.noise_sigma, template.shape)
            pixels = np.clip(pixels, 0.0, 1.0)
            images.append(Tensor(pixels[:, :, None]))
            labels.append(label)
    return Dataset(images, labels, spec.classes)


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer apportionment of ``total`` matching ``proportions`` within 1."""
    quotas = proportions * total
    counts = np.floor(quotas).astype(np.int64)
    leftover = total - int(counts.sum())
    if leftover > 0:
        # Stable sort on descending fractional part; ties go to lower index.
        order = np.argsort(-(quotas - counts), kind="stable")
        counts[order[:leftover]] += 1
    return counts


def dirichlet_partition(data: Dataset, spec: PartitionSpec) -> list[Dataset]:
    """Split a dataset across clients with per-class Dirichlet label skew.

    For each class, client proportions are drawn from Dirichlet(alpha * 1)
    and the class's samples are apportioned by largest remainder, so client
    shards are disjoint and their union is exactly the input. Draws leaving
    any client under ``min_per_client`` samples are retried (new sub-seed)
    up to 100 times.
    """
    if len(data) == 0:
        raise ValueError("cannot partition an empty dataset")
    m = spec.num_clients
    by_class = [
        [i for i, y in enumerate(data.labels) if y == c] for c in range(data.classes)
    ]
    for attempt in range(100):
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, attempt)))
        assigned: list[list[int]] = [[] for _ in range(m)]
        for indices in by_class:
            if not indices:
                continue
            shuffled = [indices[j] for j in rng.permutation(len(indices))]
            proportions = rng.dirichlet(np.full(m, spec.alpha))
            counts = _largest_remainder(proportions, len(shuffled))
            offset = 0
            for client, count in enumerate(counts):
                assigned[client].extend(shuffled[offset:offset + count])
                offset += count
        if all(len(ids) >= spec.min_per_client for ids in assigned):
            return [data.subset(ids) for ids in assigned]
    raise PartitionError(
        f"no draw gave every client >= {spec.min_per_client} samples in 100 attempts"
    )


def heterogeneity_stats(parts: list[Dataset]) -> HeterogeneityStats:
    """Class histograms per client and the across-client frequency dispersion."""
    if not parts:
        raise ValueError("heterogeneity_stats needs at least one shard")
    classes = parts[0].classes
    counts = np.stack([p.class_counts() for p in parts])
    totals = counts.sum(axis=1, keepdims=True)
    frequencies = np.divide(
        counts, totals, out=np.zeros_like(counts, dtype=np.float64), where=totals > 0
    )
    dispersion = float(frequencies.var(axis=0).mean())
    return HeterogeneityStats(counts, frequencies, dispersion)


def train_test_split(
    data: Dataset, test_fraction: float, seed: int, strict: bool = True
) -> tuple[Dataset, Dataset]:
    """Deterministic stratified split into (train, test) shards.

    Each class is shuffled and cut so the test side holds roughly
    ``test_fraction`` of it, never emptying either side of a class. With
    ``strict`` (the default) a class with fewer than two samples is an
    error; otherwise its lone sample goes to the train side.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    train_ids: list[int] = []
    test_ids: list[int] = []
    for c in range(data.classes):
        members = [i for i, y in enumerate(data.labels) if y == c]
        if not members:
            continue
        if len(members) < 2:
            if strict:
                raise SplitError(f"class {c} has fewer than 2 samples")
            train_ids.extend(members)
            continue
        shuffled = [members[j] for j in rng.permutation(len(members))]
        n_test = int(len(members) * test_fraction + 0.5)
        n_test = min(max(n_test, 1), len(members) - 1)
        test_ids.extend(shuffled[:n_test])
        train_ids.extend(shuffled[n_test:])
    return data.subset(train_ids), data.subset(test_ids)


def _read_header(raw: bytes, path: str, magic: int, dims: int) -> tuple[int, ...]:
    header_len = 4 * (1 + dims)
    if len(raw) < header_len:
        raise IdxTruncatedError(f"{path}: file shorter than its {header_len}-byte header")
    fields = struct.unpack(f">{1 + dims}I", raw[:header_len])
    if fields[0] != magic:
        raise IdxMagicError(
            f"{path}: bad magic 0x{fields[0]:08x}, expected 0x{magic:08x}"
        )
    return fields[1:]


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Read a big-endian IDX image/label file pair into a dataset.

    Pixels are scaled from bytes to [0, 1] and shaped ``[H, W, 1]``. The
    three malformed-file conditions (wrong magic, truncation, image/label
    count mismatch) raise distinct exception types.
    """
    images_path, labels_path = str(images_path), str(labels_path)
    img_raw = Path(images_path).read_bytes()
    n_images, rows, cols = _read_header(img_raw, images_path, IDX_IMAGES_MAGIC, 3)
    expected = 16 + n_images * rows * cols
    if len(img_raw) != expected:
        raise IdxTruncatedError(
            f"{images_path}: expected {expected} bytes for {n_images} images, found {len(img_raw)}"
        )

    lbl_raw = Path(labels_path).read_bytes()
    (n_labels,) = _read_header(lbl_raw, labels_path, IDX_LABELS_MAGIC, 1)
    if n_labels != n_images:
        raise IdxCountMismatchError(
            f"{labels_path} holds {n_labels} labels for {n_images} images"
        )
    if len(lbl_raw) != 8 + n_labels:
        raise IdxTruncatedError(
            f"{labels_path}: expected {8 + n_labels} bytes, found {len(lbl_raw)}"
        )

    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=16).reshape(n_images, rows, cols)
    labels = [int(v) for v in np.frombuffer(lbl_raw, dtype=np.uint8, offset=8)]
    images = [Tensor(img[:, :, None] / 255.0) for img in pixels]
    classes = max(labels) + 1 if labels else 1
    return Dataset(images, labels, classes)
