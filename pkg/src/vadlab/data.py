"""CIFAR binary ingestion, synthetic datasets, base augmentation and batching.

Images are ``float32`` arrays shaped ``(N, 3, H, W)`` with values in
``[0, 1]``; labels are ``int64``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError

CIFAR_PIXELS = 3 * 32 * 32
ENV_DATA_DIR = "VADLAB_DATA_DIR"


@dataclass(frozen=True)
class DatasetMeta:
    name: str
    num_classes: int
    input_dim: tuple[int, int, int]
    train_count: int
    test_count: int


CIFAR10 = DatasetMeta("cifar10", 10, (3, 32, 32), 50000, 10000)
CIFAR100 = DatasetMeta("cifar100", 100, (3, 32, 32), 50000, 10000)
KNOWN_DATASETS = {m.name: m for m in (CIFAR10, CIFAR100)}


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], self.num_classes, self.name)


@dataclass
class LabeledBatch:
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray
    view_labels: np.ndarray | None = field(default=None)


# ---------------------------------------------------------------- CIFAR binary format

def _read_records(data: bytes, label_bytes: int, num_classes: int, what: str
                  ) -> tuple[np.ndarray, np.ndarray]:
    record = label_bytes + CIFAR_PIXELS
    if len(data) % record:
        full = len(data) // record
        raise DataError(f"{what}: truncated record at byte offset {full * record} "
                        f"({len(data) - full * record} of {record} bytes present)")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, record)
    labels = raw[:, label_bytes - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        raise DataError(f"{what}: label {labels[i]} out of range [0, {num_classes}) "
                        f"in record {i} at byte offset {i * record + label_bytes - 1}")
    pixels = raw[:, label_bytes:].reshape(-1, 3, 32, 32)
    return labels, pixels


def read_cifar10_records(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised reader returning ``(labels, uint8 pixels N x 3 x 32 x 32)``."""
    return _read_records(data, 1, 10, "CIFAR-10")


def read_cifar100_records(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Fine labels only; the coarse label byte is discarded."""
    return _read_records(data, 2, 100, "CIFAR-100")


def _as_images(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255.0)


def parse_cifar10(data: bytes) -> list[tuple[int, np.ndarray]]:
    """Parse 3073-byte records into ``(label, 3x32x32 image)`` pairs."""
    labels, pixels = read_cifar10_records(data)
    return [(int(y), img) for y, img in zip(labels, _as_images(pixels))]


def parse_cifar100(data: bytes) -> list[tuple[int, np.ndarray]]:
    """Parse 3074-byte records (coarse, fine, pixels) into ``(fine_label, image)``."""
    labels, pixels = read_cifar100_records(data)
    return [(int(y), img) for y, img in zip(labels, _as_images(pixels))]


def to_pixel_bytes(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)


def serialize_cifar10(labels: Sequence[int], pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(-1, CIFAR_PIXELS)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    return np.concatenate([labels, pixels], axis=1).tobytes()


def serialize_cifar100(fine: Sequence[int], pixels: np.ndarray,
                       coarse: Sequence[int] | None = None) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(-1, CIFAR_PIXELS)
    fine = np.asarray(fine, dtype=np.uint8).reshape(-1, 1)
    coarse = np.zeros_like(fine) if coarse is None else np.asarray(coarse, dtype=np.uint8).reshape(-1, 1)
    return np.concatenate([coarse, fine, pixels], axis=1).tobytes()


# ---------------------------------------------------------------- on-disk archives

CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILES = ["test_batch.bin"]
CIFAR100_TRAIN_FILES = ["train.bin"]
CIFAR100_TEST_FILES = ["test.bin"]
_SUBDIRS = {"cifar10": "cifar-10-batches-bin", "cifar100": "cifar-100-binary"}


def resolve_data_dir(explicit: str | os.PathLike | None) -> Path:
    """Explicit path first, then ``$VADLAB_DATA_DIR``."""
    chosen = explicit or os.environ.get(ENV_DATA_DIR)
    if not chosen:
        raise DataError(f"no data directory given (pass --data-dir or set {ENV_DATA_DIR})")
    path = Path(chosen)
    if not path.is_dir():
        raise DataError(f"data directory {path} does not exist")
    return path


def _locate(root: Path, name: str, files: list[str]) -> list[Path]:
    for base in (root / _SUBDIRS[name], root):
        paths = [base / f for f in files]
        if all(p.is_file() for p in paths):
            return paths
    raise DataError(f"{name}: expected {', '.join(files)} under {root} or {root / _SUBDIRS[name]}")


def load_cifar(name: str, data_dir: str | os.PathLike | None
               ) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Read the train/test archives of ``cifar10`` or ``cifar100`` as raw bytes.

    Returns ``((train_labels, train_pixels), (test_labels, test_pixels))`` with
    uint8 pixels; conversion to float happens after subsetting.
    """
    root = resolve_data_dir(data_dir)
    if name == "cifar10":
        reader, train_files, test_files = read_cifar10_records, CIFAR10_TRAIN_FILES, CIFAR10_TEST_FILES
    elif name == "cifar100":
        reader, train_files, test_files = read_cifar100_records, CIFAR100_TRAIN_FILES, CIFAR100_TEST_FILES
    else:
        raise DataError(f"unknown dataset {name!r}")
    out = []
    for files in (train_files, test_files):
        parts = []
        for path in _locate(root, name, files):
            try:
                parts.append(reader(path.read_bytes()))
            except DataError as exc:
                raise DataError(f"{path}: {exc}") from None
        out.append((np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])))
    return out[0], out[1]


def write_cifar_archive(root: str | os.PathLike, name: str, train: Dataset, test: Dataset) -> Path:
    """Write datasets in the published binary layout (used for fixtures and stand-ins)."""
    base = Path(root) / _SUBDIRS[name]
    base.mkdir(parents=True, exist_ok=True)
    if name == "cifar10":
        chunks = np.array_split(np.arange(len(train)), 5)
        for fname, idx in zip(CIFAR10_TRAIN_FILES, chunks):
            (base / fname).write_bytes(serialize_cifar10(train.labels[idx], to_pixel_bytes(train.images[idx])))
        (base / "test_batch.bin").write_bytes(serialize_cifar10(test.labels, to_pixel_bytes(test.images)))
    elif name == "cifar100":
        (base / "train.bin").write_bytes(serialize_cifar100(train.labels, to_pixel_bytes(train.images)))
        (base / "test.bin").write_bytes(serialize_cifar100(test.labels, to_pixel_bytes(test.images)))
    else:
        raise ValueError(f"unknown dataset {name!r}")
    return base


# ---------------------------------------------------------------- synthetic data

def synthetic_templates(seed: int, num_classes: int, height: int, width: int) -> np.ndarray:
    """One clean prototype per class: a tinted background with an off-centre blob."""
    rng = np.random.default_rng([seed, 0])
    yy, xx = np.mgrid[0:height, 0:width]
    templates = np.empty((num_classes, 3, height, width), dtype=np.float64)
    for k in range(num_classes):
        bg = rng.uniform(0.15, 0.85, size=3)
        fg = rng.uniform(0.0, 1.0, size=3)
        cy = rng.uniform(0.15, 0.45) * height
        cx = rng.uniform(0.15, 0.85) * width
        radius = rng.uniform(0.15, 0.3) * min(height, width)
        blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2)))
        ramp = (yy / max(height - 1, 1))[None] * 0.2
        templates[k] = bg[:, None, None] * (1 - blob) + fg[:, None, None] * blob + ramp
    return np.clip(templates, 0.0, 1.0)


def generate_synthetic(seed: int, n: int, num_classes: int, height: int = 32, width: int = 32,
                       separability: float = 1.0, split: int = 0) -> Dataset:
    """Class-conditional blob images; deterministic per ``(seed, split)``.

    Higher ``separability`` pulls samples towards their class template and
    lowers the noise.  Different ``split`` values draw fresh samples from the
    same class templates (train/test).
    """
    if n < 0 or num_classes < 1:
        raise ValueError("n must be >= 0 and num_classes >= 1")
    if not 0.0 <= separability <= 1.0:
        raise ValueError(f"separability must lie in [0, 1], got {separability}")
    templates = synthetic_templates(seed, num_classes, height, width)
    rng = np.random.default_rng([seed, split + 1])
    labels = rng.permutation(np.arange(n) % num_classes)
    noise_sd = 0.05 + 0.25 * (1.0 - separability)
    mix = separability * templates[labels] + (1.0 - separability) * templates.mean(axis=0)
    images = mix + rng.normal(0.0, noise_sd, size=(n, 3, height, width))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels, num_classes, name="synthetic")


# ---------------------------------------------------------------- augmentation

def base_augment(img: np.ndarray, rng: np.random.Generator, enabled: bool = True,
                 pad: int = 4) -> np.ndarray:
    """Reflect-pad by ``pad``, take a random crop of the original size, flip
    horizontally with probability 0.5."""
    if not enabled:
        return img
    c, h, w = img.shape
    dy = int(rng.integers(0, 2 * pad + 1))
    dx = int(rng.integers(0, 2 * pad + 1))
    flip = bool(rng.random() < 0.5)
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    out = padded[:, dy:dy + h, dx:dx + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, rng: np.random.Generator, enabled: bool = True) -> np.ndarray:
    if not enabled:
        return images
    return np.stack([base_augment(img, rng) for img in images])


# ---------------------------------------------------------------- batching and subsets

def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch, 0]).permutation(n)


def make_batches(dataset: Dataset, batch_size: int, seed: int, epoch: int = 0,
                 shuffle: bool = True) -> Iterator[LabeledBatch]:
    """Yield batches covering every sample once; the last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_order(len(dataset), seed, epoch, shuffle)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield LabeledBatch(dataset.images[idx], dataset.labels[idx], idx)


def subset_indices(labels: np.ndarray, num_classes: int, per_class: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 2])
    chosen = []
    for k in range(num_classes):
        idx = np.flatnonzero(labels == k)
        if per_class < len(idx):
            idx = np.sort(rng.choice(idx, per_class, replace=False))
        chosen.append(idx)
    return np.sort(np.concatenate(chosen)) if chosen else np.array([], dtype=np.int64)


def subset(dataset: Dataset, per_class: int, seed: int) -> Dataset:
    """Class-balanced deterministic subsample keeping original file order."""
    if per_class < 0:
        raise ValueError("per_class must be >= 0")
    return dataset.take(subset_indices(dataset.labels, dataset.num_classes, per_class, seed))


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation of raw pixels."""
    flat = images.transpose(1, 0, 2, 3).reshape(images.shape[1], -1).astype(np.float64)
    return flat.mean(axis=1), flat.std(axis=1)
