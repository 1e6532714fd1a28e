"""IDX ingestion, Gaussian-noise corruption and synthetic blob data."""
from __future__ import annotations

import gzip
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np
from scipy import stats

from config import settings
from engine import RngStream
from exceptions import DataError
from models.run_models import SyntheticSpec

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
MNIST_CLASSES = 10

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    images: np.ndarray  # (N, D) float64
    labels: np.ndarray  # (N,) int64
    name: str = "dataset"
    num_classes: int = MNIST_CLASSES
    bayes_accuracy: Optional[float] = None
    _fingerprint: Optional[str] = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dimension(self) -> int:
        return self.images.shape[1]

    @property
    def fingerprint(self) -> str:
        if self._fingerprint is None:
            digest = hashlib.sha256()
            digest.update(np.ascontiguousarray(self.images).tobytes())
            digest.update(np.ascontiguousarray(self.labels).tobytes())
            self._fingerprint = digest.hexdigest()[:16]
        return self._fingerprint

    def subset(self, count: Optional[int]) -> "Dataset":
        if count is None or count >= len(self):
            return self
        return Dataset(self.images[:count], self.labels[:count], self.name, self.num_classes, self.bayes_accuracy)


def _read_bytes(path: Path) -> bytes:
    path = Path(path)
    if not path.exists():
        gz = path.with_name(path.name + ".gz")
        if not gz.exists():
            raise DataError(f"{path}: file not found")
        path = gz
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except OSError as exc:
            raise DataError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def _header(raw: bytes, path: Path, magic: int, dims: int) -> Tuple[int, ...]:
    size = 4 * (1 + dims)
    if len(raw) < size:
        raise DataError(f"{path}: header truncated at offset {len(raw)}, expected {size} bytes")
    values = struct.unpack(">" + "I" * (1 + dims), raw[:size])
    if values[0] != magic:
        raise DataError(f"{path}: bad magic {values[0]} at offset 0, expected {magic}")
    return values[1:]


def load_idx_dataset(image_path: Path, label_path: Path, name: str = "mnist") -> Dataset:
    """Images scaled to [0, 1] as flat vectors; plain or gzip-compressed IDX files."""
    image_path, label_path = Path(image_path), Path(label_path)
    images_raw = _read_bytes(image_path)
    labels_raw = _read_bytes(label_path)
    count, rows, cols = _header(images_raw, image_path, IMAGE_MAGIC, 3)
    (label_count,) = _header(labels_raw, label_path, LABEL_MAGIC, 1)
    if count != label_count:
        raise DataError(f"{image_path} holds {count} images but {label_path} holds {label_count} labels")

    pixels = count * rows * cols
    if len(images_raw) - 16 < pixels:
        raise DataError(f"{image_path}: payload truncated at offset {len(images_raw)}, expected {16 + pixels}")
    if len(labels_raw) - 8 < count:
        raise DataError(f"{label_path}: payload truncated at offset {len(labels_raw)}, expected {8 + count}")

    images = np.frombuffer(images_raw, dtype=np.uint8, count=pixels, offset=16)
    labels = np.frombuffer(labels_raw, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    bad = np.flatnonzero(labels >= MNIST_CLASSES)
    if bad.size:
        raise DataError(f"{label_path}: label {labels[bad[0]]} at offset {8 + bad[0]} outside 0..9")
    logger.info("loaded %d records from %s", count, image_path.name)
    return Dataset(
        images=images.reshape(count, rows * cols).astype(np.float64) / 255.0,
        labels=labels,
        name=name,
    )


def load_mnist(data_dir: Optional[str] = None, split: str = "train") -> Dataset:
    directory = Path(data_dir or settings.DATA_DIR)
    image_name, label_name = MNIST_FILES[split]
    return load_idx_dataset(directory / image_name, directory / label_name, name=f"mnist-{split}")


_noise_cache: dict[tuple[str, float, int], np.ndarray] = {}


def add_gaussian_noise(dataset: Dataset, variance: float, seed: int, cache_dir: Optional[str] = None) -> Dataset:
    """Pixels + N(0, variance), unclipped; identical noise for identical (data, variance, seed)."""
    if variance < 0:
        raise DataError("noise variance must be non-negative")
    if variance == 0:
        return dataset
    key = (dataset.fingerprint, float(variance), int(seed))
    noisy = _noise_cache.get(key)
    cache_dir = settings.CACHE_DIR if cache_dir is None else cache_dir
    cache_file = Path(cache_dir) / f"noise-{key[0]}-{variance:g}-{seed}.npy" if cache_dir else None
    if noisy is None and cache_file is not None and cache_file.exists():
        noisy = np.load(cache_file)
    if noisy is None:
        noise = RngStream(seed, (7,)).normal(dataset.images.shape) * np.sqrt(variance)
        noisy = dataset.images + noise
        if cache_file is not None:
            cache_file.parent.mkdir(parents=True, exist_ok=True)
            np.save(cache_file, noisy)
    _noise_cache[key] = noisy
    return Dataset(
        images=noisy,
        labels=dataset.labels,
        name=f"{dataset.name}+noise{variance:g}",
        num_classes=dataset.num_classes,
        bayes_accuracy=dataset.bayes_accuracy,
    )


def synthetic_bayes_accuracy(spec: SyntheticSpec) -> float:
    """Class means on a line ``separation`` apart, unit variance, equal priors."""
    miss = stats.norm.sf(spec.separation / 2.0)
    k = spec.num_classes
    return float(1.0 - 2.0 * (k - 1) / k * miss)


def synthetic_means(spec: SyntheticSpec) -> np.ndarray:
    means = np.zeros((spec.num_classes, spec.dimension))
    means[:, 0] = spec.separation * (np.arange(spec.num_classes) - (spec.num_classes - 1) / 2.0)
    return means


def bayes_rule(spec: SyntheticSpec, images: np.ndarray) -> np.ndarray:
    """Nearest class mean along the first axis."""
    centers = synthetic_means(spec)[:, 0]
    return np.argmin(np.abs(images[:, :1] - centers[None, :]), axis=1)


def synthetic_dataset(spec: SyntheticSpec, rng: RngStream, count: Optional[int] = None, name: str = "synthetic") -> Dataset:
    count = spec.n_train if count is None else count
    labels = np.minimum((rng.uniform(count) * spec.num_classes).astype(np.int64), spec.num_classes - 1)
    images = synthetic_means(spec)[labels] + rng.normal((count, spec.dimension))
    return Dataset(
        images=images,
        labels=labels,
        name=name,
        num_classes=spec.num_classes,
        bayes_accuracy=synthetic_bayes_accuracy(spec),
    )


def minibatches(dataset: Dataset, batch_size: int, rng: RngStream) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    order = rng.permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        index = order[start:start + batch_size]
        yield dataset.images[index], dataset.labels[index]
