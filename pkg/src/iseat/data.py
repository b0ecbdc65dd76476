"""Datasets: seeded synthetic generators, IDX ingestion, splitting, batching."""
from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn import datasets as skd

from .errors import IdxCountMismatchError, IdxMagicError, IdxTruncatedError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SYNTHETIC_KINDS = ("blobs", "moons", "circles")
BLOB_CENTERS = ((-1.0, -1.0), (1.0, 1.0))


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    name: str
    provenance: str

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValueError("dataset inputs must be a non-empty n x d matrix")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("one label per input required")
        if self.inputs.min() < 0 or self.inputs.max() > 1:
            raise ValueError("dataset inputs must lie in [0, 1]")
        if self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, index, name: str | None = None) -> "Dataset":
        return Dataset(self.inputs[index], self.labels[index], name or self.name, self.provenance)

    def select_classes(self, classes) -> "Dataset":
        """Keep only ``classes`` and relabel them 0..k-1 in the given order."""
        classes = list(classes)
        keep = np.isin(self.labels, classes)
        mapping = {c: k for k, c in enumerate(classes)}
        labels = np.array([mapping[int(c)] for c in self.labels[keep]], dtype=np.int64)
        return Dataset(self.inputs[keep], labels, self.name, f"{self.provenance};classes={classes}")


def gen_synthetic(kind: str, n: int, noise: float, seed: int) -> Dataset:
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    if n < 2:
        raise ValueError("need n >= 2")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    if kind == "blobs":
        X, y = skd.make_blobs(n_samples=n, centers=BLOB_CENTERS, cluster_std=noise, random_state=seed)
    elif kind == "moons":
        X, y = skd.make_moons(n_samples=n, noise=noise, random_state=seed)
    else:
        X, y = skd.make_circles(n_samples=n, noise=noise, factor=0.5, random_state=seed)
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    X = np.clip(0.05 + 0.9 * (X - lo) / span, 0.0, 1.0)
    return Dataset(X, y, kind, f"synthetic:{kind}:n={n}:noise={noise}:seed={seed}")


# -- IDX --------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _header(raw: bytes, magic: int, ndims: int, what: str) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(raw) < 4:
        raise IdxTruncatedError(f"{what} file too short for a magic number", len(raw))
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxMagicError(f"{what} file has magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    if len(raw) < need:
        raise IdxTruncatedError(f"{what} header truncated", len(raw))
    return struct.unpack(">" + "I" * ndims, raw[4:need])


def parse_idx_images(raw: bytes) -> np.ndarray:
    count, rows, cols = _header(raw, IDX_IMAGES_MAGIC, 3, "image")
    size = count * rows * cols
    if len(raw) < 16 + size:
        raise IdxTruncatedError(f"image data truncated: need {16 + size} bytes, have {len(raw)}", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=16).reshape(count, rows * cols)


def parse_idx_labels(raw: bytes) -> np.ndarray:
    (count,) = _header(raw, IDX_LABELS_MAGIC, 1, "label")
    if len(raw) < 8 + count:
        raise IdxTruncatedError(f"label data truncated: need {8 + count} bytes, have {len(raw)}", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8)


def load_idx(images_path, labels_path) -> Dataset:
    """Images scaled by 1/255 and flattened row-major; gzip files are accepted."""
    raw_i, raw_l = _read_bytes(images_path), _read_bytes(labels_path)
    images = parse_idx_images(raw_i)
    labels = parse_idx_labels(raw_l)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(images.shape[0], labels.shape[0])
    if images.shape[0] == 0:
        raise IdxTruncatedError("IDX files contain no items", 4)
    digest = hashlib.sha256(raw_i + raw_l).hexdigest()[:16]
    return Dataset(images.astype(np.float64) / 255.0, labels, Path(images_path).name, f"idx:sha256={digest}")


def idx_images_bytes(images: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes()


def idx_labels_bytes(labels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes()


# -- splitting and batching ---------------------------------------------------

def split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise ValueError(f"test fraction must lie in (0, 1), got {test_fraction}")
    n = len(dataset)
    if n < 2:
        raise ValueError("need at least two samples to split")
    n_test = min(n - 1, max(1, int(round(n * test_fraction))))
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(perm[n_test:]), f"{dataset.name}/train"), dataset.subset(np.sort(perm[:n_test]), f"{dataset.name}/test")


def batch_indices(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches; the permutation depends on (seed, epoch) only."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[s:s + batch_size] for s in range(0, n, batch_size)]


def batches(dataset: Dataset, batch_size: int, seed: int, epoch: int) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(dataset.inputs[i], dataset.labels[i]) for i in batch_indices(len(dataset), batch_size, seed, epoch)]
