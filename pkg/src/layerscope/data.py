"""Datasets: IDX (MNIST / Fashion-MNIST) and CIFAR-10 binary loaders, the
private/non-private split, and a synthetic generator for quick runs."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataError(ValueError):
    """Base class for malformed or inconsistent dataset files."""


class BadMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class RecordLengthError(DataError):
    pass


class LabelRangeError(DataError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (K, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (K,) int64
    name: str = "dataset"
    num_classes: int = 10

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelRangeError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, indices, name=None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], name or self.name, self.num_classes)


@dataclass
class PrivateSplit:
    S: Dataset
    T: Dataset
    seed: int
    s_indices: np.ndarray = field(repr=False)
    t_indices: np.ndarray = field(repr=False)

    @property
    def X(self) -> Dataset:
        """S followed by T, in index order of the split."""
        return Dataset(
            np.concatenate([self.S.images, self.T.images]),
            np.concatenate([self.S.labels, self.T.labels]),
            self.S.name.removesuffix("/S"),
            self.S.num_classes,
        )


def split_private(dataset: Dataset, seed: int) -> PrivateSplit:
    """Seeded uniform shuffle; the first floor(K/2) indices form the private set S."""
    k = len(dataset)
    if k < 2:
        raise ValueError("need at least two examples to split")
    perm = np.random.default_rng(seed).permutation(k)
    s_idx, t_idx = perm[: k // 2], perm[k // 2:]
    return PrivateSplit(
        dataset.subset(s_idx, f"{dataset.name}/S"),
        dataset.subset(t_idx, f"{dataset.name}/T"),
        seed, s_idx, t_idx,
    )


# ---------------------------------------------------------------------------
# IDX


def _read(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndims: int, path) -> np.ndarray:
    header = 4 + 4 * ndims
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: expected at least {header} header bytes, got {len(raw)}")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndims}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, name="idx", num_classes=10) -> Dataset:
    """Load an IDX image/label file pair (optionally gzipped)."""
    pixels = _parse_idx(_read(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if len(pixels) != len(labels):
        raise CountMismatchError(f"{images_path} holds {len(pixels)} images, {labels_path} holds {len(labels)} labels")
    return Dataset(pixels[:, None, :, :] / 255.0, labels.astype(np.int64), name, num_classes)


def to_bytes(images: np.ndarray) -> np.ndarray:
    """Inverse of the /255 scaling; exact for data produced by the loaders."""
    return np.rint(np.asarray(images) * 255.0).astype(np.uint8)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    if dataset.images.shape[1] != 1:
        raise ValueError("IDX export supports single-channel images only")
    k, _, h, w = dataset.images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, k, h, w) + to_bytes(dataset.images).tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, k) + dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# CIFAR-10


def load_cifar10(batch_paths, name="cifar10") -> Dataset:
    """Concatenate CIFAR-10 binary batches (label byte + R, G, B planes per record)."""
    if isinstance(batch_paths, (str, Path)):
        batch_paths = [batch_paths]
    images, labels = [], []
    for path in batch_paths:
        raw = _read(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise RecordLengthError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if rec[:, 0].max() >= 10:
            raise LabelRangeError(f"{path}: label {int(rec[:, 0].max())} outside [0, 10)")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    return Dataset(np.concatenate(images) / 255.0, np.concatenate(labels), name, 10)


def write_cifar10(dataset: Dataset, path) -> None:
    rec = np.concatenate([dataset.labels.astype(np.uint8)[:, None], to_bytes(dataset.images).reshape(len(dataset), -1)], axis=1)
    Path(path).write_bytes(rec.tobytes())


# ---------------------------------------------------------------------------
# synthetic data


def gen_synthetic(num_classes=4, per_class=250, image_shape=(1, 8, 8), margin=6.0, seed=0,
                  noise=1.0, name="synthetic") -> Dataset:
    """Class-conditional Gaussian blobs rendered as images.

    Each class owns a smooth bump pattern; class means are rescaled so every
    pair is at least ``margin`` apart (in units of the per-pixel noise std
    ``noise``), then samples add isotropic noise. Pixels are mapped to [0, 1]
    with one affine map shared by all images.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    c, h, w = image_shape
    if h * w * c < num_classes or h < 2 or w < 2:
        raise ValueError(f"image shape {image_shape} too small for {num_classes} distinct class means")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    means = np.zeros((num_classes, c, h, w))
    for k in range(num_classes):
        for ch in range(c):
            cy, cx = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
            width = max(h, w) / 4
            means[k, ch] = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
    flat = means.reshape(num_classes, -1)
    flat = flat - flat.mean(axis=0)
    d = np.linalg.norm(flat[:, None] - flat[None], axis=-1)
    closest = d[~np.eye(num_classes, dtype=bool)].min()
    if closest <= 0:
        raise ValueError("class means collapsed; try another seed or a larger image")
    flat *= margin * noise / closest
    labels = np.repeat(np.arange(num_classes), per_class)
    x = flat[labels] + noise * rng.standard_normal((len(labels), flat.shape[1]))
    perm = rng.permutation(len(labels))
    x, labels = x[perm], labels[perm]
    lo, hi = x.min(), x.max()
    images = ((x - lo) / (hi - lo)).reshape((len(labels),) + tuple(image_shape))
    return Dataset(images, labels, name, num_classes)


# ---------------------------------------------------------------------------
# descriptors


def load_descriptor(path_or_dict) -> Dataset:
    """Build a dataset from a JSON descriptor.

    ``{"name": ..., "format": "idx", "images": ..., "labels": ...}``,
    ``{"format": "cifar10", "paths": [...]}`` or
    ``{"format": "synthetic", "params": {...}}``; an optional ``"subsample": n``
    keeps the first n examples. Relative paths resolve against the file.
    """
    if isinstance(path_or_dict, dict):
        desc, base = path_or_dict, Path(".")
    else:
        desc, base = json.loads(Path(path_or_dict).read_text()), Path(path_or_dict).parent
    fmt = desc.get("format")
    name = desc.get("name", fmt)
    if fmt == "idx":
        ds = load_idx(base / desc["images"], base / desc["labels"], name, desc.get("num_classes", 10))
    elif fmt == "cifar10":
        ds = load_cifar10([base / p for p in desc["paths"]], name)
    elif fmt == "synthetic":
        params = dict(desc.get("params", {}))
        if "image_shape" in params:
            params["image_shape"] = tuple(params["image_shape"])
        ds = gen_synthetic(name=name, **params)
    else:
        raise DataError(f"unknown dataset format {fmt!r}")
    if desc.get("subsample"):
        ds = ds.subset(np.arange(min(int(desc["subsample"]), len(ds))))
    return ds
