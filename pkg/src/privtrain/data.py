"""Datasets: IDX files (the MNIST container format) and seeded Gaussian blobs."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# IDX type code -> big-endian numpy dtype
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.newbyteorder("="): k for k, v in _IDX_TYPES.items()}


class IDXFormatError(ValueError):
    pass


def _open(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzipped) into a native-endian array."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IDXFormatError(f"{path}: too short for an IDX header")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_TYPES:
        raise IDXFormatError(f"{path}: bad magic {raw[:4].hex()}")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    dt = _IDX_TYPES[code]
    count = int(np.prod(dims)) if dims else 1
    start = 4 + 4 * ndim
    if len(raw) - start != count * dt.itemsize:
        raise IDXFormatError(f"{path}: expected {count} items of {dt.itemsize} bytes after header")
    data = np.frombuffer(raw, dtype=dt, count=count, offset=start)
    return data.reshape(dims).astype(dt.newbyteorder("="))


def write_idx(path, array) -> None:
    a = np.asarray(array)
    dt = a.dtype.newbyteorder("=")
    if dt not in _IDX_CODES:
        raise IDXFormatError(f"dtype {a.dtype} has no IDX type code")
    code = _IDX_CODES[dt]
    header = struct.pack(">HBB", 0, code, a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(a.astype(_IDX_TYPES[code]).tobytes())


@dataclass
class Dataset:
    features: np.ndarray  # (n, ...) float32
    labels: np.ndarray  # (n,) uint32

    def __len__(self):
        return len(self.labels)

    @property
    def feature_shape(self) -> tuple:
        return tuple(self.features.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx])


def load_idx_dataset(images_path, labels_path, scale: float | None = None) -> Dataset:
    """Images become float32 (uint8 images are divided by 255 unless ``scale`` is given)."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IDXFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if scale is None:
        scale = 255.0 if images.dtype == np.uint8 else 1.0
    return Dataset((images.astype(np.float32) / np.float32(scale)), labels.astype(np.uint32))


def gaussian_blobs(n: int, dim: int, classes: int = 2, separation: float = 2.5, seed: int = 0) -> Dataset:
    """Isotropic unit-variance Gaussian clusters, balanced across classes.

    Class centres sit on orthogonal axes scaled so any two are ``separation``
    apart; for two classes the Bayes accuracy is ``Phi(separation / 2)``.
    """
    if classes < 2 or classes > dim:
        raise ValueError("need 2 <= classes <= dim")
    rng = np.random.Generator(np.random.Philox(seed))
    centres = np.zeros((classes, dim))
    centres[np.arange(classes), np.arange(classes)] = separation / np.sqrt(2.0)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    x = rng.standard_normal((n, dim)) + centres[labels]
    return Dataset(x.astype(np.float32), labels.astype(np.uint32))


def split_shards(ds: Dataset, n_shards: int) -> list[Dataset]:
    """Contiguous partition into shards whose sizes differ by at most one."""
    if len(ds) < n_shards:
        raise ValueError("fewer examples than shards")
    return [ds.subset(idx) for idx in np.array_split(np.arange(len(ds)), n_shards)]
