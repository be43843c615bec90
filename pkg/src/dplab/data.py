"""Datasets: the signal/noise regression task, toy blobs, and IDX files.

Gaussian draws use numpy's ``Generator`` (PCG64 bit generator, ziggurat
normals) seeded with the spec's integer seed, so every dataset is
reproducible bit-for-bit for a given numpy version.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class SyntheticSpec:
    """Inputs ``x = (x_s, x_n)`` with ``x_s ~ N(y v, sigma^2 I)``, ``x_n ~ N(0, sigma^2 I)``."""

    v: tuple[float, ...]
    sigma: float
    d_n: int
    n: int = 4096
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "v", tuple(float(a) for a in np.atleast_1d(self.v)))
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.d_n < 0 or self.d_s + self.d_n < 1:
            raise ValueError("need d_n >= 0 and d_s + d_n >= 1")
        if self.n < 1:
            raise ValueError("n must be positive")

    @property
    def d_s(self) -> int:
        return len(self.v)

    @property
    def d(self) -> int:
        return self.d_s + self.d_n

    @property
    def v_array(self) -> np.ndarray:
        return np.array(self.v, dtype=np.float64)


def default_synthetic_spec(d_s=10, d_n=90, sigma=0.5, v_norm=1.0, n=4096, seed=0) -> SyntheticSpec:
    """Signal vector along the all-ones direction of the signal block, scaled to ``v_norm``."""
    v = np.full(d_s, v_norm / math.sqrt(d_s)) if d_s else np.zeros(0)
    return SyntheticSpec(tuple(v), sigma, d_n, n, seed)


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    task: str = "classification"  # or "regression"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if self.task == "classification":
            self.labels = np.asarray(self.labels, dtype=np.int64)
        elif self.task == "regression":
            self.labels = np.asarray(self.labels, dtype=np.float64)
        else:
            raise ValueError(f"unknown task {self.task!r}")
        if len(self.labels) != len(self.inputs):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")

    def __len__(self):
        return len(self.inputs)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def loss(self) -> str:
        return "mse" if self.task == "regression" else "xent"

    def take(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.task)


def sample_synthetic(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    y = rng.choice(np.array([-1.0, 1.0]), size=spec.n)
    z = rng.standard_normal((spec.n, spec.d))
    x = spec.sigma * z
    x[:, :spec.d_s] += y[:, None] * spec.v_array[None, :]
    return Dataset(x, y, "regression")


def population_second_moments(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """``(E[x x^T], E[y x])`` for the signal/noise task (labels are +-1, so E[y^2] = 1)."""
    v = spec.v_array
    Sigma = spec.sigma ** 2 * np.eye(spec.d)
    Sigma[:spec.d_s, :spec.d_s] += np.outer(v, v)
    c = np.concatenate([v, np.zeros(spec.d_n)])
    return Sigma, c


def make_blobs(n: int, n_classes: int = 3, dim: int = 2, spread: float = 1.0,
               separation: float = 3.0, seed: int = 0) -> Dataset:
    """Isotropic Gaussian clusters with centres drawn on a sphere of radius ``separation``."""
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((n_classes, dim))
    centres *= separation / np.linalg.norm(centres, axis=1, keepdims=True)
    labels = rng.integers(0, n_classes, size=n)
    x = centres[labels] + spread * rng.standard_normal((n, dim))
    return Dataset(x, labels, "classification")


def _exact_fraction(fraction: float) -> Fraction:
    # decimal reading of the float, so 0.07 * 100 is exactly 7
    return Fraction(repr(float(fraction)))


def subsample(dataset: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """``floor(fraction * n)`` examples without replacement, kept in original order."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    k = math.floor(_exact_fraction(fraction) * len(dataset))
    if k == 0:
        raise ValueError(f"fraction {fraction} of {len(dataset)} examples leaves nothing")
    idx = np.sort(np.random.default_rng(seed).choice(len(dataset), size=k, replace=False))
    return dataset.take(idx)


def split(dataset: Dataset, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    n_test = math.floor(_exact_fraction(test_fraction) * len(dataset))
    perm = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.take(np.sort(perm[n_test:])), dataset.take(np.sort(perm[:n_test]))


def export_csv(dataset: Dataset, path) -> None:
    """Header ``y,x_0,...,x_{d-1}``; floats written with ``repr`` so they round-trip."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y"] + [f"x_{j}" for j in range(dataset.dim)])
        for yi, xi in zip(dataset.labels, dataset.inputs):
            w.writerow([repr(yi.item())] + [repr(float(a)) for a in xi])


# IDX ----------------------------------------------------------------------

class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxDimensionError(IdxFormatError):
    pass


IDX_TYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in IDX_TYPES.items()}
MAX_IDX_ELEMENTS = 2 ** 31


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (big-endian magic ``00 00 type ndim``, big-endian dims, raw data)."""
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise IdxTruncatedError(f"{path}: {len(buf)} bytes, too short for an IDX magic number")
    zero, code, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0 or code not in IDX_TYPES or ndim == 0:
        raise IdxMagicError(f"{path}: bad IDX magic 0x{buf[:4].hex()}")
    if len(buf) < 4 + 4 * ndim:
        raise IdxTruncatedError(f"{path}: header declares {ndim} dimensions but file ends early")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    count = 1
    for extent in dims:
        count *= extent
        if count > MAX_IDX_ELEMENTS:
            raise IdxDimensionError(f"{path}: dimensions {dims} overflow the {MAX_IDX_ELEMENTS}-element limit")
    dtype = IDX_TYPES[code]
    start = 4 + 4 * ndim
    need = start + count * dtype.itemsize
    if len(buf) < need:
        raise IdxTruncatedError(f"{path}: expected {need} bytes for dims {dims}, found {len(buf)}")
    if len(buf) > need:
        raise IdxFormatError(f"{path}: {len(buf) - need} trailing bytes after IDX data")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=start).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = _IDX_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise IdxFormatError(f"dtype {array.dtype} has no IDX type code")
    if array.ndim == 0 or array.ndim > 255:
        raise IdxDimensionError(f"cannot store {array.ndim}-d array as IDX")
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(array, dtype=IDX_TYPES[code]).tobytes())


def load_idx(images_path, labels_path) -> Dataset:
    """MNIST-style pair: ubyte images (magic 0x803) scaled to [0, 1] and flattened, ubyte labels (0x801)."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: label file must be 1-D, got {labels.ndim}-D")
    if images.ndim < 2:
        raise IdxFormatError(f"{images_path}: image file must have at least 2 dimensions")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64)
    if images.dtype == np.uint8:
        x /= 255.0
    return Dataset(x, labels.astype(np.int64), "classification")
