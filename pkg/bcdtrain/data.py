"""
data.py — MNIST IDX files, synthetic blobs and the trace CSV.

IDX layout (big-endian):
    u32  magic     0x00000803 images / 0x00000801 labels (0x08 = unsigned byte)
    u32  dims[k]   one per dimension, k = magic & 0xff
    u8[] payload   row-major
"""
from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from bcdtrain.diagnostics import TraceRecord
from bcdtrain.errors import (
    IdxCountMismatchError,
    IdxFormatError,
    IdxMagicError,
    IdxTruncatedError,
    ShapeError,
)
from bcdtrain.linalg import Matrix
from bcdtrain.state import ObjectiveBreakdown

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
UBYTE_TYPE  = 0x08

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images":  "t10k-images-idx3-ubyte",
    "test_labels":  "t10k-labels-idx1-ubyte",
}

CSV_HEADER = [
    "epoch", "total", "risk", "penalty", "w_reg", "v_reg", "delta_sq",
    "residual", "bbar_bound", "train_acc", "test_acc", "seconds",
]


# ── Dataset ────────────────────────────────────────────────────────────────

def one_hot(labels, classes: int) -> Matrix:
    labels = np.asarray(labels, dtype=np.int64)
    Y = np.zeros((classes, labels.size))
    Y[labels, np.arange(labels.size)] = 1.0
    return Y


@dataclass(frozen=True)
class Dataset:
    X:      Matrix
    Y:      Matrix
    labels: np.ndarray

    def __post_init__(self):
        if self.X.ndim != 2 or self.Y.ndim != 2 or self.X.shape[1] != self.Y.shape[1]:
            raise ShapeError(f"X {self.X.shape} and Y {self.Y.shape} must share the column count")
        if self.labels.shape != (self.X.shape[1],):
            raise ShapeError(f"labels {self.labels.shape} do not match {self.X.shape[1]} samples")
        if self.n and not (np.all((self.Y == 0.0) | (self.Y == 1.0))
                           and np.all(self.Y.sum(axis=0) == 1.0)
                           and np.array_equal(np.argmax(self.Y, axis=0), self.labels)):
            raise ShapeError("Y must be one-hot with argmax equal to labels")

    @classmethod
    def from_labels(cls, X: Matrix, labels, classes: int) -> "Dataset":
        labels = np.asarray(labels, dtype=np.int64)
        return cls(np.asarray(X, dtype=np.float64), one_hot(labels, classes), labels)

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def d0(self) -> int:
        return self.X.shape[0]

    @property
    def classes(self) -> int:
        return self.Y.shape[0]

    def take(self, cols) -> "Dataset":
        cols = np.asarray(cols)
        return Dataset(self.X[:, cols], self.Y[:, cols], self.labels[cols])

    def head(self, n: int) -> "Dataset":
        return self.take(np.arange(min(n, self.n)))

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        idx = np.arange(self.n)
        return self.take(idx[:n_first]), self.take(idx[n_first:])


# ── IDX ────────────────────────────────────────────────────────────────────

def _u32(raw: bytes, offset: int, path: str) -> int:
    if len(raw) < offset + 4:
        raise IdxTruncatedError(path, offset, f"header ends after {len(raw)} bytes")
    return struct.unpack_from(">I", raw, offset)[0]


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse one ubyte IDX file into an array shaped by its dimension header."""
    path = str(path)
    raw = Path(path).read_bytes()
    magic = _u32(raw, 0, path)
    if magic != expected_magic:
        raise IdxMagicError(path, 0, f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    dims = tuple(_u32(raw, 4 + 4 * k, path) for k in range(ndim))
    start = 4 + 4 * ndim
    size = math.prod(dims)
    if len(raw) < start + size:
        raise IdxTruncatedError(path, len(raw), f"payload needs {size} bytes after offset {start}, "
                                                f"file has {len(raw) - start}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=start).reshape(dims)


def read_idx_header(path) -> tuple[int, tuple[int, ...]]:
    path = str(path)
    with open(path, "rb") as f:
        head = f.read(4)
        magic = _u32(head, 0, path)
        ndim = magic & 0xFF
        rest = f.read(4 * ndim)
    return magic, tuple(_u32(head + rest, 4 + 4 * k, path) for k in range(ndim))


def load_mnist_idx(images_path, labels_path, classes: int = 10) -> Dataset:
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(str(labels_path), 4,
                                    f"{labels.shape[0]} labels for {images.shape[0]} images in {images_path}")
    bad = np.flatnonzero(labels >= classes)
    if bad.size:
        raise IdxFormatError(str(labels_path), 8 + int(bad[0]),
                             f"label {labels[bad[0]]} outside 0..{classes - 1}")
    X = images.reshape(images.shape[0], -1).T.astype(np.float64) / 255.0
    logger.info(f"[data] loaded {labels.size} images of {X.shape[0]} pixels from {Path(images_path).name}")
    return Dataset.from_labels(X, labels, classes)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = (UBYTE_TYPE << 8) | array.ndim
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    Path(path).write_bytes(header + array.tobytes())


def write_mnist_idx(data: Dataset, images_path, labels_path) -> None:
    """Quantize pixels to bytes; images are square when d_0 is a perfect square."""
    side = math.isqrt(data.d0)
    rows, cols = (side, side) if side * side == data.d0 else (1, data.d0)
    pixels = np.rint(np.clip(data.X, 0.0, 1.0) * 255.0).T.reshape(data.n, rows, cols)
    write_idx(images_path, pixels)
    write_idx(labels_path, data.labels)


# ── Synthetic ──────────────────────────────────────────────────────────────

def synthetic_blobs(n: int, d0: int, classes: int, spread: float, seed) -> Dataset:
    """Balanced Gaussian blobs around random centres 0.5 + 0.5*u, u a unit vector.

    The centres lie on the sphere of radius 0.5 about the cube centre (0.5, ..., 0.5)
    rather than a unit sphere about the origin, so every centre is inside [0, 1]^d0;
    samples are clipped to [0, 1] like pixel data.
    """
    if classes > n:
        raise ValueError(f"classes ({classes}) must not exceed n ({n})")
    if spread < 0:
        raise ValueError(f"spread must be nonnegative, got {spread}")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((classes, d0))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centers = 0.5 + 0.5 * dirs
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    X = centers[labels].T + spread * rng.standard_normal((d0, n))
    return Dataset.from_labels(np.clip(X, 0.0, 1.0), labels, classes)


# ── Trace CSV ──────────────────────────────────────────────────────────────

def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_trace_csv(trace: list[TraceRecord], path, *, wall_clock: bool = False) -> None:
    if not trace:
        raise ValueError("write_trace_csv needs a nonempty trace")
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in trace:
            o = r.objective
            writer.writerow([
                r.epoch,
                *(_fmt(v) for v in (o.total, o.risk, o.penalty, o.w_reg, o.v_reg, r.delta_sq,
                                    r.residual_norm, r.bbar_bound, r.train_acc, r.test_acc)),
                _fmt(r.wall_seconds if wall_clock else 0.0),
            ])
    logger.info(f"[data] wrote {len(trace)} trace rows to {path}")


def read_trace_csv(path) -> list[TraceRecord]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected trace header {reader.fieldnames}")
        out = []
        for row in reader:
            v = {k: float(row[k]) for k in CSV_HEADER[1:]}
            out.append(TraceRecord(
                epoch         = int(row["epoch"]),
                objective     = ObjectiveBreakdown(v["risk"], v["w_reg"], v["v_reg"], v["penalty"], v["total"]),
                delta_sq      = v["delta_sq"],
                residual_norm = v["residual"],
                bbar_bound    = v["bbar_bound"],
                train_acc     = v["train_acc"],
                test_acc      = v["test_acc"],
                wall_seconds  = v["seconds"],
            ))
    return out
