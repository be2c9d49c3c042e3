"""Dataset loading (IDX, CSV), synthetic blobs, feature scaling and 2-D projection."""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CSVParseError, EmptyDatasetError, IDXCountMismatchError, IDXMagicError,
                     IDXTruncatedError, UsageError)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_names: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] == 0:
            raise EmptyDatasetError("dataset has no rows")
        if self.labels.shape != (self.inputs.shape[0],):
            raise UsageError("one label per input row is required")
        if not np.all(np.isfinite(self.inputs)):
            raise UsageError("dataset contains non-finite inputs")
        if not self.class_names:
            self.class_names = {int(c): str(int(c)) for c in np.unique(self.labels)}

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def dim(self):
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.inputs[idx], self.labels[idx], dict(self.class_names))


# -- IDX ----------------------------------------------------------------

def _header(buf: bytes, n_fields: int, what: str):
    need = 4 * n_fields
    if len(buf) < need:
        raise IDXTruncatedError(f"{what} file is shorter than its {need}-byte header")
    return struct.unpack(f">{n_fields}I", buf[:need])


def parse_idx(image_bytes: bytes, label_bytes: bytes) -> Dataset:
    """Parse an IDX image/label pair (big-endian). Pixels are scaled by 1/255."""
    magic, = _header(image_bytes, 1, "image")
    if magic != IDX_IMAGE_MAGIC:
        raise IDXMagicError(f"image file magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}")
    magic, = _header(label_bytes, 1, "label")
    if magic != IDX_LABEL_MAGIC:
        raise IDXMagicError(f"label file magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}")
    _, n_img, rows, cols = _header(image_bytes, 4, "image")
    _, n_lab = _header(label_bytes, 2, "label")
    if n_img != n_lab:
        raise IDXCountMismatchError(f"{n_img} images but {n_lab} labels")
    pixels = image_bytes[16:]
    if len(pixels) < n_img * rows * cols:
        raise IDXTruncatedError(
            f"image payload has {len(pixels)} bytes, header promises {n_img * rows * cols}")
    labels = label_bytes[8:]
    if len(labels) < n_lab:
        raise IDXTruncatedError(f"label payload has {len(labels)} bytes, header promises {n_lab}")
    if n_img == 0:
        raise EmptyDatasetError("IDX files contain no items")
    x = np.frombuffer(pixels, dtype=np.uint8, count=n_img * rows * cols)
    x = x.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    y = np.frombuffer(labels, dtype=np.uint8, count=n_lab).astype(np.int64)
    return Dataset(x, y)


def load_idx(image_path, label_path) -> Dataset:
    return parse_idx(Path(image_path).read_bytes(), Path(label_path).read_bytes())


# -- CSV ----------------------------------------------------------------

def parse_csv(text: str) -> Dataset:
    """Parse ``label,f0,f1,...`` rows. Features are used as given."""
    rows = list(csv.reader(io.StringIO(text)))
    while rows and not any(cell.strip() for cell in rows[-1]):
        rows.pop()
    if not rows:
        raise EmptyDatasetError("CSV text is empty")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "label" or len(header) < 2:
        raise CSVParseError("header must start with 'label' followed by feature columns", 1)
    width = len(header)
    labels, feats = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or not any(cell.strip() for cell in row):
            continue
        if len(row) != width:
            raise CSVParseError(f"expected {width} fields, found {len(row)}", lineno)
        try:
            label = float(row[0])
            values = [float(cell) for cell in row[1:]]
        except ValueError:
            raise CSVParseError("non-numeric cell", lineno) from None
        if label != int(label) or label < 0:
            raise CSVParseError(f"label {row[0]!r} is not a non-negative integer", lineno)
        labels.append(int(label))
        feats.append(values)
    if not labels:
        raise EmptyDatasetError("CSV has a header but no data rows")
    return Dataset(np.asarray(feats), np.asarray(labels))


def load_csv(path) -> Dataset:
    return parse_csv(Path(path).read_text(encoding="utf-8"))


def dataset_to_csv(ds: Dataset) -> str:
    out = io.StringIO()
    out.write("label," + ",".join(f"f{i}" for i in range(ds.dim)) + "\n")
    for y, x in zip(ds.labels, ds.inputs):
        out.write(str(int(y)) + "," + ",".join(repr(float(v)) for v in x) + "\n")
    return out.getvalue()


# -- synthetic ----------------------------------------------------------

def _place_means(num_classes, dim, min_dist, rng, max_tries=2000):
    side = min_dist * max(1.0, np.ceil(num_classes ** (1.0 / dim))) * 1.5
    while True:
        means = []
        for _ in range(num_classes):
            for _ in range(max_tries):
                cand = rng.uniform(0.0, side, size=dim)
                if all(np.linalg.norm(cand - m) >= min_dist for m in means):
                    means.append(cand)
                    break
            else:
                break
        if len(means) == num_classes:
            return np.asarray(means)
        side *= 1.25


def gen_synthetic(num_classes: int, per_class: int, dim: int = 2, spread: float = 0.05,
                  separation: float = 10.0, seed: int = 0) -> Dataset:
    """Isotropic Gaussian blobs whose means are at least ``separation * spread`` apart.

    With ``spread == 0`` the means are still spaced ``separation`` apart and
    every point sits on its mean.
    """
    if num_classes < 2:
        raise UsageError("synthetic data needs at least two classes")
    if per_class < 1 or dim < 1:
        raise UsageError("per_class and dim must be positive")
    rng = np.random.default_rng(seed)
    unit = spread if spread > 0 else 1.0
    means = _place_means(num_classes, dim, separation * unit, rng)
    x = np.concatenate([m + spread * rng.standard_normal((per_class, dim)) for m in means])
    y = np.repeat(np.arange(num_classes), per_class)
    return Dataset(x, y)


# -- scaling ------------------------------------------------------------

@dataclass
class Standardizer:
    """Centre each feature, then divide by a per-feature or a shared scale.

    The shared scale is the root mean per-feature variance. It keeps
    relative feature scales, which suits pixels: per-feature scaling turns a
    pixel that is almost always dark into values dozens of units wide.
    """

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, inputs, mode: str = "feature", floor: float = 1e-8) -> "Standardizer":
        x = np.asarray(inputs, dtype=np.float64)
        if mode == "feature":
            std = x.std(axis=0)
            return cls(x.mean(axis=0), np.where(std > floor, std, 1.0))
        if mode == "global":
            rms = float(np.sqrt(x.var(axis=0).mean()))
            return cls(x.mean(axis=0), np.full(x.shape[1], rms if rms > floor else 1.0))
        raise UsageError(f"unknown standardization mode {mode!r}")

    def __call__(self, inputs) -> np.ndarray:
        return (np.asarray(inputs, dtype=np.float64) - self.mean) / self.scale

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "scale": [float(v) for v in self.scale]}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["scale"], dtype=np.float64))


# -- projection ---------------------------------------------------------

def pca_2d(embeddings) -> np.ndarray:
    """Project onto the top two principal axes.

    Each axis is flipped so its largest-magnitude loading is positive.
    Missing axes (rank < 2 or 1-D input) yield zero columns.
    """
    E = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if E.shape[0] < 2:
        raise UsageError("projection needs at least two instances")
    centered = E - E.mean(axis=0)
    cov = centered.T @ centered / (E.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    out = np.zeros((E.shape[0], 2))
    for j, k in enumerate(order[:2]):
        if vals[k] <= 1e-15 * max(1.0, vals.max()):
            continue
        v = vecs[:, k]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        out[:, j] = centered @ v
    return out


def export_projection(embeddings, labels, pseudo_labels, window: int) -> list:
    """Rows ``(x, y, true_label, pseudo_label, window)`` for plotting."""
    xy = pca_2d(embeddings)
    return [(float(a), float(b), int(t), int(p), int(window))
            for (a, b), t, p in zip(xy, labels, pseudo_labels)]


def projection_csv(rows) -> str:
    out = io.StringIO()
    out.write("x,y,true_label,pseudo_label,window\n")
    for x, y, t, p, w in rows:
        out.write(f"{x!r},{y!r},{t},{p},{w}\n")
    return out.getvalue()
