"""Dataset ingestion: IDX image files, labeled CSV, and synthetic tasks."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .rng import make_rng

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    classes: int

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x_train.shape[1:])

    def subset(self, n_train: int, n_eval: int | None = None) -> "Dataset":
        n_eval = n_eval if n_eval is not None else len(self.x_eval)
        return Dataset(self.x_train[:n_train], self.y_train[:n_train],
                       self.x_eval[:n_eval], self.y_eval[:n_eval], self.classes)


# ----------------------------------------------------------------- IDX files

def load_idx_images(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise DataError(f"{path}: truncated IDX image header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise DataError(
            f"{path}: bad IDX image magic {magic:#010x}, "
            f"expected {IDX_IMAGE_MAGIC:#010x}")
    body = np.frombuffer(raw, dtype=np.uint8, offset=16)
    if body.size != n * rows * cols:
        raise DataError(f"{path}: expected {n * rows * cols} pixels, "
                        f"got {body.size}")
    return (body.astype(np.float64) / 255.0).reshape(n, 1, rows, cols)


def load_idx_labels(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DataError(f"{path}: truncated IDX label header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABEL_MAGIC:
        raise DataError(
            f"{path}: bad IDX label magic {magic:#010x}, "
            f"expected {IDX_LABEL_MAGIC:#010x}")
    body = np.frombuffer(raw, dtype=np.uint8, offset=8)
    if body.size != n:
        raise DataError(f"{path}: expected {n} labels, got {body.size}")
    return body.astype(np.int64)


# ---------------------------------------------------------------------- CSV

def load_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Feature table with header row `label,f0,f1,...`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header or header[0] != "label":
            raise DataError(f"{path}: first header column must be 'label'")
        width = len(header)
        xs, ys = [], []
        for rownum, row in enumerate(reader, start=2):
            if len(row) != width:
                raise DataError(
                    f"{path}: row {rownum} has {len(row)} cells, expected {width}")
            vals = []
            for colnum, cell in enumerate(row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}: row {rownum}, column '{header[colnum]}': "
                        f"non-numeric value '{cell}'") from None
            ys.append(vals[0])
            xs.append(vals[1:])
    if not xs:
        raise DataError(f"{path}: no data rows")
    x = np.asarray(xs, dtype=np.float64)
    y_float = np.asarray(ys)
    y = y_float.astype(np.int64)
    if not np.array_equal(y_float, y) or y.min() < 0:
        raise DataError(f"{path}: labels must be non-negative integers")
    return x, y


# ------------------------------------------------------------ synthetic data

def synthetic_features(n: int = 4000, features: int = 20, informative: int = 4,
                       classes: int = 2, seed: int = 0, separation: float = 2.0
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Classification where only the first `informative` features carry signal."""
    rng = make_rng(seed)
    centers = rng.standard_normal((classes, informative))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    y = rng.integers(0, classes, size=n)
    x = rng.standard_normal((n, features))
    x[:, :informative] += centers[y]
    return x, y


# seven-segment encodings: (top, top-left, top-right, middle, bottom-left,
# bottom-right, bottom) per digit
_SEGMENTS = [
    (1, 1, 1, 0, 1, 1, 1), (0, 0, 1, 0, 0, 1, 0), (1, 0, 1, 1, 1, 0, 1),
    (1, 0, 1, 1, 0, 1, 1), (0, 1, 1, 1, 0, 1, 0), (1, 1, 0, 1, 0, 1, 1),
    (1, 1, 0, 1, 1, 1, 1), (1, 0, 1, 0, 0, 1, 0), (1, 1, 1, 1, 1, 1, 1),
    (1, 1, 1, 1, 0, 1, 1),
]


def _digit_template(k: int, size: int) -> np.ndarray:
    """Seven-segment digit glyph drawn with 2px strokes in a centered box."""
    t = np.zeros((size, size))
    top, left = size // 5, size // 3
    h = size - 2 * top          # glyph height
    w = size - 2 * left         # glyph width
    mid = top + h // 2
    bot = top + h
    right = left + w
    on = _SEGMENTS[k % 10]
    if on[0]:
        t[top:top + 2, left:right] = 1.0
    if on[1]:
        t[top:mid, left:left + 2] = 1.0
    if on[2]:
        t[top:mid, right - 2:right] = 1.0
    if on[3]:
        t[mid:mid + 2, left:right] = 1.0
    if on[4]:
        t[mid:bot, left:left + 2] = 1.0
    if on[5]:
        t[mid:bot, right - 2:right] = 1.0
    if on[6]:
        t[bot - 2:bot, left:right] = 1.0
    return t


def synthetic_images(n: int = 3000, size: int = 28, classes: int = 10,
                     seed: int = 0, noise: float = 0.6, shift: int = 3
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Noisy, jittered seven-segment digits: spatial structure matters."""
    rng = make_rng(seed)
    templates = np.stack([_digit_template(k, size) for k in range(classes)])
    y = rng.integers(0, classes, size=n)
    x = np.empty((n, 1, size, size))
    for i in range(n):
        t = templates[y[i]]
        dr, dc = rng.integers(-shift, shift + 1, size=2)
        x[i, 0] = np.roll(np.roll(t, dr, axis=0), dc, axis=1)
    x += noise * rng.standard_normal(x.shape)
    return x, y


def parse_synthetic_spec(spec: str) -> tuple[np.ndarray, np.ndarray]:
    """Spec strings like `features:n=4000,informative=4,seed=7`."""
    kind, _, rest = spec.partition(":")
    kwargs: dict[str, float] = {}
    if rest:
        for item in rest.split(","):
            key, _, val = item.partition("=")
            if not val:
                raise DataError(f"synthetic spec item '{item}' is not key=value")
            kwargs[key.strip()] = float(val)
    try:
        if kind == "features":
            ints = {k: int(v) for k, v in kwargs.items() if k != "separation"}
            if "separation" in kwargs:
                ints["separation"] = kwargs["separation"]
            return synthetic_features(**ints)
        if kind == "images":
            ints = {k: int(v) for k, v in kwargs.items() if k != "noise"}
            if "noise" in kwargs:
                ints["noise"] = kwargs["noise"]
            return synthetic_images(**ints)
    except TypeError as exc:
        raise DataError(f"bad synthetic spec '{spec}': {exc}") from None
    raise DataError(f"unknown synthetic kind '{kind}'")


# -------------------------------------------------------------------- loader

def _split_normalize(x: np.ndarray, y: np.ndarray, split: float, seed: int,
                     normalize: bool) -> Dataset:
    classes = int(y.max()) + 1
    if y.min() < 0:
        raise DataError("negative label")
    n = len(x)
    order = make_rng(seed).permutation(n)
    cut = int(round(split * n))
    tr, ev = order[:cut], order[cut:]
    x_train, y_train = x[tr], y[tr]
    x_eval, y_eval = x[ev], y[ev]
    if normalize:
        # statistics from the training split only
        if x.ndim == 2:
            mean = x_train.mean(axis=0)
            std = x_train.std(axis=0) + 1e-8
        else:
            mean = x_train.mean()
            std = x_train.std() + 1e-8
        x_train = (x_train - mean) / std
        x_eval = (x_eval - mean) / std
    return Dataset(x_train, y_train, x_eval, y_eval, classes)


def load_dataset(fmt: str, path: str | None = None,
                 labels_path: str | None = None, spec: str | None = None,
                 split: float = 0.8, seed: int = 0,
                 normalize: bool = True) -> Dataset:
    if fmt == "idx":
        if not path or not labels_path:
            raise DataError("idx format needs both an image and a label path")
        x = load_idx_images(path)
        y = load_idx_labels(labels_path)
        if len(x) != len(y):
            raise DataError(f"{path}: {len(x)} images but {len(y)} labels")
    elif fmt == "csv":
        if not path:
            raise DataError("csv format needs a path")
        x, y = load_csv(path)
    elif fmt == "synthetic":
        if not spec:
            raise DataError("synthetic format needs a spec string")
        x, y = parse_synthetic_spec(spec)
    else:
        raise DataError(f"unknown dataset format '{fmt}'")
    return _split_normalize(x, y, split, seed, normalize)
