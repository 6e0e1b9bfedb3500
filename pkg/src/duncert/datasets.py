"""Toy data, CSV ingestion, normalization and seeded splits."""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Rng


class ParseError(ValueError):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: list | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.y = np.asarray(self.y)
        if self.X.shape[0] < 1 or self.y.shape[0] != self.X.shape[0]:
            raise ValueError(f"dataset needs N >= 1 rows in X and y, got {self.X.shape[0]} and {self.y.shape[0]}")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y.astype(np.float64)))):
            raise ValueError("dataset contains non-finite entries")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.feature_names)


@dataclass
class Normalizer:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0

    def transform_X(self, X):
        return (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_std

    def transform_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def inverse_y(self, y):
        return np.asarray(y, dtype=np.float64) * self.y_std + self.y_mean


def _safe_std(a: np.ndarray) -> np.ndarray:
    std = np.std(a, axis=0)
    return np.where(std > 0, std, 1.0)


def fit_normalizer(train: Dataset, regression: bool = True) -> Normalizer:
    norm = Normalizer(np.mean(train.X, axis=0), _safe_std(train.X))
    if regression:
        y = train.y.astype(np.float64)
        norm.y_mean = float(np.mean(y))
        norm.y_std = float(_safe_std(y[:, None])[0])
    return norm


def apply_normalizer(norm: Normalizer, ds: Dataset, regression: bool = True) -> Dataset:
    y = norm.transform_y(ds.y) if regression else ds.y
    return Dataset(norm.transform_X(ds.X), y, ds.feature_names)


def toy_regression(n: int = 200, noise_std: float = 0.1, seed: int = 0,
                   return_raw: bool = False):
    """``y = x^3 + noise`` with ``x`` uniform on ``[-4, -2] U [2, 4]``.

    Returns the normalized dataset and its normalizer (and the raw dataset if
    ``return_raw``).
    """
    if n < 2:
        raise ValueError("toy_regression needs n >= 2")
    rng = Rng(seed)
    n_left = n // 2
    u = rng.uniform((n,))
    x = np.where(np.arange(n) < n_left, -4.0 + 2.0 * u, 2.0 + 2.0 * u)
    y = x ** 3 + noise_std * rng.normal((n,))
    raw = Dataset(x[:, None], y)
    norm = fit_normalizer(raw)
    ds = apply_normalizer(norm, raw)
    return (ds, norm, raw) if return_raw else (ds, norm)


def ood_blobs(n_in: int, n_out: int, shift: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Two unit-covariance classes at +-(1, 1) versus one blob at ``shift * (1, -1)``."""
    if shift < 0:
        raise ValueError("shift must be non-negative")
    rng = Rng(seed)
    labels = (np.arange(n_in) % 2).astype(np.int64)
    centers = np.where(labels[:, None] == 1, 1.0, -1.0) * np.ones((1, 2))
    X_in = centers + rng.normal((n_in, 2))
    X_out = shift * np.array([1.0, -1.0]) + rng.normal((n_out, 2))
    return Dataset(X_in, labels), Dataset(X_out, np.zeros(n_out, dtype=np.int64))


_SPLIT_RE = re.compile(r"[,;\s]+")


def load_csv(path, target_column: int = -1, header: str | bool = "auto",
             drop_columns=()) -> Dataset:
    """Read a comma- or whitespace-separated numeric table.

    The target column is split off (default: last). With ``header="auto"`` a
    first line holding any non-numeric cell is taken as column names.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    rows, names = [], None
    width = None
    with open(path, "r", encoding="utf-8") as f:
        lines = [(i + 1, ln.strip()) for i, ln in enumerate(f)]
    lines = [(i, ln) for i, ln in lines if ln]
    for k, (lineno, line) in enumerate(lines):
        cells = [c for c in _SPLIT_RE.split(line) if c != ""]
        if k == 0 and header is not False:
            numeric = all(_is_float(c) for c in cells)
            if header is True or (header == "auto" and not numeric):
                names = cells
                continue
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise ParseError(f"{path}:{lineno}: expected {width} columns, found {len(cells)}")
        row = []
        for j, c in enumerate(cells):
            try:
                row.append(float(c))
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric value {c!r} in column {j + 1}") from None
        rows.append(row)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    data = np.array(rows, dtype=np.float64)
    ncol = data.shape[1]
    tcol = target_column % ncol
    drop = {d % ncol for d in drop_columns} | {tcol}
    keep = [j for j in range(ncol) if j not in drop]
    feat = [names[j] for j in keep] if names and len(names) == ncol else None
    return Dataset(data[:, keep], data[:, tcol], feat)


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def split(ds: Dataset, ratio: float = 0.9, seed: int = 0) -> tuple[Dataset, Dataset]:
    tr, te = split_indices(ds.n, ratio, seed)
    return ds.subset(tr), ds.subset(te)


def split_indices(n: int, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie strictly between 0 and 1")
    n_train = math.ceil(ratio * n)
    if n_train >= n or n_train < 1:
        raise ValueError(f"split of {n} rows at ratio {ratio} leaves an empty side")
    perm = Rng(seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


# Layouts of the standard UCI regression files (file name, target column,
# extra columns to drop). Paths resolve against DUNCERT_DATA_DIR.
UCI_LAYOUTS = {
    "boston": ("housing.data", -1, ()),
    "concrete": ("concrete.csv", -1, ()),
    "energy": ("energy.csv", -2, (-1,)),
    "kin8nm": ("kin8nm.csv", -1, ()),
    "naval": ("naval.csv", -1, (-2,)),
    "power": ("power.csv", -1, ()),
    "protein": ("protein.csv", 0, ()),
    "wine": ("winequality-red.csv", -1, ()),
    "yacht": ("yacht_hydrodynamics.data", -1, ()),
}


def data_dir() -> Path:
    return Path(os.environ.get("DUNCERT_DATA_DIR", "data"))


def load_uci(name: str, root=None) -> Dataset:
    if name not in UCI_LAYOUTS:
        raise KeyError(f"unknown UCI dataset {name!r}; known: {sorted(UCI_LAYOUTS)}")
    fname, target, drop = UCI_LAYOUTS[name]
    return load_csv(Path(root) / fname if root else data_dir() / fname, target, "auto", drop)
