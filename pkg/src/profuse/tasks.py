"""Synthetic two-modality datasets and test-time corruption.

Lattice task: modality 1 samples a random smooth function on a lattice,
modality 2 embeds a random lattice index, and the label is the first
non-zero decimal digit of the function at that index. Neither modality
alone determines the label.

Generative task: ``X1 = lrelu(W1 Z) - 2|eta| sin(W2 Z) + e1``,
``X2 = sin(W2 Z) + sigma2 e2``, ``Y = Wy Z + ey`` with
``Z ~ U[-2.5, 2.5]^d``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Rng

LATTICE_CLASSES = 9


@dataclass(frozen=True)
class LatticeTaskConfig:
    D: int = 16
    M: int = 8
    f_max: float = 3.0
    p: int = 16
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.D < 2 or self.M < 1 or self.p < 2:
            raise ValueError(f"lattice task needs D >= 2, M >= 1, p >= 2: {self}")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("dataset sizes must be >= 1")
        if self.f_max <= 0:
            raise ValueError("f_max must be positive")


@dataclass(frozen=True)
class GenerativeTaskConfig:
    d_z: int = 8
    D1: int = 16
    D2: int = 16
    K_y: int = 4
    eta: float = 0.0
    sigma2: float = 0.0
    n_train: int = 500
    n_val: int = 250
    n_test: int = 1000
    seed: int = 0
    noise: bool = True

    def __post_init__(self):
        if min(self.d_z, self.D1, self.D2, self.K_y) < 1:
            raise ValueError(f"all generative-task dims must be >= 1: {self}")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be >= 0")
        if self.D1 != self.D2:
            # the corruption term sin(W2 Z) of X1 has the width of X2
            raise ValueError(f"D1 and D2 must be equal, got {self.D1} and {self.D2}")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("dataset sizes must be >= 1")


@dataclass(frozen=True)
class SyntheticDataset:
    X1: np.ndarray
    X2: np.ndarray
    Y: np.ndarray
    kind: str  # "classification" or "regression"

    def __post_init__(self):
        n = self.X1.shape[0]
        if self.X2.shape[0] != n or self.Y.shape[0] != n:
            raise ValueError(
                f"row counts disagree: X1 {self.X1.shape}, X2 {self.X2.shape}, Y {self.Y.shape}"
            )
        if self.kind not in ("classification", "regression"):
            raise ValueError(f"unknown task kind {self.kind!r}")

    def __len__(self) -> int:
        return self.X1.shape[0]

    @property
    def inputs(self) -> list[np.ndarray]:
        return [self.X1, self.X2]

    def subset(self, idx) -> "SyntheticDataset":
        return SyntheticDataset(self.X1[idx], self.X2[idx], self.Y[idx], self.kind)


@dataclass(frozen=True)
class Splits:
    train: SyntheticDataset
    val: SyntheticDataset
    test: SyntheticDataset


@dataclass(frozen=True)
class NoiseSpec:
    sigma_max: float = 2.0
    count: int = 9
    modalities: tuple[int, ...] = (0, 1)

    def __post_init__(self):
        if self.count < 1 or self.sigma_max < 0:
            raise ValueError(f"noise grid needs count >= 1 and sigma_max >= 0: {self}")

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.sigma_max, self.count)


# -- lattice task -----------------------------------------------------------------

def first_nonzero_digit(value: float) -> int:
    """Leading non-zero decimal digit of ``|value|`` (1..9)."""
    v = abs(float(value))
    if v == 0.0 or not math.isfinite(v):
        raise ValueError(f"no non-zero digit in {value!r}")
    # the shortest round-trip repr avoids log10 rounding at powers of ten and
    # reads 0.3 as 3 rather than the 2.99... of its exact binary value
    return int(next(c for c in repr(v) if c in "123456789"))


def position_embedding(pos: np.ndarray, p: int) -> np.ndarray:
    """Sinusoidal embedding of positions in [0, 1): pairs ``sin/cos(pi 2^k pos)``."""
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 1)
    k = np.arange((p + 1) // 2)
    ang = pos * (np.pi * 2.0 ** k)
    emb = np.empty((pos.shape[0], 2 * k.size))
    emb[:, 0::2] = np.sin(ang)
    emb[:, 1::2] = np.cos(ang)
    return emb[:, :p]


def _lattice_block(cfg: LatticeTaskConfig, n: int, rng: Rng) -> SyntheticDataset:
    grid = np.arange(cfg.D) / cfg.D
    X1 = np.empty((n, cfg.D))
    idx = rng.integers(0, cfg.D, size=n)
    Y = np.empty(n, dtype=np.int64)
    for s in range(n):
        l = idx[s]
        while True:
            a = rng.uniform(-1.0, 1.0, size=cfg.M)
            f = rng.uniform(0.0, cfg.f_max, size=cfg.M)
            phi = rng.uniform(0.0, 2 * np.pi, size=cfg.M)
            row = np.sin(2 * np.pi * np.outer(grid, f) + phi) @ a
            if abs(row[l]) >= 1e-9:
                break
        X1[s] = row
        Y[s] = first_nonzero_digit(row[l]) - 1
    X2 = position_embedding(idx / cfg.D, cfg.p)
    return SyntheticDataset(X1, X2, Y, "classification")


def gen_lattice(cfg: LatticeTaskConfig, rng: Rng | None = None) -> Splits:
    """Draw train/val/test splits; every sample gets a fresh random function."""
    rng = Rng(cfg.seed) if rng is None else rng
    return Splits(
        _lattice_block(cfg, cfg.n_train, rng.split(0)),
        _lattice_block(cfg, cfg.n_val, rng.split(1)),
        _lattice_block(cfg, cfg.n_test, rng.split(2)),
    )


# -- generative task ----------------------------------------------------------------

def leaky_relu_np(x: np.ndarray, alpha: float = 0.01) -> np.ndarray:
    return np.where(x > 0, x, alpha * x)


def _generative_block(cfg: GenerativeTaskConfig, mats, n: int, rng: Rng) -> SyntheticDataset:
    W1, W2, Wy = mats
    Z = rng.uniform(-2.5, 2.5, size=(n, cfg.d_z))
    e1 = rng.normal((n, cfg.D1))
    e2 = rng.normal((n, cfg.D2))
    ey = rng.normal((n, cfg.K_y))
    if not cfg.noise:
        e1, e2, ey = 0 * e1, 0 * e2, 0 * ey
    s = np.sin(Z @ W2.T)
    X1 = leaky_relu_np(Z @ W1.T) - 2 * abs(cfg.eta) * s + e1
    X2 = s + cfg.sigma2 * e2
    Y = Z @ Wy.T + ey
    return SyntheticDataset(X1, X2, Y, "regression")


def generative_matrices(cfg: GenerativeTaskConfig, rng: Rng):
    return (rng.normal((cfg.D1, cfg.d_z)), rng.normal((cfg.D2, cfg.d_z)), rng.normal((cfg.K_y, cfg.d_z)))


def gen_generative(cfg: GenerativeTaskConfig, rng: Rng | None = None) -> Splits:
    """Draw the mixing matrices once, then independent train/val/test samples."""
    rng = Rng(cfg.seed) if rng is None else rng
    mats = generative_matrices(cfg, rng.split(0))
    return Splits(
        _generative_block(cfg, mats, cfg.n_train, rng.split(1)),
        _generative_block(cfg, mats, cfg.n_val, rng.split(2)),
        _generative_block(cfg, mats, cfg.n_test, rng.split(3)),
    )


# -- corruption ---------------------------------------------------------------------

def corrupt(ds: SyntheticDataset, sigma: float, modalities: Sequence[int], rng: Rng) -> SyntheticDataset:
    """Copy of ``ds`` with ``sigma * N(0, 1)`` added to the selected modalities."""
    if sigma < 0:
        raise ValueError(f"noise level must be >= 0, got {sigma}")
    xs = [ds.X1.copy(), ds.X2.copy()]
    for m in modalities:
        if m not in (0, 1):
            raise ValueError(f"modality index must be 0 or 1, got {m}")
        if sigma > 0:
            xs[m] = xs[m] + sigma * rng.normal(xs[m].shape)
    return SyntheticDataset(xs[0], xs[1], ds.Y.copy(), ds.kind)


# -- CSV ----------------------------------------------------------------------------

def save_csv(ds: SyntheticDataset, path: str | Path) -> None:
    """Columns ``x1_0..x1_{D1-1}, x2_0.., y_0..`` (``y`` for class labels)."""
    Y = ds.Y.reshape(len(ds), -1)
    header = [f"x1_{i}" for i in range(ds.X1.shape[1])] + [f"x2_{i}" for i in range(ds.X2.shape[1])]
    header += ["y"] if ds.kind == "classification" else [f"y_{i}" for i in range(Y.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for a, b, y in zip(ds.X1, ds.X2, Y):
            ys = [str(int(v)) for v in y] if ds.kind == "classification" else [repr(float(v)) for v in y]
            w.writerow([repr(float(v)) for v in a] + [repr(float(v)) for v in b] + ys)


def load_csv(path: str | Path) -> SyntheticDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=object)
    cols = {tag: [i for i, h in enumerate(header) if h.split("_")[0] == tag] for tag in ("x1", "x2")}
    ycols = [i for i, h in enumerate(header) if h == "y" or h.startswith("y_")]
    n = body.shape[0]
    X1 = body[:, cols["x1"]].astype(np.float64).reshape(n, -1)
    X2 = body[:, cols["x2"]].astype(np.float64).reshape(n, -1)
    if header[ycols[0]] == "y":
        return SyntheticDataset(X1, X2, body[:, ycols[0]].astype(np.int64), "classification")
    return SyntheticDataset(X1, X2, body[:, ycols].astype(np.float64).reshape(n, -1), "regression")


def with_seed(cfg, seed: int):
    return replace(cfg, seed=seed)
