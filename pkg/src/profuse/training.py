"""Training, evaluation, robustness scoring and representation probes."""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Optimizer, Rng, Tensor
from .models import Model
from .tasks import NoiseSpec, SyntheticDataset, corrupt

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 3e-3
    epochs: int = 60
    batch_size: int = 64
    seed: int = 0
    patience: int | None = None
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0


def loss_kind(ds: SyntheticDataset) -> str:
    return "softmax_cross_entropy" if ds.kind == "classification" else "mse"


def predict(model: Model, xs: Sequence[np.ndarray], chunk: int = 4096) -> np.ndarray:
    n = xs[0].shape[0]
    with ad.no_grad():
        outs = [model([x[i:i + chunk] for x in xs]).data for i in range(0, n, chunk)]
    return np.concatenate(outs, axis=0)


def dataset_loss(model: Model, ds: SyntheticDataset) -> float:
    pred = predict(model, ds.inputs)
    with ad.no_grad():
        return ad.loss(loss_kind(ds), Tensor(pred), ds.Y).item()


def train(model: Model, train_ds: SyntheticDataset, val_ds: SyntheticDataset | None,
          cfg: TrainConfig) -> History:
    """Minibatch training; restores the parameters with the best validation loss.

    Without a validation set the final parameters are kept.
    """
    for x, d in zip(train_ds.inputs, model.input_dims):
        if x.shape[1] != d:
            raise ValueError(f"dataset width {x.shape[1]} does not match model input {d}")
    params = model.parameters()
    opt = Optimizer(params, cfg.optimizer, cfg.lr, momentum=cfg.momentum if cfg.optimizer == "sgd" else 0.0)
    kind = loss_kind(train_ds)
    rng = Rng(cfg.seed).split(7)
    hist = History()
    n = len(train_ds)
    best = math.inf
    best_state = [p.data.copy() for p in params]
    stale = 0
    X1, X2, Y = train_ds.X1, train_ds.X2, train_ds.Y
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            loss = ad.loss(kind, model([X1[idx], X2[idx]]), Y[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch} (optimizer {cfg.optimizer}, lr {cfg.lr})"
                )
            ad.backward(loss)
            opt.step()
            total += value * len(idx)
        hist.train_loss.append(total / n)
        if val_ds is None:
            continue
        v = dataset_loss(model, val_ds)
        hist.val_loss.append(v)
        if v < best:
            best, stale, hist.best_epoch = v, 0, epoch
            best_state = [p.data.copy() for p in params]
        else:
            stale += 1
            if cfg.patience is not None and stale > cfg.patience:
                break
    if val_ds is not None and cfg.epochs > 0:
        for p, s in zip(params, best_state):
            p.data = s
    return hist


def evaluate(model: Model, ds: SyntheticDataset, metric: str) -> float:
    """``accuracy`` (argmax) for classification, ``mse`` for regression."""
    if metric == "accuracy":
        if ds.kind != "classification":
            raise ValueError("accuracy needs a classification dataset")
        return float(np.mean(predict(model, ds.inputs).argmax(axis=1) == ds.Y))
    if metric == "mse":
        if ds.kind != "regression":
            raise ValueError("mse needs a regression dataset")
        pred = predict(model, ds.inputs)
        return float(np.mean((pred - ds.Y) ** 2))
    raise ValueError(f"unknown metric {metric!r}")


def metric_for(ds: SyntheticDataset) -> str:
    return "accuracy" if ds.kind == "classification" else "mse"


# -- robustness ---------------------------------------------------------------------

HIGHER_IS_BETTER = {"accuracy": True, "mse": False}


@dataclass(frozen=True)
class RobustnessCurve:
    sigmas: tuple[float, ...]
    values: tuple[float, ...]
    metric: str

    def __post_init__(self):
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.sigmas) != len(self.values):
            raise ValueError(f"{len(self.sigmas)} noise levels but {len(self.values)} values")
        if self.metric not in HIGHER_IS_BETTER:
            raise ValueError(f"unknown metric {self.metric!r}")


def robustness_curve(model: Model, ds: SyntheticDataset, noise: NoiseSpec, rng: Rng,
                     metric: str | None = None) -> RobustnessCurve:
    """Evaluate on copies of ``ds`` corrupted at each grid level (one stream per level)."""
    metric = metric or metric_for(ds)
    grid = noise.grid
    vals = [evaluate(model, corrupt(ds, s, noise.modalities, rng.split(i)), metric)
            for i, s in enumerate(grid)]
    return RobustnessCurve(tuple(grid), tuple(vals), metric)


def _trapezoid(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def robust_auc(f: RobustnessCurve, b: RobustnessCurve) -> float:
    """Grid-normalized area between two performance-vs-noise curves.

    Positive means ``f`` is more robust than ``b`` for either metric
    direction.
    """
    if f.sigmas != b.sigmas:
        raise ValueError("robustness curves use different noise grids")
    if f.metric != b.metric:
        raise ValueError(f"metric mismatch: {f.metric} vs {b.metric}")
    x = np.asarray(f.sigmas)
    gap = np.asarray(f.values) - np.asarray(b.values)
    extent = x[-1] - x[0]
    area = float(gap[0]) if extent == 0 else _trapezoid(x, gap) / extent
    return area if HIGHER_IS_BETTER[f.metric] else -area


def minmax_scale(scores: Sequence[float]) -> list[float]:
    s = np.asarray(scores, dtype=np.float64)
    if s.size < 2:
        raise ValueError("min-max scaling needs at least two scores")
    lo, hi = s.min(), s.max()
    if hi == lo:
        warnings.warn("all scores equal; min-max scaling is degenerate, returning 0.5", stacklevel=2)
        return [0.5] * s.size
    return [float(v) for v in (s - lo) / (hi - lo)]


# -- trial bookkeeping ----------------------------------------------------------------

@dataclass
class TrialResult:
    model_tag: str
    seed: int
    metric: str
    clean: float
    per_sigma: list[float] = field(default_factory=list)
    tau: float = float("nan")
    wall_ms: float = 0.0
    train_metric: float = float("nan")
    val_metric: float = float("nan")


def improvement_stats(base: Sequence[TrialResult], pro: Sequence[TrialResult]) -> tuple[float, float]:
    """(fraction of seeds where ``pro`` strictly wins, mean % improvement)."""
    bmap = {r.seed: r for r in base}
    pmap = {r.seed: r for r in pro}
    if len(bmap) != len(base) or len(pmap) != len(pro) or set(bmap) != set(pmap):
        raise ValueError("base and pro trials must be paired one-to-one by seed")
    if not bmap:
        raise ValueError("no trials to compare")
    wins, pct = [], []
    for seed in sorted(bmap):
        b, p = bmap[seed], pmap[seed]
        if b.metric != p.metric:
            raise ValueError(f"seed {seed}: metric {b.metric} vs {p.metric}")
        if HIGHER_IS_BETTER[b.metric]:
            wins.append(p.clean > b.clean)
            pct.append(100.0 * (p.clean - b.clean) / b.clean)
        else:
            wins.append(p.clean < b.clean)
            pct.append(100.0 * (b.clean - p.clean) / b.clean)
    return float(np.mean(wins)), float(np.mean(pct))


def write_trials_csv(path: str | Path, trials: Sequence[TrialResult], sigmas: Sequence[float]) -> None:
    header = ["model_tag", "seed", "metric", "clean"] + [f"sigma_{s:g}" for s in sigmas] + ["tau", "wall_ms"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t in trials:
            w.writerow([t.model_tag, t.seed, t.metric, repr(t.clean), *map(repr, t.per_sigma),
                        repr(t.tau), f"{t.wall_ms:.1f}"])


# -- probes ---------------------------------------------------------------------------

@dataclass
class ProbeResult:
    steps: list[int]
    accuracy: dict[tuple[int, int], float]  # (modality, step) -> test accuracy

    def by_modality(self, m: int) -> list[float]:
        return [self.accuracy[(m, t)] for t in self.steps]


PROBE_EPOCHS = 200
PROBE_LR = 0.05


def fit_linear_probe(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray,
                     test_y: np.ndarray, n_classes: int, seed: int = 0) -> float:
    """Full-batch multinomial logistic regression; returns test accuracy."""
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0)
    sd[sd < 1e-12] = 1.0
    xtr = Tensor((train_x - mu) / sd)
    xte = (test_x - mu) / sd
    w = Tensor(np.zeros((train_x.shape[1], n_classes)), requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    opt = Optimizer([w, b], "adam", PROBE_LR)
    for _ in range(PROBE_EPOCHS):
        opt.zero_grad()
        ad.backward(ad.softmax_cross_entropy(ad.add(ad.matmul(xtr, w), b), train_y))
        opt.step()
    pred = (xte @ w.data + b.data).argmax(axis=1)
    return float(np.mean(pred == test_y))


def representations(model: Model, ds: SyntheticDataset, steps: Sequence[int]) -> dict[int, list[np.ndarray]]:
    """Detached encoder outputs for every requested step from one unrolled pass."""
    with ad.no_grad():
        tr = model.trace(ds.inputs, unroll=max(steps))
    return {t: [h.data.copy() for h in tr.unimodal[t - 1]] for t in steps}


def probe(model: Model, train_ds: SyntheticDataset, test_ds: SyntheticDataset,
          steps: Sequence[int], n_classes: int | None = None) -> ProbeResult:
    if train_ds.kind != "classification" or test_ds.kind != "classification":
        raise ValueError("probes need a classification task")
    steps = list(steps)
    if not steps or min(steps) < 1 or max(steps) > model.unroll:
        raise ValueError(f"probe steps must lie in [1, {model.unroll}], got {steps}")
    k = n_classes or int(max(train_ds.Y.max(), test_ds.Y.max()) + 1)
    rtr = representations(model, train_ds, steps)
    rte = representations(model, test_ds, steps)
    acc = {}
    for t in steps:
        for m, (a, b) in enumerate(zip(rtr[t], rte[t])):
            acc[(m, t)] = fit_linear_probe(a, train_ds.Y, b, test_ds.Y, k)
    return ProbeResult(steps, acc)


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, 1000.0 * (time.perf_counter() - t0)
