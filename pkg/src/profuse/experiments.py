"""Experiment drivers behind the command-line runner.

Every experiment is a pure function of its config: trial ``t`` uses the
seed ``trial_seeds(cfg.seed, trials)[t]`` for data, initialization and
minibatch order, so results do not depend on scheduling. Trials may run
on worker threads; rows are always assembled in trial order.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import expressiveness
from .autodiff import Rng
from .config import ExperimentConfig, trial_seeds
from .models import (
    EncoderSpec, FusionSpec, IterativeVariantConfig, Model, PredictorSpec, ProFusionConfig,
    augment, build_base, build_early, build_iterative_variant,
)
from .tasks import LATTICE_CLASSES, Splits, gen_generative, gen_lattice, with_seed
from .training import (
    evaluate, metric_for, minmax_scale, probe, robust_auc, robustness_curve, train,
)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    hard: bool
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else ("FAIL" if self.hard else "WARN")
        kind = "hard" if self.hard else "soft"
        return f"[{tag}] ({kind}) {self.name}: {self.detail}"


@dataclass
class RunResult:
    kind: str
    columns: list[str]
    rows: list[dict[str, Any]]
    summary: list[str] = field(default_factory=list)
    checks: list[Check] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    deterministic: bool = True  # False when rows carry wall-clock values

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks if c.hard)


def run_parallel(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally on ``jobs`` threads, order preserved."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# -- model construction ---------------------------------------------------------------

def build_variant(name: str, cfg: ExperimentConfig, input_dims: Sequence[int], out_dim: int,
                  seed: int, hidden: int | None = None, unroll: int | None = None,
                  context_dim: int | None = None) -> Model:
    """Construct one named variant; variants sharing a seed share the base weights."""
    m = cfg.model
    h = hidden or m.hidden
    widths = (h,) * m.depth
    pred = PredictorSpec(out_dim, (h,) if m.predictor_widths is None else m.predictor_widths, m.activation)
    rng = Rng(seed)
    if name == "early":
        return build_early(input_dims, widths, pred, rng.split(1), m.activation)
    base = build_base([EncoderSpec(d, widths, m.activation) for d in input_dims], FusionSpec(), pred, rng.split(1))
    R = unroll or m.unroll
    if name == "late":
        return base
    if name == "pro":
        pcfg = ProFusionConfig(unroll=R, context_dim=context_dim if context_dim is not None else m.context_dim,
                               injection=m.injection, init_scale=m.init_scale)
        return augment(base, pcfg, rng.split(2))
    if name == "iterative":
        return build_iterative_variant(base, IterativeVariantConfig(R, m.init_scale), rng.split(2))
    raise ValueError(f"unknown variant {name!r}")


def _splits(cfg: ExperimentConfig, seed: int, **task_changes) -> Splits:
    task = replace(with_seed(cfg.task, seed), **task_changes)
    return gen_lattice(task) if cfg.task_name == "lattice" else gen_generative(task)


def _out_dim(cfg: ExperimentConfig) -> int:
    return LATTICE_CLASSES if cfg.task_name == "lattice" else cfg.task.K_y


def _fit(model: Model, sp: Splits, cfg: ExperimentConfig, seed: int) -> Model:
    train(model, sp.train, sp.val, replace(cfg.train, seed=seed))
    return model


def _mean_sd(vals) -> tuple[float, float]:
    v = np.asarray(vals, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def pooled_sd(a, b) -> float:
    """Pooled sample standard deviation of two groups."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    na, nb = a.size, b.size
    if na + nb <= 2:
        return 0.0
    ss = (na - 1) * (a.var(ddof=1) if na > 1 else 0.0) + (nb - 1) * (b.var(ddof=1) if nb > 1 else 0.0)
    return float(np.sqrt(ss / (na + nb - 2)))


# -- dim sweep -------------------------------------------------------------------------

def run_dim_sweep(cfg: ExperimentConfig, jobs: int = 1) -> RunResult:
    seeds = trial_seeds(cfg.seed, cfg.trials)
    dims = list(cfg.dims)

    def trial(args):
        t, seed = args
        sp = _splits(cfg, seed)
        in_dims = [sp.train.X1.shape[1], sp.train.X2.shape[1]]
        out = []
        for h in dims:
            for v in cfg.variants:
                model = _fit(build_variant(v, cfg, in_dims, LATTICE_CLASSES, seed, hidden=h), sp, cfg, seed)
                out.append(dict(dim=h, model=v, trial=t, seed=seed, accuracy=evaluate(model, sp.test, "accuracy")))
        return out

    per_trial = run_parallel(trial, list(enumerate(seeds)), jobs)
    rows = sorted((r for tr in per_trial for r in tr),
                  key=lambda r: (dims.index(r["dim"]), cfg.variants.index(r["model"]), r["trial"]))
    acc = {(h, v): [r["accuracy"] for r in rows if r["dim"] == h and r["model"] == v]
           for h in dims for v in cfg.variants}
    res = RunResult(cfg.kind, ["dim", "model", "trial", "seed", "accuracy"], rows, seeds=seeds)
    res.summary.append(f"hidden-dim sweep on the lattice task, {cfg.trials} trials per cell")
    res.summary.append("dim  " + "  ".join(f"{v:>17s}" for v in cfg.variants))
    for h in dims:
        cells = [f"{m:.4f} +- {s:.4f}" for m, s in (_mean_sd(acc[(h, v)]) for v in cfg.variants)]
        res.summary.append(f"{h:<4d} " + "  ".join(f"{c:>17s}" for c in cells))
    res.checks.extend(dim_sweep_checks(acc, dims, cfg.variants))
    return res


def dim_sweep_checks(acc: dict, dims: Sequence[int], variants: Sequence[str]) -> list[Check]:
    checks = []
    if "pro" in variants and "late" in variants:
        small = [h for h in dims if h <= 8]
        for h in small:
            p, l = np.mean(acc[(h, "pro")]), np.mean(acc[(h, "late")])
            checks.append(Check(f"pro beats late at dim {h}", bool(p > l), True, f"{p:.4f} vs {l:.4f}"))
        if len(dims) > 1:
            lo, hi = min(dims), max(dims)
            g_lo = np.mean(acc[(lo, "pro")]) - np.mean(acc[(lo, "late")])
            g_hi = np.mean(acc[(hi, "pro")]) - np.mean(acc[(hi, "late")])
            checks.append(Check("pro-late gap shrinks with width", bool(g_hi < g_lo), True,
                                f"gap {g_lo:+.4f} at dim {lo}, {g_hi:+.4f} at dim {hi}"))
    if "early" in variants and "late" in variants:
        hi = max(dims)
        diff = abs(np.mean(acc[(hi, "late")]) - np.mean(acc[(hi, "early")]))
        sd = pooled_sd(acc[(hi, "late")], acc[(hi, "early")])
        checks.append(Check(f"late matches early at dim {hi}", bool(diff <= sd), False,
                            f"|diff| {diff:.4f}, pooled sd {sd:.4f}"))
    return checks


# -- generative grid --------------------------------------------------------------------

def run_generative_grid(cfg: ExperimentConfig, jobs: int = 1) -> RunResult:
    seeds = trial_seeds(cfg.seed, cfg.trials)
    cells = [(e, s) for e in cfg.etas for s in cfg.sigma2s]
    base_name = "late"

    def trial(args):
        (eta, s2), t, seed = args
        sp = _splits(cfg, seed, eta=eta, sigma2=s2)
        in_dims = [sp.train.X1.shape[1], sp.train.X2.shape[1]]
        models = {v: _fit(build_variant(v, cfg, in_dims, cfg.task.K_y, seed), sp, cfg, seed)
                  for v in (base_name, "pro")}
        mse = {v: evaluate(m, sp.test, "mse") for v, m in models.items()}
        curves = {v: robustness_curve(m, sp.test, cfg.noise, Rng(seed).split(5)) for v, m in models.items()}
        b, p = mse[base_name], mse["pro"]
        return dict(row="trial", eta=eta, sigma2=s2, trial=t, seed=seed, mse_base=b, mse_pro=p,
                    improvement_pct=100.0 * (b - p) / b, fraction_improved=float(p < b),
                    robust_auc=robust_auc(curves["pro"], curves[base_name]))

    jobs_list = [(c, t, s) for c in cells for t, s in enumerate(seeds)]
    trials = run_parallel(trial, jobs_list, jobs)
    rows: list[dict] = []
    for e, s in cells:
        mine = [r for r in trials if r["eta"] == e and r["sigma2"] == s]
        rows.extend(mine)
        rows.append(dict(row="cell", eta=e, sigma2=s, trial="", seed="",
                         mse_base=float(np.mean([r["mse_base"] for r in mine])),
                         mse_pro=float(np.mean([r["mse_pro"] for r in mine])),
                         improvement_pct=float(np.mean([r["improvement_pct"] for r in mine])),
                         fraction_improved=float(np.mean([r["fraction_improved"] for r in mine])),
                         robust_auc=float(np.mean([r["robust_auc"] for r in mine]))))
    frac = float(np.mean([r["fraction_improved"] for r in trials]))
    impr = float(np.mean([r["improvement_pct"] for r in trials]))
    res = RunResult(cfg.kind, ["row", "eta", "sigma2", "trial", "seed", "mse_base", "mse_pro",
                               "improvement_pct", "fraction_improved", "robust_auc"], rows, seeds=seeds)
    res.summary.append(f"generative study: {len(cells)} cells x {cfg.trials} paired trials")
    res.summary.append("eta    sigma2  frac    impr%   robust_auc")
    for r in rows:
        if r["row"] == "cell":
            res.summary.append(f"{r['eta']:<6g} {r['sigma2']:<7g} {r['fraction_improved']:.3f}  "
                               f"{r['improvement_pct']:+.2f}  {r['robust_auc']:+.4f}")
    res.summary.append(f"overall: fraction improved {frac:.4f}, mean improvement {impr:+.3f}%")
    res.checks.append(Check("fraction of trials improved >= 0.75", frac >= 0.75, True, f"{frac:.4f}"))
    res.checks.append(Check("mean improvement > 0", impr > 0, True, f"{impr:+.3f}%"))
    return res


# -- robustness ----------------------------------------------------------------------------

def run_robustness(cfg: ExperimentConfig, jobs: int = 1) -> RunResult:
    seeds = trial_seeds(cfg.seed, cfg.trials)
    sigmas = [float(s) for s in cfg.noise.grid]

    def trial(args):
        t, seed = args
        sp = _splits(cfg, seed)
        in_dims = [sp.train.X1.shape[1], sp.train.X2.shape[1]]
        curves, clean = {}, {}
        for v in cfg.variants:
            m = _fit(build_variant(v, cfg, in_dims, _out_dim(cfg), seed), sp, cfg, seed)
            clean[v] = evaluate(m, sp.test, metric_for(sp.test))
            curves[v] = robustness_curve(m, sp.test, cfg.noise, Rng(seed).split(5))
        taus = [robust_auc(curves[v], curves[cfg.baseline]) for v in cfg.variants]
        with_warn = minmax_scale(taus)
        return [dict(trial=t, seed=seed, model=v, metric=curves[v].metric, clean=clean[v],
                     **{f"sigma_{s:g}": val for s, val in zip(sigmas, curves[v].values)},
                     tau=tau, tau_scaled=sc)
                for v, tau, sc in zip(cfg.variants, taus, with_warn)]

    rows = [r for tr in run_parallel(trial, list(enumerate(seeds)), jobs) for r in tr]
    cols = ["trial", "seed", "model", "metric", "clean"] + [f"sigma_{s:g}" for s in sigmas] + ["tau", "tau_scaled"]
    res = RunResult(cfg.kind, cols, rows, seeds=seeds)
    res.summary.append(f"robustness against baseline {cfg.baseline!r}, noise on modalities "
                       f"{list(cfg.noise.modalities)}, {cfg.trials} trials")
    for v in cfg.variants:
        mine = [r for r in rows if r["model"] == v]
        res.summary.append(f"{v:<10s} clean {np.mean([r['clean'] for r in mine]):.4f}  "
                           f"tau {np.mean([r['tau'] for r in mine]):+.4f}  "
                           f"scaled {np.mean([r['tau_scaled'] for r in mine]):.3f}")
    return res


# -- probes --------------------------------------------------------------------------------

def run_probe(cfg: ExperimentConfig, jobs: int = 1) -> RunResult:
    seeds = trial_seeds(cfg.seed, cfg.trials)
    R = cfg.model.unroll
    steps = list(range(1, R + 1))

    def trial(args):
        t, seed = args
        sp = _splits(cfg, seed)
        in_dims = [sp.train.X1.shape[1], sp.train.X2.shape[1]]
        m = _fit(build_variant("pro", cfg, in_dims, LATTICE_CLASSES, seed, unroll=R), sp, cfg, seed)
        n = min(cfg.probe_samples, len(sp.train))
        pr = probe(m, sp.train.subset(slice(0, n)), sp.test, steps, LATTICE_CLASSES)
        out = []
        for mod in range(2):
            first = pr.accuracy[(mod, 1)]
            for s in steps:
                a = pr.accuracy[(mod, s)]
                out.append(dict(trial=t, seed=seed, modality=mod + 1, step=s, accuracy=a,
                                normalized=a / first if first > 0 else float("nan")))
        return out

    rows = [r for tr in run_parallel(trial, list(enumerate(seeds)), jobs) for r in tr]
    res = RunResult(cfg.kind, ["trial", "seed", "modality", "step", "accuracy", "normalized"], rows, seeds=seeds)
    res.summary.append(f"linear probes on encoder outputs, pro-fusion R={R}, {cfg.trials} trials")
    means = {}
    for mod in (1, 2):
        for s in steps:
            vals = [r["accuracy"] for r in rows if r["modality"] == mod and r["step"] == s]
            means[(mod, s)] = float(np.mean(vals))
        res.summary.append(f"modality {mod}: " + "  ".join(
            f"step {s} {means[(mod, s)]:.4f} ({means[(mod, s)] / means[(mod, 1)]:.3f}x)" for s in steps))
    for mod in (1, 2):
        a1, a2 = means[(mod, 1)], means[(mod, 2)]
        res.checks.append(Check(f"modality {mod} probe accuracy step 2 >= step 1", a2 >= a1, mod == 1,
                                f"{a2:.4f} vs {a1:.4f}"))
    return res


# -- ablations -------------------------------------------------------------------------------

def run_ablation_context_dim(cfg: ExperimentConfig, jobs: int = 1) -> RunResult:
    seeds = trial_seeds(cfg.seed, cfg.trials)
    ctx = list(cfg.context_dims)

    def trial(args):
        t, seed = args
        sp = _splits(cfg, seed)
        in_dims = [sp.train.X1.shape[1], sp.train.X2.shape[1]]
        base = evaluate(_fit(build_variant("late", cfg, in_dims, LATTICE_CLASSES, seed), sp, cfg, seed),
                        sp.test, "accuracy")
        out = []
        for c in ctx:
            m = _fit(build_variant("pro", cfg, in_dims, LATTICE_CLASSES, seed, context_dim=c), sp, cfg, seed)
            a = evaluate(m, sp.test, "accuracy")
            out.append(dict(context_dim=c, trial=t, seed=seed, accuracy=a, base_accuracy=base,
                            normalized=a / base))
        return out

    per = run_parallel(trial, list(enumerate(seeds)), jobs)
    rows = sorted((r for tr in per for r in tr), key=lambda r: (ctx.index(r["context_dim"]), r["trial"]))
    res = RunResult(cfg.kind, ["context_dim", "trial", "seed", "accuracy", "base_accuracy", "normalized"],
                    rows, seeds=seeds)
    res.summary.append(f"context-dimension sweep, accuracy relative to the base model, {cfg.trials} trials")
    for c in ctx:
        mine = [r["normalized"] for r in rows if r["context_dim"] == c]
        m, s = _mean_sd(mine)
        res.summary.append(f"context dim {c:<4d} normalized accuracy {m:.4f} +- {s:.4f}")
    return res


def run_ablation_iterative(cfg: ExperimentConfig, jobs: int = 1) -> RunResult:
    seeds = trial_seeds(cfg.seed, cfg.trials)
    names = ("late", "iterative", "pro")

    def trial(args):
        t, seed = args
        sp = _splits(cfg, seed)
        in_dims = [sp.train.X1.shape[1], sp.train.X2.shape[1]]
        row = dict(trial=t, seed=seed)
        for v in names:
            m = _fit(build_variant(v, cfg, in_dims, LATTICE_CLASSES, seed), sp, cfg, seed)
            row[f"acc_{v}"] = evaluate(m, sp.test, "accuracy")
        return row

    rows = run_parallel(trial, list(enumerate(seeds)), jobs)
    res = RunResult(cfg.kind, ["trial", "seed"] + [f"acc_{v}" for v in names], rows, seeds=seeds)
    means = {v: _mean_sd([r[f"acc_{v}"] for r in rows]) for v in names}
    res.summary.append(f"base vs unimodal-iterative vs pro-fusion at R={cfg.model.unroll}, {cfg.trials} paired seeds")
    for v in names:
        res.summary.append(f"{v:<10s} {means[v][0]:.4f} +- {means[v][1]:.4f}")
    p, i, b = means["pro"][0], means["iterative"][0], means["late"][0]
    res.checks.append(Check("pro >= base in mean", p >= b, True, f"{p:.4f} vs {b:.4f}"))
    res.checks.append(Check("pro >= iterative in mean", p >= i, False, f"{p:.4f} vs {i:.4f}"))
    res.checks.append(Check("iterative >= base in mean", i >= b, False, f"{i:.4f} vs {b:.4f}"))
    return res


# -- expressiveness and timing ------------------------------------------------------------------

def run_expressiveness(cfg: ExperimentConfig, jobs: int = 1) -> RunResult:
    checks = expressiveness.run_checks(seed=cfg.seed)
    rows = [dict(check=c.name, passed=c.passed, detail=c.detail) for c in checks]
    res = RunResult(cfg.kind, ["check", "passed", "detail"], rows, seeds=[cfg.seed])
    res.summary.extend(expressiveness.report(checks).splitlines())
    res.checks.extend(Check(c.name, c.passed, True, c.detail) for c in checks)
    return res


def time_unroll(model: Model, xs, y, unroll: int, repeats: int, loss: str) -> float:
    """Median wall time (ms) of one forward+backward pass at ``unroll`` steps."""
    times = []
    for _ in range(repeats + 1):
        t0 = time.perf_counter()
        for p in model.parameters():
            p.grad = None
        ad.backward(ad.loss(loss, model(xs, unroll=unroll), y))
        times.append(time.perf_counter() - t0)
    return 1000.0 * float(np.median(times[1:]))  # first call warms caches


def run_timing(cfg: ExperimentConfig, jobs: int = 1) -> RunResult:
    steps = sorted(cfg.timing_steps)
    task = cfg.task
    lattice = cfg.task_name == "lattice"
    in_dims = [task.D, task.p] if lattice else [task.D1, task.D2]
    rng = Rng(cfg.seed).split(9)
    n = cfg.timing_batch
    xs = [rng.split(i).normal((n, d)) for i, d in enumerate(in_dims)]
    if lattice:
        y, loss = rng.split(5).integers(0, LATTICE_CLASSES, size=n), "softmax_cross_entropy"
    else:
        y, loss = rng.split(5).normal((n, task.K_y)), "mse"
    cfg_c = replace(cfg, model=replace(cfg.model, unroll=max(steps)))
    model = build_variant("pro", cfg_c, in_dims, _out_dim(cfg), cfg.seed)
    ms = {R: time_unroll(model, xs, y, R, cfg.timing_repeats, loss) for R in steps}
    ref_R = steps[0]
    rows = [dict(unroll=R, median_ms=ms[R], ratio=ms[R] / ms[ref_R], proportional=R / ref_R) for R in steps]
    res = RunResult(cfg.kind, ["unroll", "median_ms", "ratio", "proportional"], rows,
                    seeds=[cfg.seed], deterministic=False)
    res.summary.append(f"forward+backward time, batch {n}, hidden {cfg.model.hidden}, "
                       f"median of {cfg.timing_repeats} repeats")
    for r in rows:
        lo, hi = 0.7 * r["proportional"], 1.3 * r["proportional"]
        within = lo <= r["ratio"] <= hi
        res.summary.append(f"R={r['unroll']}: {r['median_ms']:.3f} ms, ratio {r['ratio']:.3f} "
                           f"(proportional {r['proportional']:g}){'' if within else '  <-- outside +-30%'}")
        if r["unroll"] != ref_R:
            res.checks.append(Check(f"R={r['unroll']} time within +-30% of proportional", within,
                                    r["unroll"] == steps[-1], f"ratio {r['ratio']:.3f} in [{lo:.2f}, {hi:.2f}]"))
    return res


RUNNERS: dict[str, Callable[[ExperimentConfig, int], RunResult]] = {
    "dim-sweep": run_dim_sweep,
    "generative-grid": run_generative_grid,
    "robustness": run_robustness,
    "probe": run_probe,
    "ablation-context-dim": run_ablation_context_dim,
    "ablation-iterative": run_ablation_iterative,
    "expressiveness": run_expressiveness,
    "timing": run_timing,
}


def run(cfg: ExperimentConfig, jobs: int = 1) -> RunResult:
    return RUNNERS[cfg.kind](cfg, jobs)
