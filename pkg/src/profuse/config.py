"""Experiment configuration: INI files with one section per concern.

Only keys that differ from the per-experiment defaults need to appear.
Unknown sections or keys are rejected so typos fail loudly. Example::

    [experiment]
    kind = dim-sweep
    trials = 10
    dims = 2, 4, 8

    [train]
    epochs = 50
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np

from .tasks import GenerativeTaskConfig, LatticeTaskConfig, NoiseSpec
from .training import TrainConfig

KINDS = (
    "dim-sweep", "generative-grid", "robustness", "probe",
    "ablation-context-dim", "ablation-iterative", "expressiveness", "timing",
)
VARIANTS = ("early", "late", "pro", "iterative")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass(frozen=True)
class ModelOptions:
    hidden: int = 16
    depth: int = 2
    predictor_widths: tuple[int, ...] | None = None  # None: one hidden layer of width ``hidden``
    activation: str = "leaky_relu"
    unroll: int = 2
    init_scale: float = 0.03
    injection: str = "additive"
    context_dim: int | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    task: LatticeTaskConfig | GenerativeTaskConfig
    variants: tuple[str, ...]
    train: TrainConfig
    noise: NoiseSpec
    model: ModelOptions
    trials: int = 10
    seed: int = 0
    output_dir: str | None = None
    # sweep grids; each experiment reads the ones it needs
    dims: tuple[int, ...] = (2, 4, 8, 16, 32, 64)
    etas: tuple[float, ...] = (0.0, 0.5, 1.0, 1.5, 2.0)
    sigma2s: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    context_dims: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    timing_steps: tuple[int, ...] = (1, 2, 3, 4)
    timing_batch: int = 256
    timing_repeats: int = 30
    probe_samples: int = 4000
    baseline: str = "late"

    def __post_init__(self):
        validate(self)

    @property
    def task_name(self) -> str:
        return "lattice" if isinstance(self.task, LatticeTaskConfig) else "generative"


def validate(cfg: ExperimentConfig) -> None:
    if cfg.kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {cfg.kind!r}; choose from {', '.join(KINDS)}")
    if cfg.trials < 1:
        raise ConfigError(f"trial count must be >= 1, got {cfg.trials}")
    bad = [v for v in cfg.variants if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown model variants {bad}; choose from {', '.join(VARIANTS)}")
    if len(set(cfg.variants)) != len(cfg.variants):
        raise ConfigError(f"duplicate model variants in {list(cfg.variants)}")
    m = cfg.model
    if m.hidden < 1 or m.depth < 1 or m.unroll < 1:
        raise ConfigError("model hidden, depth and unroll must all be >= 1")
    if m.injection not in ("additive", "concat"):
        raise ConfigError(f"injection must be additive or concat, got {m.injection!r}")
    for name in ("dims", "context_dims", "timing_steps"):
        vals = getattr(cfg, name)
        if not vals or min(vals) < 1:
            raise ConfigError(f"{name} must be a non-empty list of positive integers")
    if not cfg.etas or not cfg.sigma2s or min(cfg.sigma2s) < 0:
        raise ConfigError("etas and sigma2s must be non-empty, with sigma2 >= 0")
    if cfg.timing_batch < 1 or cfg.timing_repeats < 1 or cfg.probe_samples < 2:
        raise ConfigError("timing_batch, timing_repeats must be >= 1 and probe_samples >= 2")
    if cfg.kind in ("dim-sweep", "probe", "ablation-context-dim", "ablation-iterative") \
            and cfg.task_name != "lattice":
        raise ConfigError(f"{cfg.kind} needs the lattice task")
    if cfg.kind == "generative-grid" and cfg.task_name != "generative":
        raise ConfigError("generative-grid needs the generative task")
    if cfg.kind == "robustness":
        if len(cfg.variants) < 2:
            raise ConfigError("robustness needs at least two variants (min-max scaling is undefined otherwise)")
        if cfg.baseline not in cfg.variants:
            raise ConfigError(f"baseline {cfg.baseline!r} is not among the variants {list(cfg.variants)}")
    if cfg.kind == "probe" and m.unroll < 2:
        raise ConfigError("probe needs a pro-fusion model with unroll >= 2")


# -- defaults -----------------------------------------------------------------------

_LATTICE = LatticeTaskConfig(D=4, n_train=20000)
_LATTICE_TRAIN = TrainConfig(lr=5e-3, epochs=100, batch_size=512)
_GENERATIVE = GenerativeTaskConfig(d_z=4, n_train=6000)
_GENERATIVE_TRAIN = TrainConfig(lr=3e-3, epochs=20, batch_size=128)
# two encoder layers plus the linear predictor: three layers of width 32
_GENERATIVE_MODEL = ModelOptions(hidden=32, depth=2, predictor_widths=(), init_scale=0.01)

DEFAULTS: dict[str, dict[str, Any]] = {
    "dim-sweep": dict(task=_LATTICE, variants=("early", "late", "pro"), train=_LATTICE_TRAIN, trials=10),
    "generative-grid": dict(task=_GENERATIVE, variants=("late", "pro"), train=_GENERATIVE_TRAIN,
                            model=_GENERATIVE_MODEL, trials=30),
    "robustness": dict(task=_LATTICE, variants=("early", "late", "pro", "iterative"),
                       train=_LATTICE_TRAIN, trials=3),
    "probe": dict(task=_LATTICE, variants=("pro",), train=_LATTICE_TRAIN, trials=10,
                  model=ModelOptions(unroll=3)),
    "ablation-context-dim": dict(task=_LATTICE, variants=("late", "pro"), train=_LATTICE_TRAIN, trials=5),
    "ablation-iterative": dict(task=_LATTICE, variants=("late", "iterative", "pro"),
                               train=_LATTICE_TRAIN, trials=15),
    "expressiveness": dict(task=_LATTICE, variants=(), train=_LATTICE_TRAIN, trials=1),
    "timing": dict(task=_GENERATIVE, variants=("pro",), train=_GENERATIVE_TRAIN, trials=1,
                   model=_GENERATIVE_MODEL),
}


def default_config(kind: str) -> ExperimentConfig:
    if kind not in DEFAULTS:
        raise ConfigError(f"unknown experiment kind {kind!r}; choose from {', '.join(KINDS)}")
    base = dict(noise=NoiseSpec(), model=ModelOptions())
    base.update(DEFAULTS[kind])
    return ExperimentConfig(kind=kind, **base)


# -- INI parsing -----------------------------------------------------------------------

def _split(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _coerce(raw: str, tp, key: str):
    """Convert an INI string according to a dataclass field annotation."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if raw.strip().lower() in ("none", ""):
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(raw, inner[0], key)
    if origin is tuple:
        return tuple(_coerce(t, args[0], key) for t in _split(raw))
    try:
        if tp is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "yes", "1")
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {tp.__name__}") from None
    return raw.strip()


def _overrides(cls, section: configparser.SectionProxy, name: str) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    out = {}
    for key, raw in section.items():
        if key not in hints:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        out[key] = _coerce(raw, hints[key], f"[{name}] {key}")
    return out


def _rebuild(obj, changes: dict, where: str):
    try:
        return replace(obj, **changes)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def parse_config(text: str, kind: str | None = None) -> ExperimentConfig:
    """Build a config from INI text on top of the defaults for its kind.

    ``kind`` (the CLI subcommand) wins over ``[experiment] kind`` only when
    the file leaves it unset; a conflicting value is an error.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    known = {"experiment", "task", "train", "noise", "model"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    exp = dict(parser["experiment"]) if parser.has_section("experiment") else {}
    file_kind = exp.pop("kind", None)
    if kind and file_kind and file_kind != kind:
        raise ConfigError(f"config is for {file_kind!r} but the command is {kind!r}")
    kind = kind or file_kind
    if kind is None:
        raise ConfigError("experiment kind missing: set [experiment] kind")
    cfg = default_config(kind)

    task_name = exp.pop("task", None)
    task = cfg.task
    if task_name is not None:
        if task_name == "lattice" and not isinstance(task, LatticeTaskConfig):
            task = LatticeTaskConfig()
        elif task_name == "generative" and not isinstance(task, GenerativeTaskConfig):
            task = GenerativeTaskConfig()
        elif task_name not in ("lattice", "generative"):
            raise ConfigError(f"unknown task {task_name!r}; choose lattice or generative")
    if parser.has_section("task"):
        task = _rebuild(task, _overrides(type(task), parser["task"], "task"), "task")
    changes: dict[str, Any] = {"task": task}
    for name, cls in (("train", TrainConfig), ("noise", NoiseSpec), ("model", ModelOptions)):
        if parser.has_section(name):
            changes[name] = _rebuild(getattr(cfg, name), _overrides(cls, parser[name], name), name)
    hints = typing.get_type_hints(ExperimentConfig)
    for key, raw in exp.items():
        if key not in hints or key in ("kind", "task", "train", "noise", "model"):
            raise ConfigError(f"[experiment] unknown key {key!r}")
        changes[key] = _coerce(raw, hints[key], f"[experiment] {key}")
    try:
        return replace(cfg, **changes)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path, kind: str | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, kind)


def config_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    """Plain nested dict of every semantically meaningful field."""
    d = dataclasses.asdict(cfg)
    d.pop("output_dir", None)
    d["task_name"] = cfg.task_name
    return d


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return x


def config_hash(cfg: ExperimentConfig | dict) -> str:
    """SHA-256 of the canonical (key-sorted) JSON form; the output directory is ignored."""
    d = config_dict(cfg) if isinstance(cfg, ExperimentConfig) else cfg
    blob = json.dumps(_jsonable(d), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def trial_seeds(seed: int, n: int) -> list[int]:
    """Independent 32-bit seeds for trials ``0..n-1`` derived from one run seed."""
    return [int(np.random.SeedSequence([seed, t]).generate_state(1)[0]) for t in range(n)]
