"""Multimodal fusion networks: late-fusion base, early fusion, Pro-Fusion and
the unimodal-iterative ablation.

A base model is ``P(F(G_1(x_1), ..., G_K(x_K)))``: per-modality encoders
``G_i``, a fusion layer ``F`` (concat or elementwise sum) and a predictor
``P``. :func:`augment` wraps a base model with backprojection maps ``W_i``
that feed the fused vector of the previous unroll step back into the
encoders; the same weights are reused at every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor


class SpecError(ValueError):
    """Inconsistent architecture description."""


# -- specs ----------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int
    widths: tuple[int, ...]
    activation: str = "leaky_relu"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        if self.input_dim < 1 or not self.widths or min(self.widths) < 1:
            raise SpecError(f"encoder needs input_dim >= 1 and >= 1 layer of width >= 1: {self}")
        if self.activation not in ad.ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")

    @property
    def output_dim(self) -> int:
        return self.widths[-1]


@dataclass(frozen=True)
class FusionSpec:
    kind: str = "concat"

    def __post_init__(self):
        if self.kind not in ("concat", "sum"):
            raise SpecError(f"fusion kind must be 'concat' or 'sum', got {self.kind!r}")

    def output_dim(self, dims: Sequence[int]) -> int:
        if self.kind == "concat":
            return int(np.sum(dims))
        if len(set(dims)) != 1:
            raise SpecError(f"sum fusion needs equal encoder output dims, got {list(dims)}")
        return dims[0]


@dataclass(frozen=True)
class PredictorSpec:
    output_dim: int
    widths: tuple[int, ...] = ()
    activation: str = "leaky_relu"
    zero_init_last: bool = False

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        if self.output_dim < 1:
            raise SpecError("predictor output dimension must be >= 1")


@dataclass(frozen=True)
class ProFusionConfig:
    """Backprojection settings.

    ``context_dim=None`` means the context is the fused vector itself
    (``E`` is the identity). ``injection`` is ``"additive"``
    (``G_i(x_i + W_i c)``) or ``"concat"`` (``G_i([x_i, W_i c])``, where
    ``W_i`` maps to ``injection_width`` extra encoder inputs).
    """

    unroll: int = 2
    context_dim: int | None = None
    injection: str = "additive"
    injection_width: int | None = None
    bias: bool = False
    init_scale: float = 0.1

    def __post_init__(self):
        if self.unroll < 1:
            raise SpecError(f"unroll count must be >= 1, got {self.unroll}")
        if self.injection not in ("additive", "concat"):
            raise SpecError(f"injection must be 'additive' or 'concat', got {self.injection!r}")
        if self.context_dim is not None and self.context_dim < 1:
            raise SpecError("context_dim must be >= 1")


@dataclass(frozen=True)
class IterativeVariantConfig:
    unroll: int = 2
    init_scale: float = 0.1

    def __post_init__(self):
        if self.unroll < 1:
            raise SpecError(f"unroll count must be >= 1, got {self.unroll}")


# -- layers ---------------------------------------------------------------------

_GAIN = {"relu": np.sqrt(2.0), "leaky_relu": np.sqrt(2.0), "tanh": 1.0, "sin": 1.0, "linear": 1.0}


def init_weight(rng: Rng, fan_in: int, fan_out: int, activation: str = "linear",
                scale: float = 1.0) -> np.ndarray:
    """Uniform He/Glorot-style fan-in init: ``U(-b, b)``, ``b = gain*sqrt(3/fan_in)``."""
    bound = scale * _GAIN.get(activation, 1.0) * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: Rng, activation: str = "linear",
                 bias: bool = True, scale: float = 1.0, name: str = "linear"):
        self.weight = Tensor(init_weight(rng, fan_in, fan_out, activation, scale),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class MLP:
    """Stack of linear layers; the activation follows every layer unless
    ``final_activation`` is False."""

    def __init__(self, input_dim: int, widths: Sequence[int], rng: Rng, activation: str,
                 final_activation: bool = True, name: str = "mlp"):
        self.activation = activation
        self.final_activation = final_activation
        self.layers: list[Linear] = []
        dims = [input_dim, *widths]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            act = activation if (final_activation or i < len(widths) - 1) else "linear"
            self.layers.append(Linear(a, b, rng.split(i), act, name=f"{name}.{i}"))

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def __call__(self, x: Tensor, first_extra: Tensor | None = None) -> Tensor:
        act = ad.ACTIVATIONS[self.activation]
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i == 0 and first_extra is not None:
                x = ad.add(x, first_extra)
            if i < last or self.final_activation:
                x = act(x)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


def _as_batch(x) -> Tensor:
    t = ad.as_tensor(x)
    return t if t.data.ndim == 2 else Tensor(t.data.reshape(1, -1))


@dataclass
class ForwardTrace:
    """Per-step record of one forward pass (``t = 1..R``)."""

    prediction: Tensor
    fused: list[Tensor] = field(default_factory=list)
    contexts: list[Tensor] = field(default_factory=list)
    unimodal: list[list[Tensor]] = field(default_factory=list)


class Model:
    """Common surface: ``forward``, ``parameters``, ``state_dict``."""

    n_modalities: int
    input_dims: tuple[int, ...]
    unroll: int = 1

    def parameters(self) -> list[Tensor]:
        raise NotImplementedError

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(p.name or f"param{i}", p) for i, p in enumerate(self.parameters())]

    def trace(self, xs: Sequence, unroll: int | None = None) -> ForwardTrace:
        raise NotImplementedError

    def forward(self, xs: Sequence, unroll: int | None = None) -> Tensor:
        return self.trace(xs, unroll).prediction

    __call__ = forward

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def _check_inputs(self, xs: Sequence) -> list[Tensor]:
        if len(xs) != self.n_modalities:
            raise ValueError(f"expected {self.n_modalities} modality inputs, got {len(xs)}")
        out = [_as_batch(x) for x in xs]
        for i, (x, d) in enumerate(zip(out, self.input_dims)):
            if x.shape[1] != d:
                raise ValueError(f"modality {i} expects width {d}, got {x.shape[1]}")
        return out

    def unimodal_representations(self, xs: Sequence, step: int) -> list[np.ndarray]:
        """Encoder outputs at unroll step ``step`` (1-based), detached."""
        if not 1 <= step <= self.unroll:
            raise ValueError(f"step must be in [1, {self.unroll}], got {step}")
        tr = self.trace(xs, unroll=step)
        return [h.data.copy() for h in tr.unimodal[step - 1]]

    # -- persistence: npz of named arrays ------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = dict(self.named_parameters())
        if set(named) != set(state):
            raise SpecError(f"parameter names differ: {sorted(set(named) ^ set(state))}")
        for k, p in named.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise SpecError(f"{k}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()


def save_model(model: Model, path: str | Path) -> None:
    """Write parameters as an uncompressed ``.npz`` (one float64 array per name)."""
    with open(path, "wb") as fh:
        np.savez(fh, **model.state_dict())


def load_model(model: Model, path: str | Path) -> Model:
    with np.load(path) as z:
        model.load_state_dict({k: z[k] for k in z.files})
    return model


# -- base (late fusion) ---------------------------------------------------------

class BaseModel(Model):
    def __init__(self, encoders: Sequence[EncoderSpec], fusion: FusionSpec,
                 predictor: PredictorSpec, rng: Rng):
        if not encoders:
            raise SpecError("need at least one encoder")
        self.encoder_specs = tuple(encoders)
        self.fusion = fusion
        self.predictor_spec = predictor
        self.n_modalities = len(encoders)
        self.input_dims = tuple(e.input_dim for e in encoders)
        self.encoder_dims = tuple(e.output_dim for e in encoders)
        self.fused_dim = fusion.output_dim(self.encoder_dims)
        self.encoders = [
            MLP(e.input_dim, e.widths, rng.split(i), e.activation, name=f"enc{i}")
            for i, e in enumerate(encoders)
        ]
        self.predictor = MLP(self.fused_dim, (*predictor.widths, predictor.output_dim),
                             rng.split(100), predictor.activation, final_activation=False,
                             name="pred")
        if predictor.zero_init_last:
            last = self.predictor.layers[-1]
            last.weight.data[:] = 0.0
            if last.bias is not None:
                last.bias.data[:] = 0.0

    def fuse(self, feats: Sequence[Tensor]) -> Tensor:
        if self.fusion.kind == "concat":
            return feats[0] if len(feats) == 1 else ad.concat(feats, axis=1)
        out = feats[0]
        for f in feats[1:]:
            out = ad.add(out, f)
        return out

    def encode(self, xs: Sequence[Tensor]) -> list[Tensor]:
        return [enc(x) for enc, x in zip(self.encoders, xs)]

    def trace(self, xs: Sequence, unroll: int | None = None) -> ForwardTrace:
        xs = self._check_inputs(xs)
        feats = self.encode(xs)
        fused = self.fuse(feats)
        return ForwardTrace(self.predictor(fused), [fused], [fused], [feats])

    def parameters(self) -> list[Tensor]:
        ps = [p for enc in self.encoders for p in enc.parameters()]
        return ps + self.predictor.parameters()


def build_base(encoders: Sequence[EncoderSpec], fusion: FusionSpec, predictor: PredictorSpec,
               rng: Rng) -> BaseModel:
    return BaseModel(encoders, fusion, predictor, rng)


class EarlyFusionModel(Model):
    """Raw modality inputs are concatenated before a shared MLP."""

    def __init__(self, input_dims: Sequence[int], widths: Sequence[int], predictor: PredictorSpec,
                 rng: Rng, activation: str = "leaky_relu"):
        if not input_dims or min(input_dims) < 1:
            raise SpecError(f"input dims must be >= 1: {list(input_dims)}")
        if not widths or min(widths) < 1:
            raise SpecError("early fusion needs >= 1 hidden layer of width >= 1")
        self.n_modalities = len(input_dims)
        self.input_dims = tuple(input_dims)
        self.body = MLP(int(np.sum(input_dims)), widths, rng.split(0), activation, name="body")
        self.predictor = MLP(widths[-1], (*predictor.widths, predictor.output_dim), rng.split(100),
                             predictor.activation, final_activation=False, name="pred")
        if predictor.zero_init_last:
            self.predictor.layers[-1].weight.data[:] = 0.0

    def trace(self, xs: Sequence, unroll: int | None = None) -> ForwardTrace:
        xs = self._check_inputs(xs)
        joined = xs[0] if len(xs) == 1 else ad.concat(xs, axis=1)
        h = self.body(joined)
        return ForwardTrace(self.predictor(h), [h], [h], [[h]])

    def parameters(self) -> list[Tensor]:
        return self.body.parameters() + self.predictor.parameters()


def build_early(input_dims: Sequence[int], widths: Sequence[int], predictor: PredictorSpec,
                rng: Rng, activation: str = "leaky_relu") -> EarlyFusionModel:
    return EarlyFusionModel(input_dims, widths, predictor, rng, activation)


# -- Pro-Fusion -----------------------------------------------------------------

class ProFusionModel(Model):
    """Base model unrolled ``R`` times with the fused vector fed back.

    Step t: ``h_i = G_i(x_i (+|,) W_i c_{t-1})``, ``z_t = F(h_1..h_K)``,
    ``c_t = E(z_t)``; ``c_0 = 0``. The prediction is ``P(z_R)``, which is
    ``P(c_R)`` whenever ``E`` is the identity.
    """

    def __init__(self, base: BaseModel, cfg: ProFusionConfig, rng: Rng):
        self.base = base
        self.cfg = cfg
        self.n_modalities = base.n_modalities
        self.input_dims = base.input_dims
        self.unroll = cfg.unroll
        fused = base.fused_dim
        ctx = fused if cfg.context_dim is None else cfg.context_dim
        self.context_dim = ctx
        self.projector = None
        if ctx != fused:
            self.projector = Linear(fused, ctx, rng.split(0), bias=False, name="proj")
        self.backproj: list[Linear] = []
        self.inject: list[Linear] = []
        for i, spec in enumerate(base.encoder_specs):
            if cfg.injection == "additive":
                out = spec.input_dim
            else:
                out = cfg.injection_width or spec.input_dim
            self.backproj.append(Linear(ctx, out, rng.split(10 + i), bias=cfg.bias,
                                        scale=cfg.init_scale, name=f"back{i}"))
            if cfg.injection == "concat":
                # extra first-layer rows of the widened encoder
                enc_first = base.encoders[i].layers[0]
                self.inject.append(Linear(out, enc_first.weight.shape[1], rng.split(20 + i),
                                          spec.activation, bias=False, name=f"inject{i}"))

    def _context(self, fused: Tensor) -> Tensor:
        return fused if self.projector is None else self.projector(fused)

    def trace(self, xs: Sequence, unroll: int | None = None) -> ForwardTrace:
        xs = self._check_inputs(xs)
        steps = self.unroll if unroll is None else unroll
        if steps < 1:
            raise ValueError(f"unroll must be >= 1, got {steps}")
        base = self.base
        tr = ForwardTrace(prediction=None)  # type: ignore[arg-type]
        # c_0 = 0: a bias-free W_i maps it to 0, so the injection is skipped outright
        ctx: Tensor | None = None
        if self.cfg.bias:
            ctx = Tensor(np.zeros((xs[0].shape[0], self.context_dim)))
        for _ in range(steps):
            feats = []
            for i, (enc, x) in enumerate(zip(base.encoders, xs)):
                if ctx is None:
                    feats.append(enc(x))
                elif self.cfg.injection == "additive":
                    feats.append(enc(ad.add(x, self.backproj[i](ctx))))
                else:
                    feats.append(enc(x, first_extra=self.inject[i](self.backproj[i](ctx))))
            fused = base.fuse(feats)
            ctx = self._context(fused)
            tr.unimodal.append(feats)
            tr.fused.append(fused)
            tr.contexts.append(ctx)
        tr.prediction = base.predictor(tr.fused[-1])
        return tr

    def extra_parameters(self) -> list[Tensor]:
        ps = [p for w in self.backproj for p in w.parameters()]
        ps += [p for w in self.inject for p in w.parameters()]
        if self.projector is not None:
            ps += self.projector.parameters()
        return ps

    def parameters(self) -> list[Tensor]:
        return self.base.parameters() + self.extra_parameters()


def augment(base: BaseModel, cfg: ProFusionConfig, rng: Rng) -> ProFusionModel:
    if not isinstance(base, BaseModel):
        raise SpecError("Pro-Fusion wraps a late-fusion BaseModel")
    if cfg.injection == "additive" and cfg.injection_width is not None:
        for spec in base.encoder_specs:
            if cfg.injection_width != spec.input_dim:
                raise SpecError(
                    f"additive injection needs W_i output dim == input dim "
                    f"({cfg.injection_width} != {spec.input_dim})"
                )
    return ProFusionModel(base, cfg, rng)


class IterativeModel(Model):
    """Unimodal-iterative ablation: each encoder sees only its own previous output."""

    def __init__(self, base: BaseModel, cfg: IterativeVariantConfig, rng: Rng):
        self.base = base
        self.cfg = cfg
        self.n_modalities = base.n_modalities
        self.input_dims = base.input_dims
        self.unroll = cfg.unroll
        self.backproj = [
            Linear(spec.output_dim, spec.input_dim, rng.split(10 + i), bias=False,
                   scale=cfg.init_scale, name=f"self{i}")
            for i, spec in enumerate(base.encoder_specs)
        ]

    def trace(self, xs: Sequence, unroll: int | None = None) -> ForwardTrace:
        xs = self._check_inputs(xs)
        steps = self.unroll if unroll is None else unroll
        if steps < 1:
            raise ValueError(f"unroll must be >= 1, got {steps}")
        tr = ForwardTrace(prediction=None)  # type: ignore[arg-type]
        feats: list[Tensor] | None = None
        for _ in range(steps):
            if feats is None:
                feats = [enc(x) for enc, x in zip(self.base.encoders, xs)]
            else:
                feats = [enc(ad.add(x, w(h)))
                         for enc, x, w, h in zip(self.base.encoders, xs, self.backproj, feats)]
            fused = self.base.fuse(feats)
            tr.unimodal.append(feats)
            tr.fused.append(fused)
            tr.contexts.append(fused)
        tr.prediction = self.base.predictor(tr.fused[-1])
        return tr

    def parameters(self) -> list[Tensor]:
        return self.base.parameters() + [p for w in self.backproj for p in w.parameters()]


def build_iterative_variant(base: BaseModel, cfg: IterativeVariantConfig, rng: Rng) -> IterativeModel:
    if not isinstance(base, BaseModel):
        raise SpecError("the iterative variant wraps a late-fusion BaseModel")
    return IterativeModel(base, cfg, rng)
