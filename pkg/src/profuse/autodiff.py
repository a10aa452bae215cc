"""Small reverse-mode differentiation engine on top of numpy.

Tensors are dense float64 arrays of rank at most 2. Every op records its
inputs and a backward closure; :func:`backward` orders the graph
topologically into a :class:`Tape` and replays it in reverse.

Gradients accumulate across backward calls until :meth:`Tensor.zero_grad`
(or :func:`zero_grad` on a parameter list) is called.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an op is called outside its preconditions."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 2:
            raise DimensionError(f"tensors are rank <= 2, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple[Tensor, ...], op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = parents if out.requires_grad else ()
        out._backward = None
        out.op = op
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            g = np.asarray(g, dtype=np.float64)
            self.grad = g if g.shape == self.data.shape else g.reshape(self.data.shape)
        else:
            self.grad = self.grad + g

    def backward(self) -> "Tape":
        return backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape(list):
    """Topologically ordered nodes reachable from a root (inputs first)."""

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order = cls()
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return order


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every ``requires_grad`` ancestor of a scalar loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires grad")
    tape = Tape.record(loss)
    # Propagate only this pass's contribution so a second backward() over the
    # same graph adds exactly one more gradient to every node.
    upstream: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node._accumulate(g)
        if node._backward is None:
            continue
        for parent, pg in node._backward(g):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = upstream.get(key)
            upstream[key] = pg if prev is None else prev + pg
    return tape


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- broadcasting -----------------------------------------------------------

def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    # row-vector bias: (m, n) with (n,) or (1, n)
    big, small = (a, b) if a.ndim >= b.ndim and a.size >= b.size else (b, a)
    if big.ndim == 2 and small.shape in ((big.shape[1],), (1, big.shape[1])):
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    out = Tensor._from_op(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        out._backward = lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    out = Tensor._from_op(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        out._backward = lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    out = Tensor._from_op(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        out._backward = lambda g: (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )
    return out


def _unary(x: Tensor, value: np.ndarray, deriv: Callable[[], np.ndarray], op: str) -> Tensor:
    out = Tensor._from_op(value, (x,), op)
    if out.requires_grad:
        out._backward = lambda g: ((x, g * deriv()),)
    return out


def leaky_relu(x, alpha: float = 0.01) -> Tensor:
    x = as_tensor(x)
    if 0.0 <= alpha <= 1.0:
        y = np.maximum(x.data, alpha * x.data)
    else:
        y = np.where(x.data > 0, x.data, alpha * x.data)
    return _unary(x, y, lambda: (x.data > 0) * (1.0 - alpha) + alpha, "leaky_relu")


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.maximum(x.data, 0.0), lambda: (x.data > 0).astype(np.float64), "relu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _unary(x, y, lambda: 1.0 - y * y, "tanh")


def sin(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.sin(x.data), lambda: np.cos(x.data), "sin")


def identity(x) -> Tensor:
    return as_tensor(x)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "leaky_relu": leaky_relu,
    "relu": relu,
    "tanh": tanh,
    "sin": sin,
    "linear": identity,
}


def elementwise(op: str, *inputs, alpha: float = 0.01) -> Tensor:
    """Dispatch by name: add, sub, mul, leaky_relu, sin, tanh, relu."""
    binary = {"add": add, "sub": sub, "mul": mul}
    if op in binary:
        if len(inputs) != 2:
            raise ContractError(f"{op} takes two inputs, got {len(inputs)}")
        return binary[op](*inputs)
    if len(inputs) != 1:
        raise ContractError(f"{op} takes one input, got {len(inputs)}")
    if op == "leaky_relu":
        return leaky_relu(inputs[0], alpha)
    if op in ACTIVATIONS:
        return ACTIVATIONS[op](inputs[0])
    raise ValueError(f"unknown elementwise op {op!r}")


# -- linear algebra / structure ----------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = Tensor._from_op(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        out._backward = lambda g: (
            (a, g @ b.data.T if a.requires_grad else None),
            (b, a.data.T @ g if b.requires_grad else None),
        )
    return out


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` as one node (bias is a row vector)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: cannot multiply {x.shape} by {weight.shape}")
    y = x.data @ weight.data
    if bias is None:
        out = Tensor._from_op(y, (x, weight), "linear")
    else:
        bias = as_tensor(bias)
        if bias.shape not in ((weight.shape[1],), (1, weight.shape[1])):
            raise DimensionError(f"linear: bias {bias.shape} does not match width {weight.shape[1]}")
        out = Tensor._from_op(y + bias.data, (x, weight, bias), "linear")
    if out.requires_grad:

        def _back(g):
            gx = g @ weight.data.T if x.requires_grad else None
            gw = x.data.T @ g if weight.requires_grad else None
            if bias is None:
                return ((x, gx), (weight, gw))
            return ((x, gx), (weight, gw), (bias, g.sum(axis=0).reshape(bias.shape)))

        out._backward = _back
    return out


def transpose(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor._from_op(x.data.T, (x,), "transpose")
    if out.requires_grad:
        out._backward = lambda g: ((x, g.T),)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat needs at least one tensor")
    ndim = ts[0].data.ndim
    axis = axis % max(ndim, 1)
    for t in ts[1:]:
        other = [n for i, n in enumerate(t.shape) if i != axis]
        ref = [n for i, n in enumerate(ts[0].shape) if i != axis]
        if t.data.ndim != ndim or other != ref:
            raise DimensionError(
                f"concat along axis {axis}: shapes {[t.shape for t in ts]} disagree off-axis"
            )
    out = Tensor._from_op(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), "concat")
    if out.requires_grad:
        offsets = np.cumsum([t.shape[axis] for t in ts])[:-1]

        def _back(g):
            return tuple(zip(ts, np.split(g, offsets, axis=axis)))

        out._backward = _back
    return out


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Inverse of :func:`concat`: cut ``x`` into consecutive pieces."""
    x = as_tensor(x)
    axis = axis % x.data.ndim
    if int(np.sum(sizes)) != x.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not sum to {x.shape[axis]}")
    pieces = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * x.data.ndim
        idx[axis] = slice(start, start + n)
        pieces.append(_slice(x, tuple(idx)))
        start += n
    return pieces


def _slice(x: Tensor, idx) -> Tensor:
    out = Tensor._from_op(x.data[idx], (x,), "slice")
    if out.requires_grad:

        def _back(g):
            full = np.zeros_like(x.data)
            full[idx] = g
            return ((x, full),)

        out._backward = _back
    return out


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = Tensor._from_op(np.asarray(x.data.sum(axis=axis)), (x,), "sum")
    if out.requires_grad:
        if axis is None:
            out._backward = lambda g: ((x, np.broadcast_to(g, x.shape).copy()),)
        else:
            out._backward = lambda g: ((x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy()),)
    return out


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    out = Tensor._from_op(np.asarray(x.data.mean()), (x,), "mean")
    if out.requires_grad:
        out._backward = lambda g: ((x, np.full(x.shape, float(g) / n)),)
    return out


# -- losses -----------------------------------------------------------------

def mse(pred, target) -> Tensor:
    """Mean of squared differences over every entry."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    out = Tensor._from_op(np.asarray(np.mean(diff * diff)), (pred, target), "mse")
    if out.requires_grad:
        scale = 2.0 / diff.size
        out._backward = lambda g: ((pred, g * scale * diff), (target, -g * scale * diff))
    return out


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Batch-mean of ``-log softmax(logits)[label]``; ``labels`` are class indices."""
    logits = as_tensor(logits)
    z = logits.data if logits.data.ndim == 2 else logits.data.reshape(1, -1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = z.shape
    if y.shape[0] != n:
        raise DimensionError(f"softmax_cross_entropy: {n} rows of logits but {y.shape[0]} labels")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"class index out of range [0, {k}): {y.min()}..{y.max()}")
    logp = log_softmax(z)
    rows = np.arange(n)
    out = Tensor._from_op(np.asarray(-logp[rows, y].mean()), (logits,), "softmax_cross_entropy")
    if out.requires_grad:

        def _back(g):
            d = np.exp(logp)
            d[rows, y] -= 1.0
            return ((logits, (g / n) * d.reshape(logits.shape)),)

        out._backward = _back
    return out


def loss(kind: str, pred, target) -> Tensor:
    if kind == "mse":
        return mse(pred, target)
    if kind == "softmax_cross_entropy":
        return softmax_cross_entropy(pred, target)
    raise ValueError(f"unknown loss {kind!r}")


# -- optimizers ---------------------------------------------------------------

class Optimizer:
    """SGD with momentum or Adam, stepping a fixed list of parameters.

    Moments live in one flat buffer; ``moments(i)`` gives parameter ``i``'s
    buffers reshaped like the parameter.
    """

    def __init__(self, params: Sequence[Tensor], kind: str = "adam", lr: float = 1e-3,
                 momentum: float = 0.0, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"optimizer kind must be 'sgd' or 'adam', got {kind!r}")
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.kind = kind
        self.lr = lr
        self.momentum = momentum
        self.betas = betas
        self.eps = eps
        self.params = list(params)
        self.steps = 0
        sizes = [p.data.size for p in self.params]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        n = int(self._offsets[-1])
        self.m = np.zeros(n)
        self.v = np.zeros(n) if kind == "adam" else None

    def moments(self, i: int) -> tuple[np.ndarray, np.ndarray | None]:
        a, b = self._offsets[i], self._offsets[i + 1]
        shape = self.params[i].shape
        v = None if self.v is None else self.v[a:b].reshape(shape)
        return self.m[a:b].reshape(shape), v

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"parameter {p.name or i} has no gradient; call backward() first")
        self.steps += 1
        g = np.concatenate([p.grad.ravel() for p in self.params])
        if self.kind == "sgd":
            self.m *= self.momentum
            self.m += g
            update = self.lr * self.m
        else:
            b1, b2 = self.betas
            self.m *= b1
            self.m += (1.0 - b1) * g
            self.v *= b2
            self.v += (1.0 - b2) * (g * g)
            c1 = 1.0 - b1 ** self.steps
            c2 = 1.0 - b2 ** self.steps
            update = (self.lr / c1) * self.m / (np.sqrt(self.v / c2) + self.eps)
        off = self._offsets
        for i, p in enumerate(self.params):
            p.data -= update[off[i]:off[i + 1]].reshape(p.data.shape)


# -- random numbers -------------------------------------------------------------

class Rng:
    """Seeded PCG64 stream (numpy ``Generator``) with deterministic splitting.

    ``split(k)`` derives a child stream from ``SeedSequence([seed, *path, k])``
    so children never share state with each other or with the parent.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = _path
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *_path])))
        self.splits = 0

    def split(self, k: int | None = None) -> "Rng":
        if k is None:
            k = self.splits
            self.splits += 1
        return Rng(self.seed, self.path + (len(self.path) + 1, int(k)))

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.gen.uniform(low, high, size)

    def normal(self, size=None) -> np.ndarray:
        return self.gen.standard_normal(size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)


def numerical_grad(f: Callable[[], float], x: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. the entries of ``x``."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


__all__ = [
    "ACTIVATIONS", "ContractError", "DimensionError", "Optimizer", "Rng", "Tape", "Tensor",
    "add", "as_tensor", "grad_enabled", "no_grad", "backward", "concat", "elementwise", "identity", "leaky_relu", "linear", "loss",
    "matmul", "mean", "mse", "mul", "numerical_grad", "rel_error", "relu", "sin",
    "softmax_cross_entropy", "split", "sub", "sum", "tanh", "transpose", "zero_grad",
]
