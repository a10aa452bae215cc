"""What linear and multiplicative fusion architectures can represent.

Linear part: two modalities in ``R^D`` bottlenecked to ``d`` features each
and mapped to ``K`` outputs. The composite map is a ``K x 2D`` *effective
matrix*; late fusion forces its column blocks to factor through the
per-modality bottleneck, Pro-Fusion adds off-diagonal blocks
``G_ij W_jj`` and early fusion is unconstrained.

Multiplicative part: symbolic propagation of monomial sets through graphs
of linear-mix / pairwise-product / concat / backprojection layers.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Optimizer, Rng, Tensor


class SpecError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Linear fusion
# ---------------------------------------------------------------------------

@dataclass
class LinearFusionSpec:
    """Blocks of the two-layer linear fusion model.

    ``F`` is ``K x 2d`` (top ``K1`` rows are ``[F11 F12]``), ``W`` blocks are
    ``d x D`` and ``G`` blocks (backprojection, Pro-Fusion only) are ``d x d``.
    Missing ``W12/W21/G*`` mean zero.
    """

    F: np.ndarray
    W11: np.ndarray
    W22: np.ndarray
    W12: np.ndarray | None = None
    W21: np.ndarray | None = None
    G: np.ndarray | None = None
    K1: int | None = None

    def __post_init__(self):
        self.F = np.atleast_2d(np.asarray(self.F, dtype=np.float64))
        self.W11 = np.atleast_2d(np.asarray(self.W11, dtype=np.float64))
        self.W22 = np.atleast_2d(np.asarray(self.W22, dtype=np.float64))
        d, D = self.W11.shape
        if self.W22.shape != (d, D):
            raise SpecError(f"W11 {self.W11.shape} and W22 {self.W22.shape} must match")
        self.W12 = np.zeros((d, D)) if self.W12 is None else np.atleast_2d(np.asarray(self.W12, float))
        self.W21 = np.zeros((d, D)) if self.W21 is None else np.atleast_2d(np.asarray(self.W21, float))
        if self.W12.shape != (d, D) or self.W21.shape != (d, D):
            raise SpecError(f"cross blocks must be {(d, D)}, got {self.W12.shape}, {self.W21.shape}")
        if self.F.shape[1] != 2 * d:
            raise SpecError(f"F must have 2d = {2 * d} columns, got shape {self.F.shape}")
        self.G = np.zeros((2 * d, 2 * d)) if self.G is None else np.atleast_2d(np.asarray(self.G, float))
        if self.G.shape != (2 * d, 2 * d):
            raise SpecError(f"G must be {(2 * d, 2 * d)}, got {self.G.shape}")
        K = self.F.shape[0]
        if self.K1 is None:
            self.K1 = (K + 1) // 2
        if not 0 <= self.K1 <= K:
            raise SpecError(f"K1 must lie in [0, {K}]")

    @property
    def d(self) -> int:
        return self.W11.shape[0]

    @property
    def D(self) -> int:
        return self.W11.shape[1]

    @property
    def K(self) -> int:
        return self.F.shape[0]

    def F_blocks(self):
        d, k1 = self.d, self.K1
        F = self.F
        return F[:k1, :d], F[:k1, d:], F[k1:, :d], F[k1:, d:]

    def G_blocks(self):
        d = self.d
        G = self.G
        return G[:d, :d], G[:d, d:], G[d:, :d], G[d:, d:]

    @classmethod
    def random(cls, rng: Rng, D: int = 2, d: int = 1, K: int = 2, cross: bool = False,
               backproject: bool = False) -> "LinearFusionSpec":
        kw = {}
        if cross:
            kw["W12"] = rng.normal((d, D))
            kw["W21"] = rng.normal((d, D))
        if backproject:
            kw["G"] = rng.normal((2 * d, 2 * d))
        return cls(rng.normal((K, 2 * d)), rng.normal((d, D)), rng.normal((d, D)), **kw)


def _compose(spec: LinearFusionSpec, B11, B12, B21, B22) -> np.ndarray:
    F11, F12, F21, F22 = spec.F_blocks()
    return np.block([
        [F11 @ B11 + F12 @ B21, F11 @ B12 + F12 @ B22],
        [F21 @ B11 + F22 @ B21, F21 @ B12 + F22 @ B22],
    ])


def effective_early(spec: LinearFusionSpec) -> np.ndarray:
    return _compose(spec, spec.W11, spec.W12, spec.W21, spec.W22)


def effective_late(spec: LinearFusionSpec) -> np.ndarray:
    """Early composition with the cross blocks dropped."""
    F11, F12, F21, F22 = spec.F_blocks()
    return np.block([[F11 @ spec.W11, F12 @ spec.W22], [F21 @ spec.W11, F22 @ spec.W22]])


def effective_pro(spec: LinearFusionSpec) -> np.ndarray:
    """One backprojection step: first layer ``[[W11 + G11 W11, G12 W22], [G21 W11, W22 + G22 W22]]``."""
    G11, G12, G21, G22 = spec.G_blocks()
    W11, W22 = spec.W11, spec.W22
    return _compose(spec, W11 + G11 @ W11, G12 @ W22, G21 @ W11, W22 + G22 @ W22)


def check_column_proportionality(matrix: np.ndarray, D: int, K: int | None = None,
                                 tol: float = 1e-9) -> tuple[bool, float]:
    """Are the columns inside each modality's ``D``-column group pairwise parallel?

    Deviation of a column pair ``u, v`` is ``max |u_i v_j - u_j v_i| / (|u| |v|)``
    (the sine of their angle, up to a constant); zero columns count as parallel.
    """
    M = np.asarray(matrix, dtype=np.float64)
    if K is not None and M.shape[0] != K:
        raise SpecError(f"expected {K} rows, got {M.shape[0]}")
    if M.shape[1] % D:
        raise SpecError(f"{M.shape[1]} columns do not split into groups of {D}")
    worst = 0.0
    for start in range(0, M.shape[1], D):
        block = M[:, start:start + D]
        norms = np.linalg.norm(block, axis=0)
        for a, b in itertools.combinations(range(D), 2):
            if norms[a] == 0 or norms[b] == 0:
                continue
            u, v = block[:, a], block[:, b]
            cross = np.abs(np.outer(u, v) - np.outer(v, u)).max()
            worst = max(worst, float(cross / (norms[a] * norms[b])))
    return worst < tol, worst


FIT_RESTARTS = 20
FIT_STEPS = 2000
FIT_LR = 0.01


def _family_params(family: str, D: int, d: int, K: int, rng: Rng) -> dict[str, Tensor]:
    def p(*shape):
        return Tensor(rng.normal(shape) * 0.5, requires_grad=True)

    params = {"F": p(K, 2 * d)}
    if family == "early":
        params["W"] = p(2 * d, 2 * D)
    else:
        params["W11"] = p(d, D)
        params["W22"] = p(d, D)
    if family == "pro":
        params["G"] = p(2 * d, 2 * d)
    return params


def _family_effective(family: str, params: dict[str, Tensor], D: int, d: int) -> Tensor:
    """Differentiable effective matrix built from the autodiff core."""
    if family == "early":
        return ad.matmul(params["F"], params["W"])
    W11, W22 = params["W11"], params["W22"]
    zeros = Tensor(np.zeros((d, D)))
    first = ad.concat([ad.concat([W11, zeros], axis=1), ad.concat([zeros, W22], axis=1)], axis=0)
    if family == "pro":
        # (I + G) blockdiag(W11, W22)
        first = ad.add(first, ad.matmul(params["G"], first))
    return ad.matmul(params["F"], first)


def fit_residual(family: str, target: np.ndarray, d: int = 1, restarts: int = FIT_RESTARTS,
                 steps: int = FIT_STEPS, lr: float = FIT_LR, seed: int = 0) -> float:
    """Smallest ``||effective(params) - target||_F`` found by gradient descent.

    Adam from ``restarts`` random starts. For ``pro`` the best late-fusion
    solution (with ``G = 0``) is one extra start, so the pro residual never
    exceeds the late one. A small residual certifies representability; a
    large one is only evidence (the problem is non-convex).
    """
    if family not in ("early", "late", "pro"):
        raise ValueError(f"family must be early, late or pro, got {family!r}")
    T = np.atleast_2d(np.asarray(target, dtype=np.float64))
    K, cols = T.shape
    if cols % 2:
        raise SpecError(f"target must have 2D columns, got {cols}")
    D = cols // 2
    rng = Rng(seed).split({"early": 0, "late": 1, "pro": 2}[family])
    starts = [_family_params(family, D, d, K, rng.split(r)) for r in range(restarts)]
    if family == "pro":
        late = _best_fit("late", T, d, [_family_params("late", D, d, K, rng.split(1000 + r))
                                          for r in range(restarts)], steps, lr)[1]
        warm = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in late.items()}
        warm["G"] = Tensor(np.zeros((2 * d, 2 * d)), requires_grad=True)
        starts.append(warm)
    return _best_fit(family, T, d, starts, steps, lr)[0]


def _best_fit(family, T, d, starts, steps, lr):
    D = T.shape[1] // 2
    target = Tensor(T)
    best, best_params = math.inf, None
    for params in starts:
        opt = Optimizer(list(params.values()), "adam", lr)
        for _ in range(steps):
            opt.zero_grad()
            diff = ad.sub(_family_effective(family, params, D, d), target)
            ad.backward(ad.sum(ad.mul(diff, diff)))
            opt.step()
        with ad.no_grad():
            res = float(np.linalg.norm(_family_effective(family, params, D, d).data - T))
        if res < best:
            best, best_params = res, params
    return best, best_params


# ---------------------------------------------------------------------------
# Multiplicative nonlinearity: monomial reachability
# ---------------------------------------------------------------------------

Variable = tuple[int, int]  # (modality, component), both 1-based
Monomial = tuple[Variable, ...]  # sorted multiset; () is the constant 1
MonomialSet = frozenset


def monomial(*variables: Variable) -> Monomial:
    return tuple(sorted(variables))


def degree(m: Monomial) -> int:
    return len(m)


def modality_degrees(m: Monomial, n_modalities: int = 2) -> tuple[int, ...]:
    c = Counter(v[0] for v in m)
    return tuple(c.get(i, 0) for i in range(1, n_modalities + 1))


def format_monomial(m: Monomial) -> str:
    if not m:
        return "1"
    return "*".join(f"X{mod}_{i}" for mod, i in m)


def input_monomials(modality: int, D: int) -> MonomialSet:
    return frozenset(((modality, i),) for i in range(1, D + 1))


def pairwise_products(s: Iterable[Monomial], max_degree: int | None = None) -> MonomialSet:
    """All products ``a*b`` with ``a, b`` drawn from ``s`` plus the constant 1."""
    items = sorted(set(s) | {()})
    out = set()
    for i, a in enumerate(items):
        for b in items[i:]:
            if max_degree is None or len(a) + len(b) <= max_degree:
                out.add(tuple(sorted(a + b)))
    return frozenset(out)


OPS = ("input", "linear", "pair", "concat", "inject")


@dataclass(frozen=True)
class Node:
    """``op`` applied to ``inputs`` (node names).

    ``input`` nodes carry ``modality``; ``inject`` takes ``(branch, fused)``
    where ``fused`` may be computed later in the pass (a feedback edge read
    from the previous unroll step).
    """

    name: str
    op: str
    inputs: tuple[str, ...] = ()
    modality: int = 0


@dataclass
class ArchitectureGraph:
    nodes: list[Node]
    output: str
    D: int
    n_modalities: int = 2
    unroll: int | None = None
    _order: list[Node] = field(default=None, init=False, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise SpecError("duplicate node names")
        byname = {n.name: n for n in self.nodes}
        for n in self.nodes:
            if n.op not in OPS:
                raise SpecError(f"node {n.name}: unknown op {n.op!r}")
            for i in n.inputs:
                if i not in byname:
                    raise SpecError(f"node {n.name} references unknown node {i!r}")
            if n.op == "inject" and len(n.inputs) != 2:
                raise SpecError(f"inject node {n.name} needs (branch, fused) inputs")
        if self.output not in byname:
            raise SpecError(f"unknown output node {self.output!r}")
        has_feedback = self._has_cycle(include_feedback=True)
        if self._has_cycle(include_feedback=False):
            raise SpecError("graph has a cycle that does not pass through a backprojection")
        if has_feedback and self.unroll is None:
            raise SpecError("cyclic graph needs an unroll bound")
        if self.unroll is not None and self.unroll < 1:
            raise SpecError("unroll must be >= 1")
        self._order = self._topo()

    def _edges(self, include_feedback: bool) -> dict[str, list[str]]:
        deps = {}
        for n in self.nodes:
            ins = list(n.inputs)
            if n.op == "inject" and not include_feedback:
                ins = ins[:1]
            deps[n.name] = ins
        return deps

    def _has_cycle(self, include_feedback: bool) -> bool:
        deps = self._edges(include_feedback)
        state: dict[str, int] = {}

        def visit(u: str) -> bool:
            state[u] = 1
            for v in deps[u]:
                s = state.get(v, 0)
                if s == 1 or (s == 0 and visit(v)):
                    return True
            state[u] = 2
            return False

        return any(state.get(u, 0) == 0 and visit(u) for u in deps)

    def _topo(self) -> list[Node]:
        deps = self._edges(include_feedback=False)
        byname = {n.name: n for n in self.nodes}
        order, done = [], set()

        def visit(u: str):
            if u in done:
                return
            for v in deps[u]:
                visit(v)
            done.add(u)
            order.append(byname[u])

        for n in self.nodes:
            visit(n.name)
        return order


def reachable_monomials(arch: ArchitectureGraph, max_degree: int | None = None,
                        unlimited_width: bool = True) -> MonomialSet:
    """Monomials that some parameter setting can place in the output features.

    Width limits are not modelled (``unlimited_width`` must stay True).
    ``max_degree`` drops higher-degree products early; the result is exact
    for all monomials up to that degree.
    """
    if not unlimited_width:
        raise NotImplementedError("width-budgeted reachability is not modelled")
    passes = arch.unroll or 1
    prev: dict[str, MonomialSet] = {}
    for _ in range(passes):
        cur: dict[str, MonomialSet] = {}
        for n in arch._order:
            if n.op == "input":
                cur[n.name] = input_monomials(n.modality, arch.D)
            elif n.op == "linear":
                cur[n.name] = cur[n.inputs[0]]
            elif n.op == "pair":
                cur[n.name] = pairwise_products(cur[n.inputs[0]], max_degree)
            elif n.op == "concat":
                cur[n.name] = frozenset().union(*(cur[i] for i in n.inputs))
            else:  # inject: c_0 = 0 contributes nothing on the first pass
                cur[n.name] = cur[n.inputs[0]] | prev.get(n.inputs[1], frozenset())
        prev = cur
    return prev[arch.output]


def late_graph(D: int) -> ArchitectureGraph:
    """Per-modality linear + pairing, concat, then linear + pairing."""
    nodes = []
    for m in (1, 2):
        nodes += [Node(f"x{m}", "input", modality=m), Node(f"lin{m}", "linear", (f"x{m}",)),
                  Node(f"pair{m}", "pair", (f"lin{m}",))]
    nodes += [Node("fused", "concat", ("pair1", "pair2")), Node("head", "linear", ("fused",)),
              Node("out", "pair", ("head",))]
    return ArchitectureGraph(nodes, "out", D)


def early_graph(D: int) -> ArchitectureGraph:
    nodes = [Node("x1", "input", modality=1), Node("x2", "input", modality=2),
             Node("joined", "concat", ("x1", "x2")), Node("lin", "linear", ("joined",)),
             Node("pair", "pair", ("lin",)), Node("head", "linear", ("pair",)),
             Node("out", "pair", ("head",))]
    return ArchitectureGraph(nodes, "out", D)


def pro_graph(D: int, unroll: int = 2) -> ArchitectureGraph:
    """Late graph whose fused features are concatenated back onto each input."""
    nodes = []
    for m in (1, 2):
        nodes += [Node(f"x{m}", "input", modality=m), Node(f"in{m}", "inject", (f"x{m}", "fused")),
                  Node(f"lin{m}", "linear", (f"in{m}",)), Node(f"pair{m}", "pair", (f"lin{m}",))]
    nodes += [Node("fused", "concat", ("pair1", "pair2")), Node("head", "linear", ("fused",)),
              Node("out", "pair", ("head",))]
    return ArchitectureGraph(nodes, "out", D, unroll=unroll)


def first_layer_feature_count(n: int, D: int, mode: str) -> int:
    """Pairwise products (squares included) after the first multiplicative layer."""
    if n < 1 or D < 1:
        raise ValueError("n and D must be >= 1")
    if mode == "early":
        return math.comb(n * D + 1, 2)
    if mode == "late":
        return n * math.comb(D + 1, 2)
    raise ValueError(f"mode must be 'early' or 'late', got {mode!r}")


def restrict(s: MonomialSet, deg: int | None = None, max_degree: int | None = None) -> MonomialSet:
    return frozenset(m for m in s if (deg is None or len(m) == deg)
                     and (max_degree is None or len(m) <= max_degree))


def is_symmetric_family(m: Monomial, n_modalities: int = 2) -> bool:
    """Degree split across modalities is one of (4,0), (2,2), (0,4) for degree 4."""
    return all(k % 2 == 0 for k in modality_degrees(m, n_modalities))


def all_monomials(D: int, max_degree: int, n_modalities: int = 2) -> MonomialSet:
    vars_ = [(m, i) for m in range(1, n_modalities + 1) for i in range(1, D + 1)]
    out = set()
    for k in range(max_degree + 1):
        out.update(itertools.combinations_with_replacement(vars_, k))
    return frozenset(out)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def run_checks(n_random: int = 1000, seed: int = 0, fit_restarts: int = FIT_RESTARTS,
               fit_steps: int = FIT_STEPS) -> list[CheckResult]:
    """Every hard invariant of the analyzer, with fixed seeds."""
    rng = Rng(seed)
    out: list[CheckResult] = []

    late_dev = [check_column_proportionality(effective_late(LinearFusionSpec.random(rng.split(i))), 2)
                for i in range(n_random)]
    dense_dev = [check_column_proportionality(rng.split(10_000 + i).normal((2, 4)), 2)
                 for i in range(n_random)]
    out.append(CheckResult(
        "late effective matrices are column-proportional", all(ok for ok, _ in late_dev),
        f"{sum(ok for ok, _ in late_dev)}/{n_random} pass, worst deviation "
        f"{max(d for _, d in late_dev):.2e}"))
    out.append(CheckResult(
        "random dense matrices are not column-proportional", not any(ok for ok, _ in dense_dev),
        f"{sum(not ok for ok, _ in dense_dev)}/{n_random} fail, smallest deviation "
        f"{min(d for _, d in dense_dev):.2e}"))

    exact = all(np.array_equal(effective_pro(s), effective_late(s))
                for s in (LinearFusionSpec.random(rng.split(20_000 + i)) for i in range(100)))
    out.append(CheckResult("effective_pro with G = 0 equals effective_late", exact, "100 random specs"))

    target = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
    res = {f: fit_residual(f, target, restarts=fit_restarts, steps=fit_steps, seed=seed)
           for f in ("late", "pro", "early")}
    out.append(CheckResult(
        "counterexample is unreachable for late fusion",
        res["late"] > 0.1 and res["early"] < 1e-6 and res["pro"] <= res["late"],
        "residuals " + ", ".join(f"{k}={v:.3g}" for k, v in res.items())))

    out.append(CheckResult(
        "first-layer feature counts (n=2, D=2)",
        first_layer_feature_count(2, 2, "early") == 10 and first_layer_feature_count(2, 2, "late") == 6,
        f"early={first_layer_feature_count(2, 2, 'early')} late={first_layer_feature_count(2, 2, 'late')} "
        f"(pairs without repetition would give C(4,2)={math.comb(4, 2)})"))

    for D in (1, 2, 3):
        L = restrict(reachable_monomials(late_graph(D), max_degree=4), max_degree=4)
        P = restrict(reachable_monomials(pro_graph(D), max_degree=4), max_degree=4)
        E = restrict(reachable_monomials(early_graph(D), max_degree=4), max_degree=4)
        nested = L <= P <= E
        sym = all(is_symmetric_family(m) for m in restrict(L, deg=4))
        out.append(CheckResult(
            f"late <= pro <= early up to degree 4 (D={D})", nested,
            f"|late|={len(L)} |pro|={len(P)} |early|={len(E)}"))
        out.append(CheckResult(
            f"late degree-4 monomials are modality-symmetric (D={D})", sym,
            f"{len(restrict(L, deg=4))} degree-4 monomials"))
        if D >= 2:
            asym = monomial((1, 1), (1, 1), (1, 2), (2, 1))
            ok = asym not in L and asym in E and asym in P
            out.append(CheckResult(
                f"{format_monomial(asym)} reachable by early and pro only (D={D})", ok,
                f"late={asym in L} pro={asym in P} early={asym in E}"))
            split31 = [m for m in restrict(P, deg=4) if modality_degrees(m) == (3, 1)]
            out.append(CheckResult(
                f"pro reaches a (3,1) degree split (D={D})", bool(split31),
                f"{len(split31)} monomials, e.g. {format_monomial(split31[0]) if split31 else '-'}"))
    return out


def report(checks: Sequence[CheckResult]) -> str:
    lines = ["expressiveness checks", "=" * 21]
    for c in checks:
        lines.append(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
    lines.append("")
    lines.append("note: feature counts include squares (10 terms for nD = 4); "
                 "the closed form C(nD, 2) omits them and gives 6.")
    counts = [(n, D, first_layer_feature_count(n, D, "early"), first_layer_feature_count(n, D, "late"))
              for n in (1, 2, 3) for D in (2, 4, 8)]
    lines.append("first-layer feature counts (n, D, early, late):")
    lines += [f"  {n} {D} {e} {l}" for n, D, e, l in counts]
    return "\n".join(lines)
