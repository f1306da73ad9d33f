"""Domain types, discretization grids, filtration backends and validation."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Mapping, Sequence

import numpy as np

INF_LABEL = "inf"


class NumericalError(ArithmeticError):
    """A solver produced a non-finite or otherwise unusable number."""


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid t_0 = 0 < ... < t_N = T.

    Args:
        T: horizon.
        N: number of steps.
    """

    T: float
    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError("step count N must be an integer >= 1")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ValueError("horizon T must be positive and finite")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @cached_property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.N + 1) * self.dt
        t[-1] = self.T
        t.flags.writeable = False
        return t

    def time(self, i: int) -> float:
        """Time of node i, with index N + 1 standing for the sentinel +inf."""
        if i > self.N:
            return math.inf
        return float(self.nodes[i])

    @cached_property
    def theta_values(self) -> np.ndarray:
        """Default-time support: grid nodes followed by the +inf bucket."""
        t = np.append(self.nodes, np.inf)
        t.flags.writeable = False
        return t


@dataclass(frozen=True)
class MarkSpace:
    """Finite mark space E with weights for the mark measure.

    Args:
        points: mark values, scalars or equal-length vectors.
        weights: nonnegative weights, a pmf when ``pmf`` is True.
        pmf: whether weights form a probability mass function.
    """

    points: tuple
    weights: tuple
    pmf: bool = True

    def __post_init__(self):
        pts = tuple(tuple(float(v) for v in p) if np.ndim(p) else float(p) for p in self.points)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.points) < 1:
            raise ValueError("mark space needs at least one point")
        if len(self.points) != len(self.weights):
            raise ValueError("points and weights differ in length")
        if any(w < 0 for w in self.weights):
            raise ValueError("mark weights must be nonnegative")
        if self.pmf and abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError("pmf mark weights must sum to 1")

    @classmethod
    def single(cls, point: float = 0.0) -> "MarkSpace":
        return cls((point,), (1.0,), True)

    @property
    def M(self) -> int:
        return len(self.points)

    @property
    def w(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    @property
    def values(self) -> np.ndarray:
        """Mark values, shape (M,) for scalar marks, (M, m) otherwise."""
        return np.asarray(self.points, dtype=float)


@dataclass(frozen=True)
class StateGrid:
    """Uniform one-dimensional state grid with clamped linear interpolation."""

    lo: float
    hi: float
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("state grid needs at least one node")
        if self.size > 1 and not self.hi > self.lo:
            raise ValueError("state grid bounds reversed")

    @property
    def h(self) -> float:
        return (self.hi - self.lo) / (self.size - 1) if self.size > 1 else 1.0

    @cached_property
    def nodes(self) -> np.ndarray:
        if self.size == 1:
            x = np.array([float(self.lo)])
        else:
            x = self.lo + np.arange(self.size) * self.h
            x[-1] = self.hi
        x.flags.writeable = False
        return x

    def nearest(self, x) -> np.ndarray:
        if self.size == 1:
            return np.zeros(np.shape(x), dtype=int)
        return np.clip(np.rint((np.asarray(x, dtype=float) - self.lo) / self.h), 0, self.size - 1).astype(int)

    def interp(self, table: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, int]:
        """Interpolate tables along their last axis.

        Args:
            table: values on the grid, shape (..., G); leading axes broadcast with x.
            x: query points, shape (..., K).

        Returns:
            Interpolated values and the number of queries clamped at the bounds.
        """
        x = np.asarray(x, dtype=float)
        G = self.size
        if G == 1:
            out = np.broadcast_to(table[..., :1], np.broadcast_shapes(table.shape[:-1] + (1,), x.shape))
            return np.broadcast_to(out, np.broadcast_shapes(out.shape, x.shape)).copy(), 0
        u = (x - self.lo) / self.h
        tol = 1e-9
        clamped = int(np.count_nonzero((u < -tol) | (u > G - 1 + tol)))
        u = np.clip(u, 0.0, G - 1.0)
        # snap queries within rounding of a node so on-grid states read tables exactly
        r = np.rint(u)
        u = np.where(np.abs(u - r) <= tol, r, u)
        j = np.minimum(np.floor(u).astype(int), G - 2)
        w = u - j
        shape = np.broadcast_shapes(table.shape[:-1] + (1,), x.shape)
        tb = np.broadcast_to(table, shape[:-1] + (G,))
        jj = np.broadcast_to(j, shape)
        ww = np.broadcast_to(w, shape)
        lo = np.take_along_axis(tb, jj, axis=-1)
        hi = np.take_along_axis(tb, jj + 1, axis=-1)
        return lo * (1.0 - ww) + hi * ww, clamped


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class OrderedScenario:
    """Occurred defaults in increasing order with marks and original indices."""

    times: tuple
    marks: tuple
    index_marks: tuple

    @property
    def k(self) -> int:
        return len(self.times)


def orderize(times: Sequence[float], marks: Sequence[Any] | None = None) -> OrderedScenario:
    """Rank default times, carrying marks and 1-based index marks along.

    Ties keep the original order.

    Args:
        times: nonnegative default times (``inf`` allowed).
        marks: one mark per time; defaults to ``None`` marks.

    Returns:
        OrderedScenario with nondecreasing times.
    """
    times = [float(t) for t in times]
    if marks is None:
        marks = [None] * len(times)
    if len(marks) != len(times):
        raise ValueError("times and marks differ in length")
    if any(t < 0 or math.isnan(t) for t in times):
        raise ValueError("default times must be nonnegative")
    order = sorted(range(len(times)), key=lambda i: times[i])
    return OrderedScenario(
        times=tuple(times[i] for i in order),
        marks=tuple(marks[i] for i in order),
        index_marks=tuple(i + 1 for i in order),
    )


# ---------------------------------------------------------------------------
# control sets


@dataclass(frozen=True)
class ControlSet:
    """Closed control set: finite list, interval, box in R^2 or unconstrained.

    Build with the class constructors rather than directly.
    """

    kind: str
    points: tuple = ()
    lower: tuple = ()
    upper: tuple = ()
    dim: int = 1

    @classmethod
    def finite(cls, values) -> "ControlSet":
        vals = [tuple(float(u) for u in v) if np.ndim(v) else float(v) for v in values]
        dim = len(vals[0]) if vals and isinstance(vals[0], tuple) else 1
        return cls("finite", points=tuple(vals), dim=dim)

    @classmethod
    def interval(cls, lo: float, hi: float) -> "ControlSet":
        return cls("interval", lower=(float(lo),), upper=(float(hi),), dim=1)

    @classmethod
    def box(cls, first: Sequence[float], second: Sequence[float]) -> "ControlSet":
        return cls("box", lower=(float(first[0]), float(second[0])), upper=(float(first[1]), float(second[1])), dim=2)

    @classmethod
    def unconstrained(cls, dim: int = 1) -> "ControlSet":
        return cls("unconstrained", dim=dim)

    def violations(self) -> list[str]:
        out = []
        if self.kind not in ("finite", "interval", "box", "unconstrained"):
            out.append(f"unknown control set kind {self.kind!r}")
        elif self.kind == "finite" and not self.points:
            out.append("finite control set is empty")
        elif self.kind in ("interval", "box") and any(lo > hi for lo, hi in zip(self.lower, self.upper)):
            out.append("control set bounds reversed")
        return out

    @property
    def array(self) -> np.ndarray:
        """Finite points as an array, shape (K,) or (K, dim)."""
        return np.asarray(self.points, dtype=float)

    @property
    def bounded(self) -> bool:
        return self.kind != "unconstrained"

    def contains(self, a, tol: float = 1e-12) -> bool:
        a = np.asarray(a, dtype=float)
        if self.kind == "unconstrained":
            return True
        if self.kind == "finite":
            pts = self.array.reshape(len(self.points), -1)
            return bool(np.any(np.all(np.abs(pts - a.reshape(1, -1)) <= tol, axis=1)))
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        return bool(np.all(a.reshape(-1) >= lo - tol) and np.all(a.reshape(-1) <= hi + tol))

    def project(self, a) -> np.ndarray:
        """Euclidean projection; ties on finite sets go to the first point."""
        a = np.asarray(a, dtype=float)
        if self.kind == "unconstrained":
            return a.copy()
        if self.kind in ("interval", "box"):
            lo, hi = np.asarray(self.lower), np.asarray(self.upper)
            if self.dim == 1:
                return np.clip(a, lo[0], hi[0])
            return np.clip(a, lo, hi)
        pts = self.array
        if self.dim == 1:
            d = np.abs(a[..., None] - pts)
            return pts[np.argmin(d, axis=-1)]
        d = np.sum((a[..., None, :] - pts) ** 2, axis=-1)
        return pts[np.argmin(d, axis=-1)]


# ---------------------------------------------------------------------------
# regime layout


@dataclass(frozen=True)
class Layout:
    """Regime bookkeeping for n ordered default times or two unordered names.

    A regime is the sorted tuple of slots whose default has occurred. For ordered
    times slot j is the (j+1)-th default; for unordered names slot j is name j+1.
    """

    n: int
    ordered: bool = True

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one default time")
        if not self.ordered and self.n != 2:
            raise ValueError("unordered layout supports exactly two names")

    def regimes(self) -> list[tuple]:
        if self.ordered:
            return [tuple(range(k)) for k in range(self.n + 1)]
        return [tuple(s) for r in range(self.n + 1) for s in itertools.combinations(range(self.n), r)]

    def next_sets(self, S: tuple, simultaneous: bool = False) -> list[tuple]:
        """Slot sets that may default together right after regime S."""
        rest = [j for j in range(self.n) if j not in S]
        if self.ordered:
            sizes = range(1, len(rest) + 1) if simultaneous else range(1, min(1, len(rest)) + 1)
            return [tuple(rest[:m]) for m in sizes]
        sizes = range(1, len(rest) + 1) if simultaneous else (1,)
        return [tuple(c) for m in sizes for c in itertools.combinations(rest, m)]

    def label(self, S: tuple) -> str:
        if self.ordered:
            return str(len(S))
        if len(S) == 0:
            return "0"
        if len(S) == self.n:
            return str(self.n)
        return f"1,{S[0] + 1}"

    def jump_label(self, S: tuple, j: int) -> str:
        if self.ordered:
            return str(len(S) + 1)
        return f"{len(S) + 1},{j + 1}"

    def labels(self) -> list[str]:
        return [self.label(S) for S in self.regimes()]

    def jump_labels(self) -> list[str]:
        return sorted({self.jump_label(S, j) for S in self.regimes() for (j,) in self.next_sets(S)})


def ordered_layout(n: int) -> Layout:
    return Layout(n, True)


TWO_NAMES = Layout(2, False)


# ---------------------------------------------------------------------------
# control problem specification


def _zero(*args, **kwargs):
    return 0.0


@dataclass(frozen=True)
class RegimeSpec:
    """Coefficients, gains and control set of one regime.

    Coefficient callables take ``(t, x, a, thetas, marks)`` with numpy broadcasting;
    ``terminal_gain`` takes ``(x, thetas, marks)``. ``thetas``/``marks`` hold the
    occurred default times and mark values of the regime in slot order.
    """

    drift: Callable = _zero
    vol: Callable = _zero
    running_gain: Callable = _zero
    terminal_gain: Callable = _zero
    controls: ControlSet = field(default_factory=lambda: ControlSet.finite([0.0]))


@dataclass(frozen=True)
class ControlProblemSpec:
    """Controlled state with regime switches at default times.

    Args:
        grid: time grid.
        layout: ordered or two-name regime layout.
        regimes: mapping regime label -> RegimeSpec.
        jumps: mapping jump label -> callable ``(t, x, a, e)`` applied at a default.
        x0: initial state.
        signed_gains: permit gains that are bounded below but negative.
        positive_vol: regimes whose volatility must be positive (finance generators).
    """

    grid: TimeGrid
    layout: Layout
    regimes: Mapping[str, RegimeSpec]
    jumps: Mapping[str, Callable]
    x0: float = 0.0
    signed_gains: bool = False
    positive_vol: tuple = ()

    @property
    def n(self) -> int:
        return self.layout.n

    def regime(self, S: tuple) -> RegimeSpec:
        return self.regimes[self.layout.label(S)]


@dataclass(frozen=True)
class ValidationReport:
    """List of violations; empty means valid."""

    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_spec(spec: ControlProblemSpec, grid: TimeGrid, marks: MarkSpace, state_grid: StateGrid | None = None) -> ValidationReport:
    """Check a control problem for well-formedness.

    Coefficients are sampled on the time grid, the state grid (or a small default
    sample) and every point of finite control sets; the checks are totality
    (finite values), control-set shape, volatility positivity where requested and
    gain nonnegativity unless signed gains are enabled.

    Args:
        spec: problem to check.
        grid: time grid.
        marks: mark space.
        state_grid: optional state grid used for sampling.

    Returns:
        ValidationReport listing violations in a fixed order.
    """
    out: list[str] = []
    lay = spec.layout
    for lab in lay.labels():
        if lab not in spec.regimes:
            out.append(f"regime {lab} missing")
    for lab in lay.jump_labels():
        if lab not in spec.jumps:
            out.append(f"jump map {lab} missing")
    for lab in sorted(spec.regimes):
        if lab not in lay.labels():
            out.append(f"unknown regime {lab}")
    if out:
        return ValidationReport(tuple(out))
    xs = state_grid.nodes if state_grid is not None else np.linspace(-1.0, 1.0, 5)
    ts = grid.nodes
    for S in lay.regimes():
        lab = lay.label(S)
        reg = spec.regimes[lab]
        for v in reg.controls.violations():
            out.append(f"regime {lab}: {v}")
        if reg.controls.violations():
            continue
        samples = _control_samples(reg.controls)
        thetas = tuple(float(ts[min(len(S), grid.N)]) for _ in S)
        mk = tuple(marks.values[0] for _ in S)
        bad_total = bad_vol = bad_gain = False
        for a in samples:
            for t in ts:
                for name in ("drift", "vol", "running_gain"):
                    val = np.asarray(getattr(reg, name)(t, xs, a, thetas, mk), dtype=float)
                    if not np.all(np.isfinite(val)):
                        bad_total = True
                    if name == "vol" and lab in spec.positive_vol and np.any(np.broadcast_to(val, xs.shape) <= 0):
                        bad_vol = True
                    if name == "running_gain" and not spec.signed_gains and np.any(val < 0):
                        bad_gain = True
        g = np.asarray(reg.terminal_gain(xs, thetas, mk), dtype=float)
        if not np.all(np.isfinite(g)):
            bad_total = True
        if not spec.signed_gains and np.any(g < 0):
            bad_gain = True
        if bad_total:
            out.append(f"regime {lab}: coefficient not finite on sampled domain")
        if bad_vol:
            out.append(f"regime {lab}: volatility must be positive")
        if bad_gain:
            out.append(f"regime {lab}: gains must be nonnegative (enable signed gains to relax)")
    for lab in lay.jump_labels():
        S = _source_regime(lay, lab)
        samples = _control_samples(spec.regimes[lay.label(S)].controls)
        for a in samples:
            for e in marks.values:
                val = np.asarray(spec.jumps[lab](grid.T, xs, a, e), dtype=float)
                if not np.all(np.isfinite(val)):
                    out.append(f"jump map {lab}: not finite on sampled domain")
                    break
            else:
                continue
            break
    return ValidationReport(tuple(out))


def _source_regime(lay: Layout, jump_label: str) -> tuple:
    for S in lay.regimes():
        for (j,) in lay.next_sets(S):
            if lay.jump_label(S, j) == jump_label:
                return S
    raise KeyError(jump_label)


def _control_samples(cs: ControlSet) -> list:
    if cs.kind == "finite":
        return [np.asarray(p) if cs.dim > 1 else float(p) for p in cs.points]
    if cs.kind == "interval":
        lo, hi = cs.lower[0], cs.upper[0]
        return [lo, 0.5 * (lo + hi), hi]
    if cs.kind == "box":
        lo, hi = np.asarray(cs.lower), np.asarray(cs.upper)
        return [lo, 0.5 * (lo + hi), hi]
    return [0.0] if cs.dim == 1 else [np.zeros(cs.dim)]


# ---------------------------------------------------------------------------
# G-optional tuples


@dataclass(frozen=True)
class EvalContext:
    """Evaluation point handed to G-optional components.

    Attributes:
        t: time.
        i: time index.
        node: F-node indices, broadcastable.
        state: F-state (e.g. Brownian level) per node, broadcastable, last axis per dimension.
        thetas: occurred default times (inf for the sentinel), broadcastable arrays.
        marks: occurred mark values, broadcastable arrays.
        theta_idx: default-time indices (N + 1 for the sentinel).
        mark_idx: mark indices.
    """

    t: float
    i: int
    node: Any
    state: Any
    thetas: tuple
    marks: tuple
    theta_idx: tuple
    mark_idx: tuple


@dataclass(frozen=True)
class GOptionalTuple:
    """A G-process as its tuple of F-components, one per regime label.

    Components are floats or callables of an EvalContext.

    Args:
        components: mapping regime label -> float or callable.
        predictable: use the predictable boundary convention (regime counts
            defaults strictly before t) instead of the optional one.
    """

    components: Mapping[str, Any]
    predictable: bool = False

    @classmethod
    def constant(cls, layout: Layout, c: float = 1.0, predictable: bool = False) -> "GOptionalTuple":
        return cls({lab: float(c) for lab in layout.labels()}, predictable)

    def evaluate(self, label: str, ctx: EvalContext, shape: tuple) -> np.ndarray:
        comp = self.components.get(label, 0.0)
        val = comp(ctx) if callable(comp) else comp
        return np.broadcast_to(np.asarray(val, dtype=float), shape)


# ---------------------------------------------------------------------------
# filtration backends


class FiniteTree:
    """Explicit finite probability tree for the reference noise.

    Level i has ``size(i)`` nodes; node j branches to ``children[i][j, b]`` with
    probability ``probs[i][j, b]`` and Brownian increment ``dw[i][j, b, :]``.

    Args:
        children: per level i < N, int array (n_i, B).
        probs: per level, array (n_i, B) summing to 1 along B.
        dw: per level, array (n_i, B, d).
        state: per level i <= N, array (n_i, d) of the noise level at each node.
    """

    exact = True

    def __init__(self, children, probs, dw, state, label: str = "tree"):
        self.children = [np.asarray(c, dtype=int) for c in children]
        self.probs = [np.asarray(p, dtype=float) for p in probs]
        self.dw = [np.asarray(d, dtype=float) for d in dw]
        self.state = [np.asarray(s, dtype=float) for s in state]
        self.label = label
        self.N = len(self.children)
        if len(self.state) != self.N + 1:
            raise ValueError("state must have one entry per level")
        for p in self.probs:
            if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12):
                raise ValueError("tree probabilities must sum to 1 at every branching")
        self._paths = None

    # construction helpers
    @classmethod
    def trivial(cls, N: int, d: int = 1) -> "FiniteTree":
        """Deterministic reference filtration: one node per level."""
        return cls(
            [np.zeros((1, 1), int)] * N,
            [np.ones((1, 1))] * N,
            [np.zeros((1, 1, d))] * N,
            [np.zeros((1, d))] * (N + 1),
            label="trivial",
        )

    @classmethod
    def binomial(cls, grid: TimeGrid, dims: int = 1) -> "FiniteTree":
        """Recombining symmetric random walk with increments +-sqrt(dt) per dimension."""
        s = math.sqrt(grid.dt)
        children, probs, dw, state = [], [], [], []
        signs = np.array(list(itertools.product((-1.0, 1.0), repeat=dims)))
        B = len(signs)
        for i in range(grid.N + 1):
            ups = np.array(list(itertools.product(range(i + 1), repeat=dims)), dtype=int)
            state.append((2 * ups - i) * s)
            if i == grid.N:
                break
            width = i + 2
            ch = np.zeros((len(ups), B), int)
            for b, sg in enumerate(signs):
                nxt = ups + (sg > 0).astype(int)
                idx = np.zeros(len(ups), int)
                for k in range(dims):
                    idx = idx * width + nxt[:, k]
                ch[:, b] = idx
            children.append(ch)
            probs.append(np.full((len(ups), B), 1.0 / B))
            dw.append(np.broadcast_to(signs * s, (len(ups), B, dims)).copy())
        return cls(children, probs, dw, state, label=f"binomial{dims}")

    @classmethod
    def from_branching(cls, N: int, probs_per_node, increments) -> "FiniteTree":
        """Non-recombining tree; node j at level i has children j*B + b.

        Args:
            N: depth.
            probs_per_node: callable (i, j) -> probabilities (B,), or array (B,).
            increments: array (B,) or (B, d) of Brownian increments.
        """
        inc = np.asarray(increments, dtype=float)
        if inc.ndim == 1:
            inc = inc[:, None]
        B, d = inc.shape
        children, probs, dw, state = [], [], [], [np.zeros((1, d))]
        n = 1
        for i in range(N):
            ch = np.arange(n)[:, None] * B + np.arange(B)[None, :]
            if callable(probs_per_node):
                pr = np.array([probs_per_node(i, j) for j in range(n)], dtype=float)
            else:
                pr = np.broadcast_to(np.asarray(probs_per_node, dtype=float), (n, B)).copy()
            children.append(ch)
            probs.append(pr)
            dw.append(np.broadcast_to(inc, (n, B, d)).copy())
            state.append((state[-1][:, None, :] + inc[None, :, :]).reshape(n * B, d))
            n *= B
        return cls(children, probs, dw, state, label="branching")

    # interface
    @property
    def dims(self) -> int:
        return self.state[0].shape[1]

    def size(self, i: int) -> int:
        return self.state[i].shape[0]

    @property
    def is_trivial(self) -> bool:
        return all(s.shape[0] == 1 for s in self.state)

    def cond_exp(self, i: int, arr: np.ndarray) -> np.ndarray:
        """E[arr_{i+1} | node at level i]; extra trailing axes are carried."""
        arr = np.asarray(arr, dtype=float)
        ch, p = self.children[i], self.probs[i]
        out = np.zeros((ch.shape[0],) + arr.shape[1:])
        for b in range(ch.shape[1]):
            out += p[:, b].reshape((-1,) + (1,) * (arr.ndim - 1)) * arr[ch[:, b]]
        return out

    def cond_exp_dw(self, i: int, arr: np.ndarray) -> np.ndarray:
        """E[arr_{i+1} dW | node]; returns shape (n_i, ..., d)."""
        arr = np.asarray(arr, dtype=float)
        ch, p, dw = self.children[i], self.probs[i], self.dw[i]
        out = np.zeros((ch.shape[0],) + arr.shape[1:] + (dw.shape[2],))
        for b in range(ch.shape[1]):
            pb = p[:, b].reshape((-1,) + (1,) * (arr.ndim - 1) + (1,))
            dwb = dw[:, b, :].reshape((dw.shape[0],) + (1,) * (arr.ndim - 1) + (dw.shape[2],))
            out += pb * arr[ch[:, b]][..., None] * dwb
        return out

    def parents(self, i: int) -> np.ndarray:
        """Parent of each node at level i >= 1 (first parent on recombining trees)."""
        ch = self.children[i - 1]
        par = np.full(self.size(i), -1)
        for b in range(ch.shape[1] - 1, -1, -1):
            par[ch[:, b]] = np.arange(ch.shape[0])
        return par


class MonteCarloRegression:
    """Simulated Brownian paths with least-squares conditional expectations.

    Args:
        grid: time grid.
        n_paths: number of paths.
        degree: total degree of the polynomial basis in the Brownian level.
        seed: RNG seed.
        dims: Brownian dimension.
    """

    exact = False

    def __init__(self, grid: TimeGrid, n_paths: int, degree: int = 2, seed: int = 0, dims: int = 1):
        self.grid, self.n_paths, self.degree, self.seed = grid, int(n_paths), int(degree), int(seed)
        self.N = grid.N
        nb = math.comb(self.degree + dims, dims)
        if self.n_paths < nb:
            raise ValueError("path count must be at least the basis dimension")
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, 7])))
        inc = rng.standard_normal((self.N, self.n_paths, dims)) * math.sqrt(grid.dt)
        self.increments = inc
        w = np.concatenate([np.zeros((1, self.n_paths, dims)), np.cumsum(inc, axis=0)])
        self.state = [w[i] for i in range(self.N + 1)]
        self._exps = [e for e in itertools.product(range(self.degree + 1), repeat=dims) if sum(e) <= self.degree]
        self.label = "mc_regression"

    @property
    def dims(self) -> int:
        return self.state[0].shape[1]

    def size(self, i: int) -> int:
        return self.n_paths

    is_trivial = False

    def basis(self, i: int) -> np.ndarray:
        if i == 0:
            return np.ones((self.n_paths, 1))
        x = self.state[i] / math.sqrt(max(self.grid.time(i), 1e-300))
        cols = [np.prod(x ** np.asarray(e)[None, :], axis=1) for e in self._exps]
        return np.stack(cols, axis=1)

    def _project(self, i: int, arr: np.ndarray) -> np.ndarray:
        A = self.basis(i)
        flat = arr.reshape(self.n_paths, -1)
        coef, *_ = np.linalg.lstsq(A, flat, rcond=None)
        return (A @ coef).reshape(arr.shape)

    def cond_exp(self, i: int, arr: np.ndarray) -> np.ndarray:
        return self._project(i, np.asarray(arr, dtype=float))

    def cond_exp_dw(self, i: int, arr: np.ndarray) -> np.ndarray:
        arr = np.asarray(arr, dtype=float)
        dw = self.increments[i]
        prod = arr[..., None] * dw.reshape((self.n_paths,) + (1,) * (arr.ndim - 1) + (dw.shape[1],))
        return self._project(i, prod)


FiltrationBackend = FiniteTree | MonteCarloRegression
