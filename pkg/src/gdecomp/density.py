"""Conditional default-time densities, survival densities and their checks.

Default times live on the time-grid nodes 0..N plus a sentinel index N + 1 that
carries the mass of defaults after the horizon. Densities are stored per node of
the reference-filtration backend with axes (node, theta_1, e_1, ..., theta_n, e_n).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .model import FiniteTree, Layout, MarkSpace, MonteCarloRegression, TimeGrid, ordered_layout

RULES = ("pmf", "left", "trapezoid", "gregory")

_GREGORY_HEAD = np.array([3.0 / 8.0, 7.0 / 6.0, 23.0 / 24.0])


@dataclass(frozen=True)
class ThetaRule:
    """Quadrature over default times on grid nodes.

    ``pmf`` treats the density as point masses on nodes (counting measure);
    ``left``, ``trapezoid`` and ``gregory`` (end-corrected trapezoid) discretize
    Lebesgue integrals. The sentinel bucket always has weight 1.
    """

    kind: str
    N: int
    dt: float

    def __post_init__(self):
        if self.kind not in RULES:
            raise ValueError(f"unknown quadrature rule {self.kind!r}")

    @property
    def size(self) -> int:
        return self.N + 2

    def interval(self, lo: int, hi: int) -> np.ndarray:
        """Weights of the integral over [t_lo, t_hi] (finite nodes only).

        For ``pmf`` both ends are included.
        """
        w = np.zeros(self.size)
        lo = max(lo, 0)
        hi = min(hi, self.N)
        if hi < lo:
            return w
        if self.kind == "pmf":
            w[lo : hi + 1] = 1.0
            return w
        if hi == lo:
            return w
        h = self.dt
        if self.kind == "left":
            w[lo:hi] = h
            return w
        n = hi - lo + 1
        if self.kind == "gregory" and n >= 6:
            w[lo : hi + 1] = h
            w[lo : lo + 3] = h * _GREGORY_HEAD
            w[hi - 2 : hi + 1] = h * _GREGORY_HEAD[::-1]
            return w
        w[lo : hi + 1] = h
        w[lo] = w[hi] = h / 2.0
        return w

    def after(self, cut: int, lo: int = 0) -> np.ndarray:
        """Tail weights: finite defaults after ``cut`` and at or after ``lo``, plus the sentinel."""
        if self.kind == "pmf":
            w = self.interval(max(cut + 1, lo), self.N)
        else:
            w = self.interval(max(cut, lo), self.N)
        w[-1] = 1.0
        return w

    def coupling(self, start: int) -> np.ndarray:
        """Weights of the next default time over (start, T] (pmf) or [start, T]."""
        if self.kind == "pmf":
            return self.interval(start + 1, self.N)
        return self.interval(start, self.N)

    @lru_cache(maxsize=4096)
    def tail_matrix(self, cut: int) -> np.ndarray:
        """Row a: tail weights for the next ordered default given the previous one at a."""
        m = np.zeros((self.size, self.size))
        for a in range(self.size):
            if a > self.N:
                m[a, -1] = 1.0
            else:
                m[a] = self.after(cut, a)
        return m

    @lru_cache(maxsize=4096)
    def head_matrix(self, cut: int) -> np.ndarray:
        """Row a: weights of the next ordered default over [t_a, t_cut]."""
        m = np.zeros((self.size, self.size))
        for a in range(min(cut, self.N) + 1):
            m[a] = self.interval(a, cut)
        return m

    def head(self, cut: int) -> np.ndarray:
        return self.interval(0, cut)


class DensityFamily:
    """Conditional density of default times and marks on a filtration backend.

    Args:
        grid: time grid.
        marks: mark space (density is with respect to its weights).
        layout: ordered or two-name layout.
        rule: quadrature rule kind for default times.
        backend: FiniteTree or MonteCarloRegression; trivial tree when omitted.
        gamma_T: terminal density per backend node, shape (n_N, [N+2, M] * n).
        gamma_levels: explicit density per level (skips the tower construction).
        label: builder label.
    """

    def __init__(self, grid: TimeGrid, marks: MarkSpace, layout: Layout, rule: str = "pmf", backend=None,
                 gamma_T=None, gamma_levels=None, label: str = "custom"):
        self.grid, self.marks, self.layout = grid, marks, layout
        self.backend = backend if backend is not None else FiniteTree.trivial(grid.N)
        if self.backend.N != grid.N:
            raise ValueError("backend depth differs from the time grid")
        self.rule = ThetaRule(rule, grid.N, grid.dt)
        self.label = label
        if gamma_levels is not None:
            self._levels = [np.asarray(g, dtype=float) for g in gamma_levels]
            if len(self._levels) != grid.N + 1:
                raise ValueError("need one density table per level")
        else:
            gT = np.asarray(gamma_T, dtype=float)
            self._levels = [None] * grid.N + [gT]
        expect = (self.grid.N + 2, self.marks.M) * layout.n
        if self._levels[-1].shape[1:] != expect:
            raise ValueError(f"density shape {self._levels[-1].shape[1:]} != {expect}")
        if self._levels[-1].shape[0] != self.backend.size(grid.N):
            raise ValueError("density node count differs from the backend")
        self._cache: dict = {}

    @property
    def n(self) -> int:
        return self.layout.n

    @property
    def ordered(self) -> bool:
        return self.layout.ordered

    @property
    def exact(self) -> bool:
        return self.rule.kind == "pmf" and getattr(self.backend, "exact", False)

    def scaled(self, c: float) -> "DensityFamily":
        """Family with every density value multiplied by c."""
        return DensityFamily(self.grid, self.marks, self.layout, self.rule.kind, self.backend,
                             gamma_levels=[c * self.gamma(i) for i in range(self.grid.N + 1)], label=self.label)

    # --- raw density -----------------------------------------------------
    def gamma(self, i: int) -> np.ndarray:
        """Top density at level i, shape (n_i, [N+2, M] * n)."""
        if self._levels[i] is None:
            if getattr(self.backend, "is_trivial", False):
                self._levels[i] = self._levels[-1]
            else:
                for j in range(self.grid.N - 1, i - 1, -1):
                    if self._levels[j] is None:
                        self._levels[j] = self.backend.cond_exp(j, self._levels[j + 1])
        return self._levels[i]

    def mass_weights(self, k: int) -> np.ndarray:
        """Product of mark weights broadcast over k (theta, e) pairs."""
        out = np.ones((1,) * (2 * k))
        for j in range(k):
            sh = [1] * (2 * k)
            sh[2 * j + 1] = self.marks.M
            out = out * self.marks.w.reshape(sh)
        return out

    # --- survival densities ----------------------------------------------
    def regime_density(self, S: tuple, i: int, cut: int | None = None) -> np.ndarray:
        """Density of regime S at level i: slots in S occurred, the rest after ``cut``.

        Args:
            S: occurred slots (a prefix for ordered layouts).
            i: level index.
            cut: partition cut (defaults to i).

        Returns:
            Array (n_i, [N+2, M] * |S|).
        """
        cut = i if cut is None else cut
        key = (tuple(S), i, cut)
        if key in self._cache:
            return self._cache[key]
        n = self.n
        w = self.marks.w
        if len(S) == n:
            out = self.gamma(i)
        elif self.ordered:
            k = len(S)
            upper = self.regime_density(tuple(range(k + 1)), i, cut)
            g1 = upper @ w
            if k == 0:
                out = g1 @ self.rule.after(cut)
            else:
                out = np.einsum("...amb,ab->...am", g1, self.rule.tail_matrix(cut))
        else:
            out = self.gamma(i)
            tail = self.rule.after(cut)
            for j in sorted(set(range(n)) - set(S), reverse=True):
                # contract mark then time of slot j; later slots first keep axis indices valid
                out = np.tensordot(out, w, axes=([1 + 2 * j + 1], [0]))
                out = np.tensordot(out, tail, axes=([1 + 2 * j], [0]))
        self._cache[key] = out
        return out

    def head_integral(self, S: tuple, arr: np.ndarray, cut: int) -> np.ndarray:
        """Integrate a regime-S array over occurred times in [0, t_cut] and their marks."""
        k = len(S)
        w = self.marks.w
        out = arr
        if k == 0:
            return out
        if self.ordered:
            for j in range(k, 0, -1):
                out = out @ w
                if j == 1:
                    out = out @ self.rule.head(cut)
                else:
                    out = np.einsum("...amb,ab->...am", out, self.rule.head_matrix(cut))
            return out
        for _ in range(k):
            out = out @ w
            out = out @ self.rule.head(cut)
        return out

    def gamma0(self, i: int) -> np.ndarray:
        return self.regime_density((), i)

    def gamma11(self, i: int) -> np.ndarray:
        """Two names: name 1 defaulted at theta_1, name 2 alive."""
        if self.ordered:
            raise ValueError("gamma11 needs an unordered two-name family")
        return self.regime_density((0,), i)

    def gamma12(self, i: int) -> np.ndarray:
        """Two names: name 2 defaulted at theta_2, name 1 alive."""
        if self.ordered:
            raise ValueError("gamma12 needs an unordered two-name family")
        return self.regime_density((1,), i)

    def validate(self, tol: float = 1e-9) -> list[str]:
        """Structural checks: sign, support and (for pmf) normalization and ties."""
        out = []
        for i in (0, self.grid.N):
            if np.any(self.gamma(i) < -1e-15):
                out.append(f"density negative at level {i}")
        if self.rule.kind == "pmf":
            gT = np.abs(self.gamma(self.grid.N))
            for j in range(self.n):
                idx = [slice(None)] * gT.ndim
                idx[1 + 2 * j] = 0
                if gT[tuple(idx)].max(initial=0.0) > 0:
                    out.append("pmf mass at time 0 is not allowed")
                    break
            if self.ordered and self.n > 1:
                th = np.indices(gT.shape[1:])[0::2]
                bad = np.zeros(gT.shape[1:], dtype=bool)
                for j in range(self.n - 1):
                    bad |= th[j] > th[j + 1]
                if gT[:, bad].max(initial=0.0) > 0:
                    out.append("ordered density has mass off the ordered support")
            res = partition_check(self, 0.0)
            if np.max(res) > tol:
                out.append(f"partition residual {np.max(res):.3g} at t=0")
        return out

    def finite_ties(self) -> float:
        """Total terminal mass on scenarios where two defaults share a finite node."""
        g = self.gamma(self.grid.N) * self.mass_weights(self.n)[None]
        tot = 0.0
        Nf = self.grid.N
        idx = np.indices(g.shape[1:])
        th = [idx[2 * j] for j in range(self.n)]
        mask = np.zeros(g.shape[1:], dtype=bool)
        for a, b in itertools.combinations(range(self.n), 2):
            mask |= (th[a] == th[b]) & (th[a] <= Nf)
        tot = float(np.abs(g[:, mask]).sum())
        return tot


# ---------------------------------------------------------------------------
# builders


def pmf_density(grid: TimeGrid, marks: MarkSpace, masses, layout: Layout | None = None, backend=None,
                label: str = "pmf") -> DensityFamily:
    """Family from joint probability masses given the terminal F-node.

    Args:
        grid: time grid.
        marks: mark space; masses are divided by mark weights to give densities.
        masses: array (n_N, [N+2, M] * n) of P[theta, e | F_T] per terminal node, or
            (([N+2, M] * n)) for a trivial reference filtration.
        layout: default layout; ordered with n inferred when omitted.
        backend: FiniteTree; trivial when omitted.

    Returns:
        DensityFamily using the pmf rule.
    """
    masses = np.asarray(masses, dtype=float)
    backend = backend if backend is not None else FiniteTree.trivial(grid.N)
    if masses.ndim % 2 == 0:
        masses = masses[None]
    n = (masses.ndim - 1) // 2
    layout = layout if layout is not None else ordered_layout(n)
    fam = DensityFamily(grid, marks, layout, "pmf", backend, gamma_T=np.zeros_like(masses), label=label)
    mw = fam.mass_weights(n)[None]
    with np.errstate(divide="ignore", invalid="ignore"):
        gam = np.where(mw > 0, masses / np.where(mw > 0, mw, 1.0), 0.0)
    return DensityFamily(grid, marks, layout, "pmf", backend, gamma_T=gam, label=label)


def pmf_from_entries(grid: TimeGrid, marks: MarkSpace, entries: dict, layout: Layout | None = None) -> DensityFamily:
    """Trivial-filtration pmf family from ``{(theta_idx..., ): mass}`` or
    ``{((theta_idx...), (mark_idx...)): mass}`` entries (index N + 1 = after T)."""
    first = next(iter(entries))
    n = len(first[0]) if isinstance(first[0], tuple) else len(first)
    layout = layout if layout is not None else ordered_layout(n)
    arr = np.zeros((grid.N + 2, marks.M) * n)
    for key, mass in entries.items():
        if isinstance(key[0], tuple):
            th, ek = key
        else:
            th, ek = key, (0,) * n
        idx = tuple(v for pair in zip(th, ek) for v in pair)
        arr[idx] += mass
    return pmf_density(grid, marks, arr, layout)


def poisson_density(rate: float, n: int, grid: TimeGrid, marks: MarkSpace | None = None,
                    rule: str = "gregory") -> DensityFamily:
    """First n arrival times of a Poisson process with the given rate.

    On the ordered support the density of (theta_1..theta_m finite, rest after T)
    is rate^m exp(-rate * theta_n) when m = n and rate^m exp(-rate * T) otherwise.

    Args:
        rate: intensity.
        n: number of arrivals tracked.
        grid: time grid.
        marks: mark space (density does not depend on marks); single point if omitted.
        rule: default-time quadrature rule.
    """
    marks = marks if marks is not None else MarkSpace.single()
    th = grid.theta_values
    Th = len(th)
    shape = (Th, marks.M) * n
    g = np.zeros(shape)
    for combo in itertools.product(range(Th), repeat=n):
        if any(combo[j] > combo[j + 1] for j in range(n - 1)):
            continue
        finite = [c for c in combo if c <= grid.N]
        m = len(finite)
        if m < n and any(c <= grid.N for c in combo[m:]):
            continue
        val = rate**m * (np.exp(-rate * th[combo[-1]]) if m == n else np.exp(-rate * grid.T))
        sl = tuple(v for c in combo for v in (c, slice(None)))
        g[sl] = val
    return DensityFamily(grid, marks, ordered_layout(n), rule, gamma_T=g[None], label=f"poisson({rate},{n})")


def exponential_pmf(grid: TimeGrid, rate: float) -> np.ndarray:
    """Grid-discretized exponential default time: mass on nodes 1..N and after T."""
    t = grid.nodes
    p = np.zeros(grid.N + 2)
    p[1 : grid.N + 1] = np.exp(-rate * t[:-1]) - np.exp(-rate * t[1:])
    p[-1] = np.exp(-rate * grid.T)
    return p


def independent_product(grid: TimeGrid, marks: MarkSpace, factors, rule: str = "pmf", backend=None) -> DensityFamily:
    """Unordered names whose times and marks are independent.

    Args:
        grid: time grid.
        marks: shared mark space.
        factors: per name a pair (phi over the N + 2 default-time indices, psi over marks),
            psi being a density with respect to the mark weights.
        rule: quadrature rule.
        backend: optional backend; the density is deterministic.
    """
    n = len(factors)
    g = np.ones((1,) * (2 * n))
    for j, (phi, psi) in enumerate(factors):
        sh = [1] * (2 * n)
        sh[2 * j] = grid.N + 2
        g = g * np.asarray(phi, dtype=float).reshape(sh)
        sh = [1] * (2 * n)
        sh[2 * j + 1] = marks.M
        g = g * np.asarray(psi, dtype=float).reshape(sh)
    backend = backend if backend is not None else FiniteTree.trivial(grid.N)
    gT = np.broadcast_to(g[None], (backend.size(grid.N),) + g.shape).copy()
    layout = Layout(n, False) if n == 2 else ordered_layout(n)
    return DensityFamily(grid, marks, layout, rule, backend, gamma_T=gT, label="independent")


def reduce_to_ordered(family: DensityFamily) -> DensityFamily:
    """Rank two unordered names into ordered times with marks (index, mark).

    The reduced mark space has points (iota, e) and weights w(e); ties keep the
    original name order. Only the pmf rule is supported.
    """
    if family.ordered or family.rule.kind != "pmf":
        raise ValueError("reduction needs an unordered pmf family")
    M, Th = family.marks.M, family.grid.N + 2
    pts = [(float(i + 1),) + tuple(np.atleast_1d(family.marks.values[e])) for i in range(2) for e in range(M)]
    wts = [family.marks.weights[e] for _ in range(2) for e in range(M)]
    marks2 = MarkSpace(tuple(pts), tuple(wts), pmf=False)
    levels = []
    for i in range(family.grid.N + 1):
        g = family.gamma(i)
        out = np.zeros((g.shape[0], Th, 2 * M, Th, 2 * M))
        for a in range(Th):
            for b in range(a, Th):
                # first name 1 at a, name 2 at b (ties keep name 1 first)
                out[:, a, 0:M, b, M:2 * M] = g[:, a, :, b, :]
                if b > a:
                    out[:, a, M:2 * M, b, 0:M] = np.transpose(g[:, b, :, a, :], (0, 2, 1))
        levels.append(out)
    return DensityFamily(family.grid, marks2, ordered_layout(2), "pmf", family.backend, gamma_levels=levels,
                         label=family.label + "/ordered")


# ---------------------------------------------------------------------------
# operations


def grid_index(grid: TimeGrid, t: float) -> int:
    """Index of the grid node at time t; raises ValueError off-grid."""
    t = float(t)
    if not 0.0 <= t <= grid.T + 1e-12:
        raise ValueError(f"time {t} outside [0, {grid.T}]")
    i = int(round(t / grid.dt))
    if abs(grid.nodes[i] - t) > 1e-9 * max(1.0, grid.T):
        raise ValueError(f"time {t} is not a grid node")
    return i


@dataclass(frozen=True)
class IndexedDensity:
    """Survival density gamma^k of an ordered family, evaluated lazily per time."""

    family: "DensityFamily"
    k: int

    def at_level(self, i: int) -> np.ndarray:
        return self.family.regime_density(tuple(range(self.k)), i)

    def at(self, t: float) -> np.ndarray:
        """Array (n_nodes, [N+2, M] * k); for k = 0 the process P[tau_1 > t | F_t]."""
        return self.at_level(grid_index(self.family.grid, t))


def marginalize(family: DensityFamily, k: int) -> IndexedDensity:
    """Survival density gamma^k of an ordered family (results are cached by the family).

    Args:
        family: ordered family.
        k: 0 <= k < n.
    """
    if not 0 <= k < family.n:
        raise ValueError(f"k must be in [0, {family.n - 1}]")
    if not family.ordered:
        raise ValueError("marginalize applies to ordered families; use gamma11/gamma12")
    return IndexedDensity(family, k)


def survival_prob(family: DensityFamily, k: int, t: float) -> np.ndarray:
    """P[tau_{k+1} > t | F_t] per node, summing regimes with at most k defaults by t."""
    if not 0 <= k <= family.n - 1:
        raise ValueError(f"k must be in [0, {family.n - 1}]")
    level = grid_index(family.grid, t)
    total = 0.0
    for S in family.layout.regimes():
        if len(S) <= k:
            total = total + family.head_integral(S, family.regime_density(S, level), level)
    return np.asarray(total)


def partition_check(family: DensityFamily, t: float) -> np.ndarray:
    """Per-node |sum over regimes of occurred-mass - 1|."""
    level = grid_index(family.grid, t)
    total = 0.0
    for S in family.layout.regimes():
        total = total + family.head_integral(S, family.regime_density(S, level), level)
    return np.abs(np.asarray(total) - 1.0)


def martingale_check(family: DensityFamily) -> float:
    """Max over levels, nodes and scenarios of |E[gamma_{t+dt} | node] - gamma_t|."""
    if not isinstance(family.backend, FiniteTree):
        raise TypeError("martingale check needs an exact tree backend")
    worst = 0.0
    for i in range(family.grid.N):
        r = np.abs(family.backend.cond_exp(i, family.gamma(i + 1)) - family.gamma(i))
        worst = max(worst, float(r.max()) if r.size else 0.0)
    return worst
