"""Control problems under default times solved regime by regime on the reference filtration.

Each regime S (set of occurred defaults) has a value table V_S(x) per default
scenario (theta_S, e_S), defined from the time of the latest default in S. Tables
are computed from the full regime downwards; a regime's dynamic program couples
to the next regime through the jump map at every possible next default time.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from ._optim import TIE_RTOL, maximize
from .density import DensityFamily
from .model import (
    ControlProblemSpec,
    ControlSet,
    FiniteTree,
    Layout,
    MarkSpace,
    NumericalError,
    RegimeSpec,
    StateGrid,
    TimeGrid,
    ordered_layout,
    validate_spec,
)
from .projection import coupling_table, time_weights


@dataclass
class RegimeCells:
    """Default scenarios of one regime, flattened.

    Attributes:
        S: occurred slots.
        label: regime label.
        th: default-time indices per cell, shape (C, k).
        mk: mark indices per cell, shape (C, k).
        start: latest default index per cell.
        flat: flat index into the (theta, e) * k scenario array.
        index: dense scenario array -> cell id (-1 when not a cell).
        pos: position of each cell among cells with the same start.
        by_start: cell ids per start level.
    """

    S: tuple
    label: str
    th: np.ndarray
    mk: np.ndarray
    start: np.ndarray
    flat: np.ndarray
    index: np.ndarray
    pos: np.ndarray
    by_start: list

    @classmethod
    def build(cls, layout: Layout, S: tuple, N: int, M: int) -> "RegimeCells":
        k = len(S)
        Th = N + 2
        combos = []
        for ths in itertools.product(range(N + 1), repeat=k):
            if layout.ordered and any(ths[p] > ths[p + 1] for p in range(k - 1)):
                continue
            for mks in itertools.product(range(M), repeat=k):
                combos.append((ths, mks))
        C = len(combos)
        th = np.array([c[0] for c in combos], dtype=int).reshape(C, k)
        mk = np.array([c[1] for c in combos], dtype=int).reshape(C, k)
        start = th.max(axis=1) if k else np.zeros(C, dtype=int)
        shape = (Th, M) * k
        coords = np.empty((C, 2 * k), dtype=int)
        coords[:, 0::2], coords[:, 1::2] = th, mk
        flat = np.ravel_multi_index(tuple(coords.T), shape) if k else np.zeros(C, dtype=int)
        index = np.full(shape, -1, dtype=int)
        if k:
            index[tuple(coords.T)] = np.arange(C)
        else:
            index[()] = 0
        by_start = [np.nonzero(start == i)[0] for i in range(N + 1)]
        pos = np.zeros(C, dtype=int)
        for ids in by_start:
            pos[ids] = np.arange(len(ids))
        return cls(S, layout.label(S), th, mk, start, flat, index, pos, by_start)

    def child(self, other: "RegimeCells", ids: np.ndarray, slot: int, theta: int, mark: int) -> np.ndarray:
        """Cell ids in ``other`` (this regime plus ``slot``) after slot defaults at (theta, mark)."""
        p = other.S.index(slot)
        th = np.insert(self.th[ids], p, theta, axis=1)
        mk = np.insert(self.mk[ids], p, mark, axis=1)
        coords = np.empty((len(ids), 2 * len(other.S)), dtype=int)
        coords[:, 0::2], coords[:, 1::2] = th, mk
        return other.index[tuple(coords.T)]


@dataclass
class ValueFamily:
    """Value tables of every regime and the argmax policy tables.

    Attributes:
        layout: regime layout.
        grid: time grid.
        marks: mark space.
        state_grid: state grid.
        cells: regime label -> RegimeCells.
        entry: regime label -> per level array (n_i, C_i, G) for cells entered at level i.
        policy: regime label -> per level (active cell ids, controls (n_i, A, G[, d])) or None.
        V0: top value table on the state grid (node 0, level 0).
        v0: top value at the initial state.
        clamped: count of state queries clamped at the grid bounds.
    """

    layout: Layout
    grid: TimeGrid
    marks: MarkSpace
    state_grid: StateGrid
    cells: dict
    entry: dict
    policy: dict
    V0: np.ndarray
    v0: float
    clamped: int = 0
    time_rule: str = "left"

    def layer(self, label: str, theta_idx: tuple = (), mark_idx: tuple = (), node: int = 0) -> np.ndarray:
        """Value table V_S(., theta, e) on the state grid at the latest default time."""
        cs = self.cells[label]
        if len(theta_idx) != len(cs.S):
            raise ValueError(f"regime {label} needs {len(cs.S)} default times")
        mark_idx = tuple(mark_idx) if mark_idx else (0,) * len(cs.S)
        coords = tuple(v for pair in zip(theta_idx, mark_idx) for v in pair)
        c = int(cs.index[coords]) if coords else 0
        if c < 0:
            raise KeyError(f"no scenario {coords} in regime {label}")
        return self.entry[label][int(cs.start[c])][node, cs.pos[c]]

    @property
    def labels(self) -> list:
        return self.layout.labels()


@dataclass
class ConcatenatedPolicy:
    """Concatenation of per-regime feedback controls.

    Either tables from a solve (per level, active cells, grid nodes) or feedback
    maps ``(t, x, thetas, marks) -> control`` per regime label.
    """

    layout: Layout
    maps: dict = field(default_factory=dict)
    tables: dict | None = None
    cells: dict | None = None
    state_grid: StateGrid | None = None
    grid: TimeGrid | None = None

    @classmethod
    def constant(cls, layout: Layout, values: dict) -> "ConcatenatedPolicy":
        """Constant control per regime label."""
        return cls(layout, {lab: (lambda t, x, th, mk, v=v: v) for lab, v in values.items()})

    def on_cells(self, label: str, i: int, ids: np.ndarray, ctx_t: float, x, thetas, marks, shape):
        """Controls over (node, cells, state) for the solver's evaluation mode."""
        if self.tables is not None and label in self.tables:
            lv = self.tables[label][i]
            if lv is not None:
                tid, arr = lv
                if np.array_equal(tid, ids):
                    return arr
                raise ValueError("policy tables do not match the scenario cells")
        if label in self.maps:
            v = np.asarray(self.maps[label](ctx_t, x, thetas, marks), dtype=float)
            return v
        raise KeyError(f"policy has no component for regime {label}")

    def __call__(self, label: str, i: int, x, theta_idx=(), mark_idx=(), node=0, mark_values=None):
        """Control at level i for states, scenarios and F-nodes (vectorized over paths).

        Tables are read at the nearest state node. ``theta_idx`` and ``mark_idx`` hold
        one int or array per occurred slot; feedback maps receive default times and
        ``mark_values`` (mark indices when omitted).
        """
        x = np.asarray(x, dtype=float)
        if self.tables is not None and label in self.tables and self.tables[label][i] is not None:
            cs = self.cells[label]
            mks = mark_idx if len(mark_idx) else (0,) * len(theta_idx)
            coords = tuple(np.asarray(v) for pair in zip(theta_idx, mks) for v in pair)
            c = cs.index[coords] if coords else np.zeros(x.shape, dtype=int)
            tid, arr = self.tables[label][i]
            p = np.clip(np.searchsorted(tid, c), 0, len(tid) - 1)
            if np.any(tid[p] != c):
                raise KeyError("scenario not active at this level")
            j = self.state_grid.nearest(x)
            return arr[np.asarray(node), p, j]
        t = self.grid.time(i) if self.grid is not None else float(i)
        th = tuple(self.grid.theta_values[np.asarray(k)] if self.grid is not None else k for k in theta_idx)
        mk = tuple(mark_values) if mark_values is not None else tuple(mark_idx)
        return self.maps[label](t, x, th, mk)


# ---------------------------------------------------------------------------
# the layered dynamic program


class _LayeredDP:
    def __init__(self, spec: ControlProblemSpec, family: DensityFamily, state_grid: StateGrid,
                 time_rule: str = "left", policy: ConcatenatedPolicy | None = None, tol: float = 1e-8,
                 store_policy: bool = True):
        self.spec, self.fam, self.sg = spec, family, state_grid
        self.grid, self.marks, self.lay = family.grid, family.marks, family.layout
        self.be = family.backend
        self.om = time_weights(self.grid, time_rule)
        self.Cw = coupling_table(family)
        self.policy, self.tol, self.store_policy = policy, tol, store_policy
        self.time_rule = time_rule
        N, M = self.grid.N, self.marks.M
        self.cells = {self.lay.label(S): RegimeCells.build(self.lay, S, N, M) for S in self.lay.regimes()}
        self.entry: dict = {}
        self.tables: dict = {}
        self.clamped = 0
        self.x = state_grid.nodes[None, None, :]
        vals = self.marks.values
        self.mark_vals = vals

    # scenario views
    def _scen(self, cs: RegimeCells, ids):
        th = tuple(self.grid.theta_values[cs.th[ids, p]][None, :, None] for p in range(len(cs.S)))
        if self.mark_vals.ndim == 1:
            mk = tuple(self.mark_vals[cs.mk[ids, p]][None, :, None] for p in range(len(cs.S)))
        else:
            mk = tuple(self.mark_vals[cs.mk[ids, p]][None, :, None, :] for p in range(len(cs.S)))
        return th, mk

    def _gamma(self, S, cs, i, ids):
        g = self.fam.regime_density(S, i)
        return g.reshape(g.shape[0], -1)[:, cs.flat[ids]][:, :, None]

    def _branches(self, i):
        be = self.be
        if isinstance(be, FiniteTree):
            ch, p, dw = be.children[i], be.probs[i], be.dw[i]
            for b in range(ch.shape[1]):
                yield ch[:, b], p[:, b], dw[:, b, 0]
        else:
            yield np.arange(be.size(i)), None, be.increments[i][:, 0]

    def run(self) -> ValueFamily:
        for S in sorted(self.lay.regimes(), key=len, reverse=True):
            self._solve_regime(S)
        top = self.entry[self.lay.label(())][0]
        V0 = np.asarray(top[:, 0, :].mean(axis=0))
        v0, _ = self.sg.interp(V0, np.array([self.spec.x0]))
        return ValueFamily(self.lay, self.grid, self.marks, self.sg, self.cells, self.entry,
                           self.tables if self.store_policy else {}, V0, float(v0[0]), self.clamped, self.time_rule)

    def _solve_regime(self, S):
        lay, grid, sg = self.lay, self.grid, self.sg
        N, G = grid.N, sg.size
        lab = lay.label(S)
        cs = self.cells[lab]
        reg: RegimeSpec = self.spec.regime(S)
        C = len(cs.start)
        entries = [None] * (N + 1)
        tables = [None] * (N + 1)
        W_next = None
        nexts = [j for (j,) in lay.next_sets(S)]
        for i in range(N, -1, -1):
            n_i = self.be.size(i)
            ids = np.nonzero(cs.start <= i)[0]
            W = np.zeros((n_i, C, G))
            if len(ids):
                obj = self._objective(S, cs, reg, i, ids, W_next, nexts)
                shape = (n_i, len(ids), G)
                if i == N and self.om[N] == 0.0:
                    a = _first_control(reg.controls)
                elif self.policy is not None:
                    th, mk = self._scen(cs, ids)
                    a = self.policy.on_cells(lab, i, ids, grid.time(i), self.x, th, mk, shape)
                    _check_controls(a, reg.controls, lab)
                else:
                    a, _ = maximize(obj, reg.controls, self.tol)
                val = np.broadcast_to(obj(a, count=True), shape)
                if not np.all(np.isfinite(val)):
                    raise NumericalError(f"non-finite value in regime {lab} at level {i}")
                W[:, ids] = val
                if self.store_policy and not (i == N and self.om[N] == 0.0):
                    a_arr = np.asarray(a, dtype=float)
                    extra = (reg.controls.dim,) if reg.controls.dim > 1 else ()
                    tables[i] = (ids, np.broadcast_to(a_arr, shape + extra).copy())
            entries[i] = W[:, cs.by_start[i]].copy()
            W_next = W
        self.entry[lab] = entries
        self.tables[lab] = tables

    def _objective(self, S, cs, reg, i, ids, W_next, nexts):
        grid, sg, lay = self.grid, self.sg, self.lay
        N = grid.N
        t = grid.time(i)
        x = self.x
        th, mk = self._scen(cs, ids)
        gam = self._gamma(S, cs, i, ids)
        om = self.om[i]
        w = self.marks.w
        M = self.marks.M
        start = cs.start[ids]
        # jump targets for the next default at node i + 1 (and at node i for quadrature ties)
        jumps = []
        imm = []
        for j in nexts:
            T = tuple(sorted(S + (j,)))
            tc = self.cells[lay.label(T)]
            jl = lay.jump_label(S, j)
            if i < N:
                cw = self.Cw[start, i + 1]
                if np.any(cw != 0):
                    rows = [tc.pos[cs.child(tc, ids, j, i + 1, e)] for e in range(M)]
                    jumps.append((self.spec.jumps[jl], cw, self.entry[lay.label(T)][i + 1], rows))
            cw0 = np.where(start == i, self.Cw[np.minimum(start, N), i], 0.0)
            if np.any(cw0 != 0):
                rows = [tc.pos[cs.child(tc, ids, j, i, e)] for e in range(M)]
                imm.append((self.spec.jumps[jl], cw0, self.entry[lay.label(T)][i], rows))
        is_tree = isinstance(self.be, FiniteTree)
        t1 = grid.time(i + 1) if i < N else None
        Wn = W_next[:, ids] if W_next is not None else None

        def obj(a, count=False):
            val = om * np.asarray(reg.running_gain(t, x, a, th, mk), dtype=float) * gam
            if i == N:
                return val + np.asarray(reg.terminal_gain(x, th, mk), dtype=float) * gam
            b = np.asarray(reg.drift(t, x, a, th, mk), dtype=float)
            s = np.asarray(reg.vol(t, x, a, th, mk), dtype=float)
            cont_total = 0.0
            for ch, p, dw in self._branches(i):
                xn = x + b * grid.dt + s * dw[:, None, None]
                v, c = sg.interp(Wn[ch], xn)
                if count:
                    self.clamped += c
                for gmap, cw, table, rows in jumps:
                    acc = 0.0
                    for e in range(M):
                        xj = np.asarray(gmap(t1, xn, a, self.mark_vals[e]), dtype=float)
                        vj, c = sg.interp(table[ch][:, rows[e]], xj)
                        if count:
                            self.clamped += c
                        acc = acc + w[e] * vj
                    v = v + cw[None, :, None] * acc
                if is_tree:
                    cont_total = cont_total + p[:, None, None] * v
                else:
                    cont_total = self.be.cond_exp(i, v)
            val = val + cont_total
            for gmap, cw0, table, rows in imm:
                acc = 0.0
                for e in range(M):
                    xj = np.asarray(gmap(t, x, a, self.mark_vals[e]), dtype=float)
                    vj, c = sg.interp(table[:, rows[e]], xj)
                    if count:
                        self.clamped += c
                    acc = acc + w[e] * vj
                val = val + cw0[None, :, None] * acc
            return val

        return obj


def _first_control(cs: ControlSet):
    if cs.kind == "finite":
        return np.asarray(cs.points[0], dtype=float)
    if cs.kind in ("interval", "box"):
        lo = np.asarray(cs.lower, dtype=float)
        return lo[0] if cs.dim == 1 else lo
    return np.zeros(cs.dim) if cs.dim > 1 else np.asarray(0.0)


def _check_controls(a, cs: ControlSet, lab: str):
    a = np.asarray(a, dtype=float)
    if cs.kind == "unconstrained":
        return
    if cs.kind == "finite":
        pts = cs.array.reshape(len(cs.points), -1)
        flat = a.reshape(-1, cs.dim) if cs.dim > 1 else a.reshape(-1, 1)
        d = np.min(np.max(np.abs(flat[:, None, :] - pts[None]), axis=2), axis=1)
        ok = np.all(d <= 1e-12)
    else:
        lo, hi = np.asarray(cs.lower), np.asarray(cs.upper)
        ok = np.all(a >= lo - 1e-12) and np.all(a <= hi + 1e-12)
    if not ok:
        raise ValueError(f"policy for regime {lab} leaves its control set")


def _prepare(spec: ControlProblemSpec, family: DensityFamily, grid, marks, state_grid, need_ordered: bool):
    if grid is not None and (abs(grid.T - family.grid.T) > 1e-12 or grid.N != family.grid.N):
        raise ValueError("time grid differs from the density family")
    if marks is not None and marks != family.marks:
        raise ValueError("mark space differs from the density family")
    if spec.layout != family.layout:
        raise ValueError("problem layout differs from the density family layout")
    if need_ordered != family.ordered:
        raise ValueError("wrong layout for this solver")
    if state_grid is None:
        raise ValueError("a state grid is required")
    rep = validate_spec(spec, family.grid, family.marks, state_grid)
    if not rep.ok:
        raise ValueError("; ".join(rep.violations))
    if family.rule.kind == "pmf" and family.n > 1 and family.finite_ties() > 0:
        raise ValueError("simultaneous defaults at a grid node are not supported by the control solvers")
    if isinstance(family.backend, FiniteTree) and family.backend.dims != 1:
        raise ValueError("the control solvers use one-dimensional reference noise")


def solve_ordered(spec: ControlProblemSpec, family: DensityFamily, grid: TimeGrid | None = None,
                  marks: MarkSpace | None = None, state_grid: StateGrid | None = None, time_rule: str = "left",
                  tol: float = 1e-8, store_policy: bool = True) -> ValueFamily:
    """Value of the control problem with n ordered default times.

    Args:
        spec: control problem (ordered layout).
        family: ordered density family.
        grid: optional time grid (checked against the family).
        marks: optional mark space (checked against the family).
        state_grid: state grid for value tables.
        time_rule: running-gain time rule.
        tol: control tolerance for continuous sets.
        store_policy: keep argmax tables.

    Returns:
        ValueFamily with the top value ``v0`` at ``spec.x0``.
    """
    _prepare(spec, family, grid, marks, state_grid, True)
    return _LayeredDP(spec, family, state_grid, time_rule, None, tol, store_policy).run()


def solve_two_unordered(spec2: ControlProblemSpec, family: DensityFamily, grid: TimeGrid | None = None,
                        marks: MarkSpace | None = None, state_grid: StateGrid | None = None,
                        time_rule: str = "left", tol: float = 1e-8, store_policy: bool = True) -> ValueFamily:
    """Value of the control problem with two unordered names (regimes 0, 1,1, 1,2, 2)."""
    _prepare(spec2, family, grid, marks, state_grid, False)
    return _LayeredDP(spec2, family, state_grid, time_rule, None, tol, store_policy).run()


def extract_policy(vf: ValueFamily) -> ConcatenatedPolicy:
    """Concatenated policy from the argmax tables of a solve."""
    if not vf.policy:
        raise ValueError("value family carries no policy tables")
    return ConcatenatedPolicy(vf.layout, {}, vf.policy, vf.cells, vf.state_grid, vf.grid)


def evaluate_policy(policy: ConcatenatedPolicy, spec: ControlProblemSpec, family: DensityFamily,
                    state_grid: StateGrid, time_rule: str = "left") -> float:
    """Gain of a fixed policy at the initial state (controls read at state-grid nodes)."""
    _prepare(spec, family, None, None, state_grid, family.ordered)
    return _LayeredDP(spec, family, state_grid, time_rule, policy, store_policy=False).run().v0


def evaluate_policy_family(policy: ConcatenatedPolicy, spec: ControlProblemSpec, family: DensityFamily,
                           state_grid: StateGrid, time_rule: str = "left") -> ValueFamily:
    """Like evaluate_policy but returns every value table."""
    _prepare(spec, family, None, None, state_grid, family.ordered)
    return _LayeredDP(spec, family, state_grid, time_rule, policy, store_policy=False).run()


# ---------------------------------------------------------------------------
# reference instance


def d1_instance(rate: float = 0.3, loss: float = 0.5, controls=(0.0, 1.0), masses=(0.3, 0.3, 0.4)):
    """Two-step, one-default instance with a deterministic reference filtration.

    Before default the state gains ``rate * a`` per step; the default costs
    ``loss * a``; afterwards nothing moves. Terminal gain x, x0 = 1.

    Returns:
        (spec, family, state_grid).
    """
    from .density import pmf_from_entries

    grid = TimeGrid(2.0, 2)
    marks = MarkSpace.single()
    lay = ordered_layout(1)
    fam = pmf_from_entries(grid, marks, {(1,): masses[0], (2,): masses[1], (3,): masses[2]}, lay)
    term = lambda x, th, mk: x
    regs = {
        "0": RegimeSpec(drift=lambda t, x, a, th, mk: rate * a, terminal_gain=term,
                        controls=ControlSet.finite(controls)),
        "1": RegimeSpec(terminal_gain=term, controls=ControlSet.finite([0.0])),
    }
    spec = ControlProblemSpec(grid, lay, regs, {"1": lambda t, x, a, e: x - loss * a}, x0=1.0)
    return spec, fam, StateGrid(0.0, 3.0, 31)
