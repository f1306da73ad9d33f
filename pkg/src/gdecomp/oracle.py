"""Exhaustive dynamic programming on the full information tree of small instances.

The oracle never uses survival densities: it conditions the joint scenario masses
on each (time, reference node, default history) directly and optimizes controls
at every such node. It certifies the regime-by-regime solver on finite instances.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from ._optim import TIE_RTOL
from .decompose import ValueFamily, solve_ordered, solve_two_unordered
from .density import DensityFamily, partition_check, pmf_density
from .model import (
    ControlProblemSpec,
    ControlSet,
    FiniteTree,
    Layout,
    MarkSpace,
    RegimeSpec,
    StateGrid,
    TimeGrid,
    TWO_NAMES,
    ordered_layout,
)
from .projection import time_weights

DEFAULT_BUDGET = 10**7


class BudgetExceeded(RuntimeError):
    """The instance is too large for exhaustive search."""


@dataclass
class DiscreteModel:
    """Finite instance: small grid, finite tree, pmf density, finite controls.

    Attributes:
        spec: control problem.
        family: pmf density family on a FiniteTree.
        state_grid: state grid (value tables and interpolation).
        budget: cap on F-paths x default scenarios x control choices.
        label: free-form tag.
    """

    spec: ControlProblemSpec
    family: DensityFamily
    state_grid: StateGrid
    budget: int = DEFAULT_BUDGET
    label: str = "model"

    def check(self):
        fam = self.family
        if fam.grid.N > 6:
            raise ValueError("oracle instances need at most 6 time steps")
        if fam.rule.kind != "pmf" or not isinstance(fam.backend, FiniteTree):
            raise ValueError("oracle instances need a pmf family on a finite tree")
        for lab, reg in self.spec.regimes.items():
            if reg.controls.kind != "finite":
                raise ValueError(f"regime {lab}: oracle needs finite control sets")
        if self.size() > self.budget:
            raise BudgetExceeded(f"instance size {self.size()} exceeds budget {self.budget}")

    def size(self) -> int:
        fam = self.family
        n_paths = fam.backend.size(fam.grid.N) if _is_tree_like(fam.backend) else 0
        n_scen = int(np.count_nonzero(np.any(fam.gamma(fam.grid.N) != 0, axis=0)))
        k = max(len(r.controls.points) for r in self.spec.regimes.values())
        return n_paths * max(n_scen, 1) * k ** fam.grid.N


def _is_tree_like(be) -> bool:
    return isinstance(be, FiniteTree)


class _GTree:
    """Scenario masses conditioned on (level, node, history) via the tree's own tower."""

    def __init__(self, m: DiscreteModel):
        self.m = m
        fam = m.family
        self.fam, self.grid, self.spec = fam, fam.grid, m.spec
        self.tree: FiniteTree = fam.backend
        self.lay: Layout = fam.layout
        N, n = self.grid.N, fam.n
        gT = fam.gamma(N)
        mw = fam.mass_weights(n)[None]
        massT = gT * mw
        support = np.argwhere(np.any(massT != 0, axis=0))
        self.scen = [tuple(int(v) for v in c) for c in support]
        self.theta = np.array([c[0::2] for c in self.scen], dtype=int).reshape(len(self.scen), n)
        self.emk = np.array([c[1::2] for c in self.scen], dtype=int).reshape(len(self.scen), n)
        mass = [None] * (N + 1)
        mass[N] = np.stack([massT[(slice(None),) + c] for c in self.scen], axis=1) if self.scen else np.zeros((gT.shape[0], 0))
        for i in range(N - 1, -1, -1):
            ch, p = self.tree.children[i], self.tree.probs[i]
            acc = np.zeros((ch.shape[0], len(self.scen)))
            for b in range(ch.shape[1]):
                acc += p[:, b, None] * mass[i + 1][ch[:, b]]
            mass[i] = acc
        self.mass = mass
        # history of each scenario at each level
        self.hist = []
        for i in range(N + 1):
            hs = []
            for s in range(len(self.scen)):
                hs.append(tuple((int(self.theta[s, j]), int(self.emk[s, j])) if self.theta[s, j] <= i else None
                                for j in range(n)))
            self.hist.append(hs)
        self.groups = []
        for i in range(N + 1):
            g: dict = {}
            for s, h in enumerate(self.hist[i]):
                g.setdefault(h, []).append(s)
            self.groups.append({h: np.array(v) for h, v in g.items()})
        self.om = time_weights(self.grid, "left")
        self.x = m.state_grid.nodes

    def hmass(self, i: int, node: int, h) -> float:
        ids = self.groups[i].get(h)
        return 0.0 if ids is None else float(self.mass[i][node, ids].sum())

    def regime(self, h):
        occ = tuple(j for j in range(self.fam.n) if h[j] is not None)
        th = tuple(self.grid.theta_values[h[j][0]] for j in occ)
        vals = self.fam.marks.values
        mk = tuple(vals[h[j][1]] for j in occ)
        return occ, th, mk

    def successors(self, i: int, h):
        """Histories at i + 1 reachable from h with their scenario ids."""
        ids = self.groups[i][h]
        out: dict = {}
        for s in ids:
            out.setdefault(self.hist[i + 1][s], []).append(s)
        return {k: np.array(v) for k, v in out.items()}


def _new_slots(h, h2):
    return [j for j in range(len(h)) if h[j] is None and h2[j] is not None]


class _Brute(_GTree):
    def __init__(self, m: DiscreteModel):
        super().__init__(m)
        self.memo: dict = {}
        self.arg: dict = {}

    def value(self, i: int, node: int, h) -> np.ndarray:
        key = (i, node, h)
        if key in self.memo:
            return self.memo[key]
        spec, grid, sg = self.spec, self.grid, self.m.state_grid
        S, th, mk = self.regime(h)
        reg: RegimeSpec = spec.regime(S)
        x = self.x
        t = grid.time(i)
        N = grid.N
        base = self.hmass(i, node, h)
        best_v = best_a = None
        succ = self.successors(i, h) if i < N else {}
        for a in reg.controls.points:
            a = np.asarray(a, dtype=float)
            v = self.om[i] * np.broadcast_to(np.asarray(reg.running_gain(t, x, a, th, mk), dtype=float), x.shape)
            if i == N:
                v = v + np.broadcast_to(np.asarray(reg.terminal_gain(x, th, mk), dtype=float), x.shape)
            else:
                b = np.asarray(reg.drift(t, x, a, th, mk), dtype=float)
                s = np.asarray(reg.vol(t, x, a, th, mk), dtype=float)
                ch, p, dw = self.tree.children[i], self.tree.probs[i], self.tree.dw[i]
                for br in range(ch.shape[1]):
                    c = int(ch[node, br])
                    xn = np.broadcast_to(x + b * grid.dt + s * dw[node, br, 0], x.shape)
                    for h2, ids in succ.items():
                        pm = float(self.mass[i + 1][c, ids].sum())
                        if pm == 0.0:
                            continue
                        q = p[node, br] * pm / base
                        xj = xn
                        for j in _new_slots(h, h2):
                            S_now = tuple(k for k in range(len(h)) if h[k] is not None)
                            gmap = spec.jumps[self.lay.jump_label(S_now, j)]
                            xj = np.broadcast_to(np.asarray(gmap(grid.time(i + 1), xj, a,
                                                                 self.fam.marks.values[h2[j][1]]), dtype=float), x.shape)
                        u, _ = sg.interp(self.value(i + 1, c, h2), xj)
                        v = v + q * u
            if best_v is None:
                best_v, best_a = v.copy(), np.broadcast_to(a, x.shape + a.shape).copy()
            else:
                better = v > best_v + TIE_RTOL * (1.0 + np.abs(best_v))
                best_v = np.where(better, v, best_v)
                best_a = np.where(better.reshape(better.shape + (1,) * a.ndim), a, best_a)
        self.memo[key] = best_v
        self.arg[key] = best_a
        return best_v


def brute_force_value(m: DiscreteModel) -> float:
    """Exact value at the initial state by dynamic programming over (time, node, history).

    Controls are chosen per information-tree node and state-grid point; off-grid
    states are interpolated exactly as in the regime solver.
    """
    m.check()
    br = _Brute(m)
    top = br.value(0, 0, (None,) * m.family.n)
    v, _ = m.state_grid.interp(top, np.array([m.spec.x0]))
    return float(v[0])


def pure_enumeration_value(m: DiscreteModel) -> float:
    """Value by searching every adapted control choice with exact (ungridded) states.

    Only for N <= 3; the state is carried exactly along each branch, so no grid
    or interpolation enters.
    """
    m.check()
    g = _GTree(m)
    N = g.grid.N
    if N > 3:
        raise ValueError("pure enumeration is limited to three steps")
    spec, grid = g.spec, g.grid

    def rec(i, node, h, x):
        S, th, mk = g.regime(h)
        reg = spec.regime(S)
        t = grid.time(i)
        base = g.hmass(i, node, h)
        best = None
        succ = g.successors(i, h) if i < N else {}
        for a in reg.controls.points:
            a = np.asarray(a, dtype=float)
            v = g.om[i] * float(np.asarray(reg.running_gain(t, x, a, th, mk)))
            if i == N:
                v += float(np.asarray(reg.terminal_gain(x, th, mk)))
            else:
                b = float(np.asarray(reg.drift(t, x, a, th, mk)))
                s = float(np.asarray(reg.vol(t, x, a, th, mk)))
                ch, p, dw = g.tree.children[i], g.tree.probs[i], g.tree.dw[i]
                for br in range(ch.shape[1]):
                    c = int(ch[node, br])
                    xn = x + b * grid.dt + s * dw[node, br, 0]
                    for h2, ids in succ.items():
                        pm = float(g.mass[i + 1][c, ids].sum())
                        if pm == 0.0:
                            continue
                        xj = xn
                        for j in _new_slots(h, h2):
                            S_now = tuple(k for k in range(len(h)) if h[k] is not None)
                            gmap = spec.jumps[g.lay.jump_label(S_now, j)]
                            xj = float(np.asarray(gmap(grid.time(i + 1), xj, a, g.fam.marks.values[h2[j][1]])))
                        v += p[node, br] * pm / base * rec(i + 1, c, h2, xj)
            if best is None or v > best + TIE_RTOL * (1.0 + abs(best)):
                best = v
        return best

    return float(rec(0, 0, (None,) * g.fam.n, float(spec.x0)))


@dataclass
class CompareReport:
    """Oracle versus regime-solver comparison.

    Attributes:
        v_brute: oracle value.
        v_decomposed: regime-solver value.
        abs_diff: |v_brute - v_decomposed|.
        layer_diffs: regime label -> max normalized table difference.
        policy_agreement: fraction of (positive-mass node, state) pairs with equal argmax.
        partition_residual: max partition residual of the density at t = 0.
        ok: comparison ran and abs_diff within tolerance.
        flags: validation messages (a flagged report skips the comparison).
    """

    v_brute: float | None
    v_decomposed: float | None
    abs_diff: float | None
    layer_diffs: dict = field(default_factory=dict)
    policy_agreement: float | None = None
    partition_residual: float = 0.0
    ok: bool = False
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "v_brute": self.v_brute,
            "v_decomposed": self.v_decomposed,
            "abs_diff": self.abs_diff,
            "layer_diffs": dict(sorted(self.layer_diffs.items())),
            "policy_agreement": self.policy_agreement,
            "partition_residual": self.partition_residual,
            "ok": self.ok,
            "flags": list(self.flags),
        }


def compare(m: DiscreteModel, tol: float = 1e-10, partition_tol: float = 1e-9) -> CompareReport:
    """Run both solvers and compare values, layers and policies."""
    res = float(np.max(partition_check(m.family, 0.0)))
    if res > partition_tol:
        return CompareReport(None, None, None, partition_residual=res,
                             flags=[f"partition residual {res:.3g} exceeds {partition_tol:g}"])
    m.check()
    br = _Brute(m)
    n = m.family.n
    top = br.value(0, 0, (None,) * n)
    vb = float(m.state_grid.interp(top, np.array([m.spec.x0]))[0][0])
    solver = solve_ordered if m.family.ordered else solve_two_unordered
    vf: ValueFamily = solver(m.spec, m.family, state_grid=m.state_grid)
    diffs, agree, total = _layer_and_policy(br, vf)
    rep = CompareReport(vb, vf.v0, abs(vb - vf.v0), diffs, agree / total if total else 1.0, res)
    rep.ok = rep.abs_diff <= tol
    return rep


def _layer_and_policy(br: _Brute, vf: ValueFamily):
    lay, fam = br.lay, br.fam
    w = fam.marks.w
    diffs: dict = {lab: 0.0 for lab in lay.labels()}
    agree = total = 0
    for (i, node, h), U in br.memo.items():
        base = br.hmass(i, node, h)
        if base <= 0:
            continue
        S, _, _ = br.regime(h)
        lab = lay.label(S)
        cs = vf.cells[lab]
        coords = tuple(v for j in S for v in h[j])
        c = int(cs.index[coords]) if coords else 0
        dens = base / float(np.prod([w[h[j][1]] for j in S])) if S else base
        if int(cs.start[c]) == i:
            W = vf.entry[lab][i][node, cs.pos[c]]
            diffs[lab] = max(diffs[lab], float(np.max(np.abs(W / dens - U))))
        tab = vf.policy.get(lab, [None] * (i + 1))[i] if vf.policy else None
        if tab is not None:
            ids, arr = tab
            p = int(np.searchsorted(ids, c))
            a_dec = arr[node, p]
            a_or = br.arg[(i, node, h)]
            eq = np.all(np.abs(np.asarray(a_dec) - a_or).reshape(len(br.x), -1) <= 1e-12, axis=1)
            agree += int(eq.sum())
            total += eq.size
    return diffs, agree, total


# ---------------------------------------------------------------------------
# random instances


def random_instance(seed: int, two_names: bool = False, symmetric: bool = False, N: int | None = None,
                    n: int | None = None) -> DiscreteModel:
    """Seeded finite instance whose states stay on a lattice inside the state grid.

    Dynamics: drift h*m and volatility h*s with m in {-1, 0, 1}, s in {0, 1}, on a
    binary non-recombining tree with increments +-1 and random branch probabilities
    in [0.2, 0.8]; jumps move the state by h*j with j in {-2, ..., 2}; gains are
    nonnegative tables on the state grid scaled by the default scenario. The grid
    [-6, 6] with h = 0.5 contains every reachable state.

    Args:
        seed: RNG seed.
        two_names: unordered two-name layout.
        symmetric: two-name instance symmetric under swapping names.
        N: steps (2 or 3 by default).
        n: ordered default count (1 or 2 by default).
    """
    rng = np.random.default_rng(seed)
    N = int(N if N is not None else rng.integers(2, 4))
    h = 0.5
    grid = TimeGrid(float(N), N)
    sg = StateGrid(-6.0, 6.0, 25)
    M = int(rng.integers(1, 4))
    mw = rng.dirichlet(np.ones(M))
    marks = MarkSpace(tuple(float(e) for e in range(M)), tuple(float(v) for v in mw))
    tree = FiniteTree.from_branching(N, lambda i, j, r=rng: (lambda p: [p, 1.0 - p])(float(r.uniform(0.2, 0.8))),
                                     [-1.0, 1.0])
    if two_names:
        lay = TWO_NAMES
    else:
        lay = ordered_layout(int(n if n is not None else rng.integers(1, 3)))
    nn = lay.n
    Th = N + 2
    # scenario masses per terminal node
    cells = []
    for ths in itertools.product(list(range(1, N + 1)) + [N + 1], repeat=nn):
        fin = [t for t in ths if t <= N]
        if lay.ordered:
            if any(ths[j] > ths[j + 1] for j in range(nn - 1)):
                continue
        if len(set(fin)) < len(fin):
            continue
        cells.append(ths)
    nT = tree.size(N)
    masses = np.zeros((nT,) + (Th, M) * nn)
    for leaf in range(nT):
        p = rng.dirichlet(np.ones(len(cells)))
        for ths, pc in zip(cells, p):
            ep = rng.dirichlet(np.ones(M), size=nn)
            for es in itertools.product(range(M), repeat=nn):
                idx = (leaf,) + tuple(v for pair in zip(ths, es) for v in pair)
                masses[idx] += pc * float(np.prod([ep[j][es[j]] for j in range(nn)]))
    if symmetric and two_names:
        masses = 0.5 * (masses + np.transpose(masses, (0, 3, 4, 1, 2)))
    fam = pmf_density(grid, marks, masses, lay, tree, label=f"random{seed}")

    def regime_tables():
        K = int(rng.integers(1, 4))
        pts = tuple(float(k) for k in range(K))
        mt = rng.integers(-1, 2, size=(K, N + 1)).astype(float)
        st = rng.integers(0, 2, size=(K, N + 1)).astype(float)
        ft = rng.uniform(0.0, 1.0, size=(K, sg.size))
        gt = rng.uniform(0.0, 2.0, size=sg.size)
        return pts, mt, st, ft, gt

    def make_regime(pts, mt, st, ft, gt):
        def scale(th, mk):
            out = 1.0
            for t in th:
                out = out + 0.1 * np.asarray(t)
            for e in mk:
                out = out + 0.05 * np.asarray(e)
            return out

        def ai(a):
            return np.rint(np.asarray(a)).astype(int)

        def ti(t):
            return int(round(t / grid.dt))

        return RegimeSpec(
            drift=lambda t, x, a, th, mk: h * mt[ai(a), ti(t)],
            vol=lambda t, x, a, th, mk: h * st[ai(a), ti(t)],
            running_gain=lambda t, x, a, th, mk: ft[ai(a), sg.nearest(x)] * scale(th, mk),
            terminal_gain=lambda x, th, mk: gt[sg.nearest(x)] * scale(th, mk),
            controls=ControlSet.finite(pts),
        )

    def make_jump(K):
        jt = rng.integers(-2, 3, size=(K, M)).astype(float)
        return lambda t, x, a, e: x + h * jt[np.rint(np.asarray(a)).astype(int), np.rint(np.asarray(e)).astype(int)]

    regimes, jumps = {}, {}
    tabs = {}
    for S in lay.regimes():
        lab = lay.label(S)
        if symmetric and lab == "1,2":
            tabs[lab] = tabs["1,1"]
        else:
            tabs[lab] = regime_tables()
        regimes[lab] = make_regime(*tabs[lab])
    for S in lay.regimes():
        for (j,) in lay.next_sets(S):
            jl = lay.jump_label(S, j)
            K = len(tabs[lay.label(S)][0])
            if symmetric and jl in ("1,2", "2,1") and ("1,1" if jl == "1,2" else "2,2") in jumps:
                jumps[jl] = jumps["1,1" if jl == "1,2" else "2,2"]
            else:
                jumps[jl] = make_jump(K)
    if symmetric:
        for a_, b_ in (("1,2", "1,1"), ("2,1", "2,2")):
            if a_ in jumps and b_ in jumps:
                jumps[a_] = jumps[b_]
    spec = ControlProblemSpec(grid, lay, regimes, jumps, x0=0.0)
    return DiscreteModel(spec, fam, sg, label=f"random{seed}")
