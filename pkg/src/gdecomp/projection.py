"""Optional projections of G-processes and expectation functionals by backward induction."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .density import DensityFamily, grid_index
from .model import EvalContext, FiniteTree, GOptionalTuple, TimeGrid

TIME_RULES = ("left", "trapezoid")


def time_weights(grid: TimeGrid, rule: str = "left") -> np.ndarray:
    """Weights omega_i with sum_i omega_i y_i approximating the integral over [0, T]."""
    if rule not in TIME_RULES:
        raise ValueError(f"unknown time rule {rule!r}")
    w = np.full(grid.N + 1, grid.dt)
    if rule == "left":
        w[-1] = 0.0
    else:
        w[0] = w[-1] = grid.dt / 2.0
    return w


def regime_context(family: DensityFamily, S: tuple, i: int, slots: tuple | None = None) -> EvalContext:
    """Broadcastable evaluation context over (node, [theta, e] * |S|) at level i.

    ``slots`` selects which occurred slots are exposed (default all of S).
    """
    k = len(S)
    nd = 1 + 2 * k
    n_i = family.backend.size(i)
    Th, M = family.grid.N + 2, family.marks.M
    node = np.arange(n_i).reshape((-1,) + (1,) * (nd - 1))
    st = family.backend.state[i]
    state = st.reshape((n_i,) + (1,) * (nd - 1) + (st.shape[1],))
    slots = S if slots is None else slots
    thetas, marks, tidx, midx = [], [], [], []
    vals = family.marks.values
    for pos, j in enumerate(S):
        if j not in slots:
            continue
        sh = [1] * nd
        sh[1 + 2 * pos] = Th
        ti = np.arange(Th).reshape(sh)
        tidx.append(ti)
        thetas.append(family.grid.theta_values.reshape(sh))
        sh = [1] * nd
        sh[2 + 2 * pos] = M
        mi = np.arange(M).reshape(sh)
        midx.append(mi)
        if vals.ndim == 1:
            marks.append(vals.reshape(sh))
        else:
            marks.append(vals.reshape(sh + [vals.shape[1]]))
    return EvalContext(family.grid.time(i), i, node, state, tuple(thetas), tuple(marks), tuple(tidx), tuple(midx))


def regime_shape(family: DensityFamily, S: tuple, i: int) -> tuple:
    return (family.backend.size(i),) + (family.grid.N + 2, family.marks.M) * len(S)


def evaluate_component(Y: GOptionalTuple, family: DensityFamily, S: tuple, i: int) -> np.ndarray:
    """Values of Y on regime S (optional convention) at level i over the scenario array.

    For a predictable tuple on a pmf family, slots defaulting exactly at t_i are
    not yet counted, so the component of the smaller regime is used there.
    Entries at the after-horizon index are zeroed (never weighted).
    """
    lay = family.layout
    shape = regime_shape(family, S, i)
    if Y.predictable and family.rule.kind == "pmf" and len(S) > 0:
        out = np.zeros(shape)
        nd = len(shape)
        for r in range(len(S) + 1):
            for at_t in itertools.combinations(S, r):
                before = tuple(j for j in S if j not in at_t)
                if lay.ordered and before != tuple(range(len(before))):
                    continue
                mask = np.ones(shape[1:], dtype=bool)
                for pos, j in enumerate(S):
                    sh = [1] * (nd - 1)
                    sh[2 * pos] = shape[1 + 2 * pos]
                    ti = np.arange(shape[1 + 2 * pos]).reshape(sh)
                    mask = mask & ((ti == i) if j in at_t else (ti < i))
                if not mask.any():
                    continue
                ctx = regime_context(family, S, i, slots=before)
                val = Y.evaluate(lay.label(before), ctx, shape)
                out = np.where(mask[None], val, out)
        return out
    ctx = regime_context(family, S, i)
    val = np.array(Y.evaluate(lay.label(S), ctx, shape), dtype=float)
    return _zero_sentinel(val, len(S), family.grid.N + 1)


def _zero_sentinel(val: np.ndarray, k: int, sentinel: int) -> np.ndarray:
    for pos in range(k):
        idx = [slice(None)] * val.ndim
        idx[1 + 2 * pos] = sentinel
        val[tuple(idx)] = 0.0
    return val


def _level_of(family: DensityFamily, t) -> int:
    return grid_index(family.grid, float(t))


@dataclass
class ProjectionResult:
    """Optional projection at one time.

    Attributes:
        t: time.
        level: grid index.
        value: projection per F-node at that level.
        layers: regime label -> layer array over (node, [theta, e] * k).
    """

    t: float
    level: int
    value: np.ndarray
    layers: dict = field(default_factory=dict)


def project_optional(Y: GOptionalTuple, family: DensityFamily, t: float) -> np.ndarray:
    """Optional projection of Y onto the reference filtration at time t.

    Args:
        Y: G-optional tuple.
        family: density family.
        t: grid time.

    Returns:
        Array of projections, one per backend node at that level.
    """
    i = _level_of(family, t)
    total = np.zeros(family.backend.size(i))
    for S in family.layout.regimes():
        arr = evaluate_component(Y, family, S, i) * family.regime_density(S, i)
        total = total + family.head_integral(S, arr, i)
    return total


def project_optional_backward(Y: GOptionalTuple, family: DensityFamily, t: float) -> ProjectionResult:
    """Projection via nested integration of layers from the full regime down.

    Ordered families nest slot by slot. Two names nest the full regime into the
    regime where name 1 defaulted first, then both single-default layers into the
    top.
    """
    i = _level_of(family, t)
    lay = family.layout
    w = family.marks.w
    layers = {}
    if lay.ordered:
        n = lay.n
        cur = evaluate_component(Y, family, tuple(range(n)), i) * family.regime_density(tuple(range(n)), i)
        layers[lay.label(tuple(range(n)))] = cur
        for k in range(n - 1, -1, -1):
            S = tuple(range(k))
            base = evaluate_component(Y, family, S, i) * family.regime_density(S, i)
            g1 = cur @ w
            if k == 0:
                cur = base + g1 @ family.rule.head(i)
            else:
                cur = base + np.einsum("...amb,ab->...am", g1, family.rule.head_matrix(i))
            layers[lay.label(S)] = cur
    else:
        full = evaluate_component(Y, family, (0, 1), i) * family.regime_density((0, 1), i)
        layers["2"] = full
        inner = (full @ w) @ family.rule.head(i)
        l11 = evaluate_component(Y, family, (0,), i) * family.regime_density((0,), i) + inner
        l12 = evaluate_component(Y, family, (1,), i) * family.regime_density((1,), i)
        layers["1,1"], layers["1,2"] = l11, l12
        cur = evaluate_component(Y, family, (), i) * family.regime_density((), i)
        cur = cur + (l11 @ w) @ family.rule.head(i) + (l12 @ w) @ family.rule.head(i)
        layers["0"] = cur
    return ProjectionResult(float(family.grid.time(i)), i, np.asarray(cur), layers)


# ---------------------------------------------------------------------------
# expectation functionals


@dataclass
class ExpectationLedger:
    """Result of an expectation functional.

    Attributes:
        J0: E[integral of Y dt + Z_T].
        layers: regime label -> per-level arrays; the entry at the level of the
            latest occurred default is the conditional layer value there.
        time_rule: time-integration rule used.
    """

    J0: float
    layers: dict = field(default_factory=dict)
    time_rule: str = "left"

    def layer_at(self, label: str, level: int) -> np.ndarray:
        return self.layers[label][level]


def _start_levels(family: DensityFamily, S: tuple) -> np.ndarray:
    """Latest occurred default index per scenario cell, broadcast over (node, [theta, e] * k)."""
    k = len(S)
    nd = 1 + 2 * k
    s = np.zeros((1,) * nd, dtype=int)
    for pos in range(k):
        sh = [1] * nd
        sh[1 + 2 * pos] = family.grid.N + 2
        s = np.maximum(s, np.arange(family.grid.N + 2).reshape(sh))
    return np.minimum(s, family.grid.N)


def coupling_table(family: DensityFamily) -> np.ndarray:
    """C[s, i]: weight of the next default at node i for a regime entered at node s."""
    N = family.grid.N
    return np.stack([family.rule.coupling(s)[: N + 1] for s in range(N + 1)])


def entry_slice(family: DensityFamily, S: tuple, J: tuple, arr: np.ndarray, i: int) -> np.ndarray:
    """Restrict a regime S + J array to the slots of J defaulting at node i, summing their marks.

    Returns an array over (node, [theta, e] for slots of S).
    """
    T = tuple(sorted(S + J))
    w = family.marks.w
    out = arr
    # process new slots from the highest position so earlier axis indices stay valid
    for pos in sorted((T.index(j) for j in J), reverse=True):
        out = np.tensordot(out, w, axes=([2 + 2 * pos], [0]))
        out = np.take(out, i, axis=1 + 2 * pos)
    return out


def expectation_functional(Y: GOptionalTuple, Z: GOptionalTuple, family: DensityFamily, T: float | None = None,
                           time_rule: str = "left", keep_layers: bool = True) -> ExpectationLedger:
    """E[integral_0^T Y_t dt + Z_T] by backward induction over regimes.

    Each regime S carries A^S_i = omega_i Y^S gamma^S_i + E[A^S_{i+1} | F_i] +
    sum over entering default sets J of C[start, i] * int_E A^{S+J}(entry at i),
    started from A^S_N = (omega_N Y^S + Z^S) gamma^S_N. Pmf families allow
    simultaneous defaults.

    Args:
        Y: running G-optional tuple.
        Z: terminal tuple (evaluated at T with the optional convention).
        family: density family.
        T: horizon; must equal the grid horizon when given.
        time_rule: ``left`` or ``trapezoid``.
        keep_layers: store per-level layer arrays.

    Returns:
        ExpectationLedger.
    """
    grid = family.grid
    if T is not None and abs(T - grid.T) > 1e-12:
        raise ValueError("horizon must match the time grid")
    om = time_weights(grid, time_rule)
    lay = family.layout
    N = grid.N
    C = coupling_table(family)
    simultaneous = family.rule.kind == "pmf"
    be = family.backend
    regimes = sorted(lay.regimes(), key=len, reverse=True)
    A: dict = {}
    Zt = GOptionalTuple(Z.components, False)
    for S in regimes:
        lab = lay.label(S)
        start = _start_levels(family, S)
        nxt = [J for J in lay.next_sets(S, simultaneous)]
        levels = [None] * (N + 1)
        for i in range(N, -1, -1):
            g = family.regime_density(S, i)
            a = om[i] * evaluate_component(Y, family, S, i) * g
            if i == N:
                a = a + evaluate_component(Zt, family, S, i) * g
            else:
                a = a + be.cond_exp(i, levels[i + 1])
            for J in nxt:
                src = A[tuple(sorted(S + J))][i]
                cw = C[start, i]
                a = a + cw * entry_slice(family, S, J, src, i)
            levels[i] = a
        A[S] = levels
    J0 = float(np.mean(A[()][0]))
    layers = {lay.label(S): A[S] for S in A} if keep_layers else {}
    return ExpectationLedger(J0, layers, time_rule)


def expectation_functional_two_names(Y: GOptionalTuple, Z: GOptionalTuple, family: DensityFamily,
                                     T: float | None = None, time_rule: str = "left") -> ExpectationLedger:
    """Two unordered names: layers J_2, J_{1,1}, J_{1,2}, J_0."""
    if family.ordered or family.n != 2:
        raise ValueError("needs an unordered two-name family")
    return expectation_functional(Y, Z, family, T, time_rule)


# ---------------------------------------------------------------------------
# direct enumeration (reference)


def tree_paths(tree: FiniteTree) -> tuple[np.ndarray, np.ndarray]:
    """All root-to-leaf paths: node indices (P, N + 1) and probabilities (P,)."""
    nodes = np.zeros((1, 1), dtype=int)
    prob = np.ones(1)
    for i in range(tree.N):
        ch, p = tree.children[i], tree.probs[i]
        last = nodes[:, -1]
        B = ch.shape[1]
        nodes = np.concatenate([np.repeat(nodes, B, axis=0), ch[last].reshape(-1, 1)], axis=1)
        prob = (prob[:, None] * p[last]).reshape(-1)
    return nodes, prob


def direct_expectation(Y: GOptionalTuple, Z: GOptionalTuple, family: DensityFamily, time_rule: str = "left") -> float:
    """E[integral Y dt + Z_T] by enumerating (reference path, default scenario) pairs.

    Pmf families on FiniteTree backends only.
    """
    if family.rule.kind != "pmf" or not isinstance(family.backend, FiniteTree):
        raise ValueError("direct enumeration needs a pmf family on a finite tree")
    grid, lay = family.grid, family.layout
    N, n = grid.N, family.n
    om = time_weights(grid, time_rule)
    paths, pprob = tree_paths(family.backend)
    gT = family.gamma(N)
    mw = family.mass_weights(n)
    total = 0.0
    vals = family.marks.values
    for pth, pp in zip(paths, pprob):
        mass = gT[pth[-1]] * mw
        for cell in zip(*np.nonzero(mass)):
            th = cell[0::2]
            ek = cell[1::2]
            m = mass[cell]
            acc = 0.0
            for i in range(N + 1):
                for val, comp_t, pred in ((om[i], Y, Y.predictable), (1.0 if i == N else 0.0, Z, False)):
                    if val == 0.0:
                        continue
                    occ = tuple(j for j in range(n) if (th[j] < i if pred else th[j] <= i))
                    if lay.ordered:
                        S = tuple(range(len(occ)))
                        slots = tuple(sorted(occ, key=lambda j: (th[j], j)))
                    else:
                        S = slots = occ
                    ctx = EvalContext(grid.time(i), i, pth[i], family.backend.state[i][pth[i]],
                                      tuple(grid.theta_values[th[j]] for j in slots),
                                      tuple(vals[ek[j]] for j in slots),
                                      tuple(th[j] for j in slots), tuple(ek[j] for j in slots))
                    acc += val * float(comp_t.evaluate(lay.label(S), ctx, ()))
            total += pp * m * acc
    return float(total)
