"""Path simulation, default-scenario sampling and Monte Carlo gains.

Random numbers come in batches of BATCH paths; batch b of stream ``tag`` draws from
Philox seeded with SeedSequence([seed, tag, b]), so results do not depend on the
number of worker threads.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .decompose import ConcatenatedPolicy, _first_control
from .density import DensityFamily
from .model import ControlProblemSpec, FiniteTree, OrderedScenario, TimeGrid, orderize
from .projection import time_weights

BATCH = 8192
STREAM_PATHS = 1
STREAM_SCENARIO = 2


def batch_rng(seed: int, tag: int, batch: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(tag), int(batch)])))


# ---------------------------------------------------------------------------
# default scenarios


def scenario_table(family: DensityFamily, level: int, node: int, tol: float = 1e-6) -> np.ndarray:
    """Probabilities of all (theta, e) cells at one backend node, flattened.

    Finite default times carry the family's quadrature weights, the sentinel weight 1.

    Raises:
        ValueError: when the masses do not sum to one within ``tol``.
    """
    n = family.n
    g = family.gamma(level)[node] * family.mass_weights(n)
    if family.rule.kind != "pmf":
        tw = family.rule.interval(0, family.grid.N)
        tw[-1] = 1.0
        for j in range(n):
            sh = [1] * (2 * n)
            sh[2 * j] = family.grid.N + 2
            g = g * tw.reshape(sh)
    p = np.clip(g.reshape(-1), 0.0, None)
    tot = p.sum()
    if abs(tot - 1.0) > tol:
        raise ValueError(f"density family is not normalized (total mass {tot:.8g})")
    return p / tot


def sample_default_indices(family: DensityFamily, u: np.ndarray, nodes=None, level: int | None = None):
    """Inverse-CDF sampling of (theta, e) indices per path.

    Args:
        family: density family.
        u: uniforms, shape (P,).
        nodes: backend node per path at ``level`` (root when omitted).
        level: backend level of ``nodes`` (N when nodes are given, else 0).

    Returns:
        (theta_idx, mark_idx), each (P, n).
    """
    P = len(u)
    if nodes is None:
        nodes = np.zeros(P, dtype=int)
        level = 0 if level is None else level
    else:
        level = family.grid.N if level is None else level
    nodes = np.asarray(nodes, dtype=int)
    shape = (family.grid.N + 2, family.marks.M) * family.n
    flat = np.zeros(P, dtype=int)
    for nd in np.unique(nodes):
        sel = nodes == nd
        cdf = np.cumsum(scenario_table(family, level, int(nd)))
        flat[sel] = np.minimum(np.searchsorted(cdf, u[sel] * cdf[-1], side="right"), len(cdf) - 1)
    coords = np.unravel_index(flat, shape)
    th = np.stack(coords[0::2], axis=1).astype(int) if family.n else np.zeros((P, 0), int)
    mk = np.stack(coords[1::2], axis=1).astype(int) if family.n else np.zeros((P, 0), int)
    return th, mk


def sample_default_scenario(family: DensityFamily, f_path=None, rng: np.random.Generator | None = None,
                            seed: int = 0) -> OrderedScenario:
    """One default scenario, conditional on a terminal F-node when ``f_path`` is given.

    Args:
        family: density family.
        f_path: terminal backend node, or a node path whose last entry is used.
        rng: generator (a Philox stream from ``seed`` when omitted).
        seed: seed used without ``rng``.

    Returns:
        OrderedScenario with times (``inf`` after T), mark values and 1-based index marks.
    """
    rng = rng if rng is not None else batch_rng(seed, STREAM_SCENARIO, 0)
    nodes = None
    if f_path is not None:
        nodes = np.array([int(np.ravel(f_path)[-1])])
    th, mk = sample_default_indices(family, rng.random(1), nodes)
    vals = family.marks.values
    times = [float(family.grid.theta_values[k]) for k in th[0]]
    marks = [vals[k].tolist() if np.ndim(vals[k]) else float(vals[k]) for k in mk[0]]
    return orderize(times, marks)


# ---------------------------------------------------------------------------
# paths


@dataclass
class PathBundle:
    """Simulated paths.

    Attributes:
        seed: master seed.
        grid: time grid.
        increments: Brownian increments (P, N).
        nodes: backend node per level (P, N+1); zeros for Gaussian noise.
        states: controlled state (P, N+1).
        regimes: regime label per path and level, as indices into ``labels``.
        labels: regime labels.
        thetas: default-time indices (P, n); N+1 means after T.
        marks: mark indices (P, n).
        mark_values: mark values of the family.
        gains: realized gain per path.
    """

    seed: int
    grid: TimeGrid
    increments: np.ndarray
    nodes: np.ndarray
    states: np.ndarray
    regimes: np.ndarray
    labels: tuple
    thetas: np.ndarray
    marks: np.ndarray
    mark_values: np.ndarray
    gains: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    def to_csv(self, path) -> None:
        """Long format: path_id, t, state, regime, theta_1.., e_1.."""
        n = self.thetas.shape[1]
        head = ["path_id", "t", "state", "regime"] + [f"theta_{j + 1}" for j in range(n)] + [f"e_{j + 1}" for j in range(n)]
        tv = self.grid.theta_values
        one_d = self.mark_values.ndim == 1
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(head)
            for p in range(self.n_paths):
                th = ["inf" if math.isinf(tv[k]) else repr(float(tv[k])) for k in self.thetas[p]]
                mk = [repr(float(self.mark_values[k])) if one_d else str(int(k)) for k in self.marks[p]]
                for i in range(self.grid.N + 1):
                    wr.writerow([p, repr(float(self.grid.time(i))), repr(float(self.states[p, i])),
                                 self.labels[self.regimes[p, i]]] + th + mk)


def _check_family(spec: ControlProblemSpec, family: DensityFamily):
    if spec.layout != family.layout:
        raise ValueError("problem layout differs from the density family layout")
    if family.n > 1 and family.finite_ties() > 0:
        raise ValueError("simultaneous defaults at a grid node are not supported")


def _simulate_batch(spec, family, policy, seed, b, size, noise, om):
    grid, lay = family.grid, family.layout
    N, dt, n = grid.N, grid.dt, family.n
    rng = batch_rng(seed, STREAM_PATHS, b)
    be = family.backend
    vals = family.marks.values
    labels = tuple(lay.label(S) for S in lay.regimes())
    lab_index = {lab: k for k, lab in enumerate(labels)}
    nodes = np.zeros((size, N + 1), dtype=int)
    dW = np.zeros((size, N))
    if noise == "tree":
        ub = rng.random((size, N))
        for i in range(N):
            cum = np.cumsum(be.probs[i][nodes[:, i]], axis=1)
            br = np.minimum((ub[:, i, None] > cum).sum(axis=1), cum.shape[1] - 1)
            nodes[:, i + 1] = be.children[i][nodes[:, i], br]
            dW[:, i] = be.dw[i][nodes[:, i], br, 0]
        th, mk = sample_default_indices(family, rng.random(size), nodes[:, N])
    else:
        dW = rng.standard_normal((size, N)) * math.sqrt(dt)
        th, mk = sample_default_indices(family, rng.random(size))
    if family.rule.kind != "pmf" and np.any(th == 0):
        raise ValueError("defaults at time 0 cannot be simulated; use a pmf family")
    x = np.full(size, float(spec.x0))
    X = np.zeros((size, N + 1))
    R = np.zeros((size, N + 1), dtype=int)
    gain = np.zeros(size)
    for i in range(N + 1):
        t = grid.time(i)
        X[:, i] = x
        occ = th <= i
        code = (occ * (1 << np.arange(n))).sum(axis=1) if n else np.zeros(size, dtype=int)
        xn = x.copy()
        for c in np.unique(code):
            sel = code == c
            S = tuple(j for j in range(n) if (c >> j) & 1)
            lab = lay.label(S)
            R[sel, i] = lab_index[lab]
            reg = spec.regime(S)
            thv = tuple(grid.theta_values[th[sel, j]] for j in S)
            mkv = tuple(vals[mk[sel, j]] for j in S)
            xs = x[sel]
            if (i == N and om[N] == 0.0) or policy is None:
                a = np.broadcast_to(_first_control(reg.controls), xs.shape).astype(float)
            else:
                a = np.asarray(policy(lab, i, xs, [th[sel, j] for j in S], [mk[sel, j] for j in S],
                                      nodes[sel, i], mkv), dtype=float)
            gain[sel] += om[i] * np.broadcast_to(reg.running_gain(t, xs, a, thv, mkv), xs.shape)
            if i == N:
                gain[sel] += np.broadcast_to(reg.terminal_gain(xs, thv, mkv), xs.shape)
                continue
            bdr = np.broadcast_to(reg.drift(t, xs, a, thv, mkv), xs.shape)
            vol = np.broadcast_to(reg.vol(t, xs, a, thv, mkv), xs.shape)
            xp = xs + bdr * dt + vol * dW[sel, i]
            for j in range(n):
                if j in S:
                    continue
                hit = th[sel, j] == i + 1
                if np.any(hit):
                    gmap = spec.jumps[lay.jump_label(S, j)]
                    jx = np.broadcast_to(gmap(grid.time(i + 1), xp, a, vals[mk[sel, j]]), xp.shape)
                    xp = np.where(hit, jx, xp)
            xn[sel] = xp
        x = xn
    return dW, nodes, X, R, th, mk, gain, labels


def simulate_paths(spec: ControlProblemSpec, family: DensityFamily, n_paths: int, seed: int = 0,
                   policy: ConcatenatedPolicy | None = None, noise: str = "auto", time_rule: str = "left",
                   threads: int = 1) -> PathBundle:
    """Euler-Maruyama paths of the controlled state with sampled default scenarios.

    Args:
        spec: control problem (coefficients, jumps, gains).
        family: density family; scenarios are drawn from its terminal density at the
            simulated F-node (tree noise) or from the root density (Gaussian noise).
        n_paths: number of paths.
        seed: master seed.
        policy: feedback policy; the first control of each regime when omitted.
        noise: ``tree`` (walk the FiniteTree), ``gaussian`` or ``auto`` (tree when
            the backend is a non-trivial FiniteTree).
        time_rule: running-gain time rule.
        threads: worker threads (results do not depend on it).

    Returns:
        PathBundle.
    """
    _check_family(spec, family)
    if n_paths <= 0:
        raise ValueError("n_paths must be positive")
    be = family.backend
    if noise == "auto":
        noise = "tree" if isinstance(be, FiniteTree) and not be.is_trivial else "gaussian"
    if noise not in ("tree", "gaussian"):
        raise ValueError(f"unknown noise {noise!r}")
    if noise == "tree" and not isinstance(be, FiniteTree):
        raise ValueError("tree noise needs a FiniteTree backend")
    om = time_weights(family.grid, time_rule)
    sizes = [min(BATCH, n_paths - k) for k in range(0, n_paths, BATCH)]

    def run(b):
        return _simulate_batch(spec, family, policy, seed, b, sizes[b], noise, om)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(run, range(len(sizes))))
    else:
        parts = [run(b) for b in range(len(sizes))]
    cat = [np.concatenate([p[k] for p in parts]) for k in range(7)]
    return PathBundle(seed, family.grid, cat[0], cat[1], cat[2], cat[3], parts[0][7], cat[4], cat[5],
                      np.asarray(family.marks.values), cat[6])


def mc_gain(policy: ConcatenatedPolicy | None, spec: ControlProblemSpec, family: DensityFamily,
            n_paths: int = 100_000, seed: int = 0, time_rule: str = "left", threads: int = 1):
    """Monte Carlo gain of a policy with its standard error.

    Pmf families only: every sampled default then sits on a grid node after 0.

    Returns:
        (mean, standard error).
    """
    if family.rule.kind != "pmf":
        raise ValueError("mc_gain needs a pmf density family")
    pb = simulate_paths(spec, family, n_paths, seed, policy, time_rule=time_rule, threads=threads)
    g = pb.gains
    return float(g.mean()), float(g.std(ddof=1) / math.sqrt(len(g))) if len(g) > 1 else 0.0
