"""Vectorized pointwise maximization over control sets.

scipy's scalar minimizers work one problem at a time; the solvers here need the
same one-dimensional search run independently at every (node, scenario, state)
cell, so a small vectorized golden-section search is kept in-house.
"""

from __future__ import annotations

import math

import numpy as np

from .model import ControlSet

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
TIE_RTOL = 1e-12


def _better(new, best):
    with np.errstate(invalid="ignore"):
        return (new > best + TIE_RTOL * (1.0 + np.abs(best))) | (np.isneginf(best) & (new > best))


def golden_max(f, lo, hi, tol: float = 1e-8, max_iter: int = 200):
    """Maximize f independently per cell on [lo, hi] (arrays broadcast together).

    Args:
        f: vectorized objective of one array argument.
        lo: lower bounds.
        hi: upper bounds.
        tol: bracket width at termination.
        max_iter: iteration cap.

    Returns:
        Maximizer array (the best of the final bracket point and both ends).
    """
    lo, hi = np.broadcast_arrays(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
    a, b = lo.copy(), hi.copy()
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    shape = np.broadcast_shapes(a.shape, np.shape(fc))
    a, b, c, d = (np.broadcast_to(v, shape).copy() for v in (a, b, c, d))
    fc, fd = np.broadcast_to(fc, shape).copy(), np.broadcast_to(fd, shape).copy()
    for _ in range(max_iter):
        if np.max(b - a, initial=0.0) <= tol:
            break
        left = fc >= fd
        # keep [a, d] where the left probe wins, else [c, b]; one new probe per cell
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        probe = np.where(left, b - INV_PHI * (b - a), a + INV_PHI * (b - a))
        fp = np.broadcast_to(np.asarray(f(probe), dtype=float), shape)
        c, d, fc, fd = (np.where(left, probe, d), np.where(left, c, probe),
                        np.where(left, fp, fd), np.where(left, fc, fp))
    x = np.where(fc >= fd, c, d)
    return x


def maximize_scalar(f, lo, hi, tol: float = 1e-8, n_scan: int = 11):
    """Scan then golden-section refinement around the best scan point.

    Returns:
        (argmax, max) arrays; endpoints and scan points compete with the refined point.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    grid = [lo + (hi - lo) * k / (n_scan - 1) for k in range(n_scan)]
    vals = [np.asarray(f(g), dtype=float) for g in grid]
    shape = np.broadcast_shapes(*(v.shape for v in vals), lo.shape, hi.shape)
    best_v = np.broadcast_to(vals[0], shape).copy()
    best_a = np.broadcast_to(grid[0], shape).copy()
    for k in range(1, n_scan):
        v = np.broadcast_to(vals[k], shape)
        m = _better(v, best_v)
        best_v = np.where(m, v, best_v)
        best_a = np.where(m, np.broadcast_to(grid[k], shape), best_a)
    step = (np.broadcast_to(hi, shape) - np.broadcast_to(lo, shape)) / (n_scan - 1)
    blo = np.maximum(np.broadcast_to(lo, shape), best_a - step)
    bhi = np.minimum(np.broadcast_to(hi, shape), best_a + step)
    ref = golden_max(f, blo, bhi, tol)
    fv = np.broadcast_to(np.asarray(f(ref), dtype=float), shape)
    m = _better(fv, best_v)
    a = np.where(m, ref, best_a)
    return a, np.where(m, fv, best_v)


def maximize(f, controls: ControlSet, tol: float = 1e-8):
    """Pointwise maximization of f over a control set.

    Args:
        f: vectorized objective; dim-2 controls are arrays with a trailing axis of 2.
        controls: finite, interval or box set.
        tol: argument tolerance for continuous sets.

    Returns:
        (argmax, max); ties on finite sets go to the first point.
    """
    if controls.kind == "finite":
        pts = controls.points
        best_a = best_v = None
        for p in pts:
            pa = np.asarray(p, dtype=float)
            v = np.asarray(f(pa), dtype=float)
            if best_v is None:
                best_v = v.copy()
                best_a = np.broadcast_to(pa, v.shape + pa.shape).copy()
                continue
            shape = np.broadcast_shapes(v.shape, best_v.shape)
            best_v = np.broadcast_to(best_v, shape)
            best_a = np.broadcast_to(best_a, shape + pa.shape)
            v = np.broadcast_to(v, shape)
            m = _better(v, best_v)
            best_v = np.where(m, v, best_v)
            best_a = np.where(m.reshape(m.shape + (1,) * pa.ndim), pa, best_a)
        return best_a, best_v
    if controls.kind == "interval":
        return maximize_scalar(f, controls.lower[0], controls.upper[0], tol)
    if controls.kind == "box":
        return maximize_box(f, np.asarray(controls.lower), np.asarray(controls.upper), tol)
    raise ValueError("unconstrained controls need a closed form; give a bounded control set")


def maximize_box(f, lower, upper, tol: float = 1e-8, sweeps: int = 4, n_start: int = 5, feasible=None):
    """Coordinate-descent golden section on a 2-D box.

    Args:
        f: objective of arrays with trailing axis 2.
        lower: (2,) lower corner.
        upper: (2,) upper corner.
        tol: argument tolerance.
        sweeps: coordinate sweeps.
        n_start: start-grid resolution per axis.
        feasible: optional predicate on candidate arrays; infeasible starts are skipped.

    Returns:
        (argmax, max).
    """
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    starts = [np.array([u, v]) for u in np.linspace(lower[0], upper[0], n_start)
              for v in np.linspace(lower[1], upper[1], n_start)]
    best_a = best_v = None
    for s in starts:
        v = np.asarray(f(s), dtype=float)
        if feasible is not None:
            v = np.where(feasible(s), v, -np.inf)
        if best_v is None:
            best_v = v.copy()
            best_a = np.broadcast_to(s, v.shape + (2,)).copy()
            continue
        m = _better(v, best_v)
        best_v = np.where(m, v, best_v)
        best_a = np.where(m[..., None], s, best_a)
    a = best_a
    for _ in range(sweeps):
        for c in range(2):
            def g(u, c=c, a=a):
                z = a.copy()
                z[..., c] = u
                v = np.asarray(f(z), dtype=float)
                return v if feasible is None else np.where(feasible(z), v, -np.inf)
            lo_c = np.full(a.shape[:-1], lower[c])
            hi_c = np.full(a.shape[:-1], upper[c])
            u, _ = maximize_scalar(g, lo_c, hi_c, tol)
            cand = a.copy()
            cand[..., c] = u
            v = np.asarray(f(cand), dtype=float)
            if feasible is not None:
                v = np.where(feasible(cand), v, -np.inf)
            m = _better(v, best_v)
            best_v = np.where(m, v, best_v)
            a = np.where(m[..., None], cand, a)
    return a, best_v
