"""Backward Euler for BSDEs on filtration backends, generator building blocks and Merton references."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ._optim import maximize, maximize_box, maximize_scalar
from .model import ControlSet, MarkSpace, NumericalError, TimeGrid

log = logging.getLogger(__name__)

GENERATORS = ("f1_exp", "f0H_exp", "f11_pow", "f12_pow", "f0_pow", "zero", "custom")
EXP_CAP = 700.0


def _val(c, t):
    return c(t) if callable(c) else c


def safe_exp(x):
    """exp with the argument clipped to avoid overflow (a warning is logged when clipping)."""
    x = np.asarray(x, dtype=float)
    if np.any(x > EXP_CAP):
        log.warning("exponent above %s clipped", EXP_CAP)
    return np.exp(np.minimum(x, EXP_CAP))


def exp_utility(x, p: float):
    """U(x) = -exp(-p x)."""
    return -safe_exp(-p * np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# pointwise building blocks


def dist2_to_scaled_set(point, A: ControlSet, sigma):
    """Squared distance from ``point`` to {a * sigma : a in A} and the minimizing a.

    Args:
        point: real or array.
        A: one-dimensional control set.
        sigma: positive scale (array broadcast with point).

    Returns:
        (value, argmin); ties on finite sets go to the first point.
    """
    point = np.asarray(point, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    if A.kind == "unconstrained":
        a = point / sigma
        return np.zeros(np.broadcast_shapes(point.shape, sigma.shape)), a
    if A.kind == "interval":
        a = np.clip(point / sigma, A.lower[0], A.upper[0])
        return (point - a * sigma) ** 2, a
    if A.kind == "finite":
        pts = A.array
        d = (point[..., None] - pts * sigma[..., None]) ** 2
        k = np.argmin(d, axis=-1)
        return np.take_along_axis(d, k[..., None], axis=-1)[..., 0], pts[k]
    raise ValueError("dist2_to_scaled_set needs a one-dimensional control set")


def generator_f1(t, z, params: dict):
    """After-default exponential-utility generator.

    f = -theta z - theta^2 / (2p) + (p/2) inf_a |z + theta/p - a sigma|^2, theta = b / sigma.

    Args:
        t: time.
        z: martingale integrand.
        params: ``b``, ``sigma`` (floats or callables of t), ``p`` > 0 and control set ``A``.
    """
    return _f1(t, z, params)[0]


def _f1(t, z, params):
    b, s, p = _val(params["b"], t), _val(params["sigma"], t), params["p"]
    th = np.asarray(b, dtype=float) / s
    d2, a = dist2_to_scaled_set(np.asarray(z, dtype=float) + th / p, params["A"], np.asarray(s, dtype=float))
    return -th * z - th**2 / (2.0 * p) + 0.5 * p * d2, a


def convex_min_1d(g, A: ControlSet, center, tol: float = 1e-10):
    """Minimize a convex function of a per cell over a one-dimensional set.

    Unconstrained sets use a bracket around ``center`` that is doubled while the
    minimizer sits on its edge.

    Returns:
        (min, argmin).
    """
    if A.kind == "finite":
        a, v = maximize(lambda a: -g(a), A)
        return -v, a
    if A.kind == "interval":
        a, v = maximize_scalar(lambda a: -g(a), A.lower[0], A.upper[0], tol)
        return -v, a
    center = np.asarray(center, dtype=float)
    R = 10.0 * (1.0 + np.abs(center))
    for _ in range(30):
        a, v = maximize_scalar(lambda a: -g(a), center - R, center + R, tol, n_scan=21)
        edge = np.abs(np.abs(a - center) - R) <= 1e-6 * R
        if not np.any(edge):
            break
        R = np.where(edge, 4.0 * R, R)
    else:
        raise NumericalError("convex minimization did not find an interior minimizer")
    return -v, a


def generator_f0H(t, y, z, params: dict):
    """Before-default exponential-utility generator with the after-default coupling.

    ``form="derived"`` (default):
        -theta z - theta^2/(2p) + inf_a [(p/2)|z + theta/p - a sigma|^2
        + (rate/p) U(y) sum_e w_e U(a e - Y1(e))]
    ``form="printed"`` places (2/p) U(y) rate sum_e w_e U(a e - Y1(e)) inside the square.

    Args:
        t: time.
        y: value.
        z: martingale integrand (same shape as y).
        params: ``b``, ``sigma``, ``p``, ``A``, ``marks`` (MarkSpace), ``y1`` (after-default
            values on the diagonal, shape (..., M) broadcast with y), ``rate`` (default
            intensity weight, default 1) and ``form``.
    """
    return _f0H(t, y, z, params)[0]


def _f0H(t, y, z, params):
    b, s, p = _val(params["b"], t), _val(params["sigma"], t), params["p"]
    A: ControlSet = params["A"]
    marks: MarkSpace = params["marks"]
    rate = np.asarray(_val(params.get("rate", 1.0), t), dtype=float)
    y1 = np.asarray(params["y1"], dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    th = b / s
    e = marks.values.reshape(-1)
    w = marks.w
    Uy = exp_utility(y, p)
    form = params.get("form", "derived")
    if form not in ("derived", "printed"):
        raise ValueError(f"unknown generator form {form!r}")

    def mark_term(a):
        a = np.asarray(a, dtype=float)
        u = exp_utility(a[..., None] * e - y1, p)
        return rate * np.sum(w * u, axis=-1)

    def g(a):
        if form == "derived":
            return 0.5 * p * (z + th / p - a * s) ** 2 + Uy * mark_term(a) / p
        return 0.5 * p * (z + th / p - a * s + 2.0 / p * Uy * mark_term(a)) ** 2

    if np.all(rate * w.sum() == 0.0):
        d2, a = dist2_to_scaled_set(z + th / p, A, np.asarray(s, dtype=float))
        inner = 0.5 * p * d2
    else:
        inner, a = convex_min_1d(g, A, (z + th / p) / s)
    return -th * z - th**2 / (2.0 * p) + inner, a


def generator_f11_pow(t, y, z, params: dict):
    """Power-utility generator after one name defaulted (trading the survivor).

    f = p sup_a [(b y + sigma z) a - ((1-p)/2) y sigma^2 a^2 + gbar (1 - a)^p / p].

    Args:
        t: time.
        y: positive value.
        z: martingale integrand for the survivor's noise.
        params: ``b``, ``sigma``, ``p`` (< 1, nonzero), ``A`` (inside (-inf, 1)) and ``gbar``
            (default-density weight of the survivor, broadcast with y).
    """
    return _f11(t, y, z, params)[0]


generator_f12_pow = generator_f11_pow


def _check_power(p):
    if not (p < 1 and p != 0):
        raise ValueError("power utility needs p < 1 and p != 0")


def _f11(t, y, z, params):
    b, s, p = _val(params["b"], t), _val(params["sigma"], t), params["p"]
    _check_power(p)
    A: ControlSet = params["A"]
    gbar = np.asarray(_val(params.get("gbar", 0.0), t), dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    shape = np.broadcast_shapes(y.shape, z.shape, gbar.shape)
    idle = (np.abs(y) <= 1e-300) & (gbar == 0) & (z == 0)
    if np.any((y < 0) | ((y == 0) & ~idle & (A.kind == "unconstrained"))):
        raise NumericalError("power generator needs a positive value process")
    yy = np.where(idle, 1.0, y)
    lin = b * yy + s * z
    quad = 0.5 * (1.0 - p) * yy * s**2

    def obj(a):
        a = np.asarray(a, dtype=float)
        one = 1.0 - a
        with np.errstate(invalid="ignore", divide="ignore"):
            ok = one > 0 if p < 0 else one >= 0
            pw = np.where(gbar != 0, np.where(ok, np.abs(one) ** p / p, -np.inf), 0.0)
        return lin * a - quad * a**2 + gbar * pw

    if A.kind in ("interval", "finite") or np.all(gbar == 0):
        if np.all(gbar == 0) and A.kind in ("interval", "unconstrained") and np.all(quad > 0):
            vert = lin / (2.0 * quad)
            a = vert if A.kind == "unconstrained" else np.clip(vert, A.lower[0], A.upper[0])
            v = obj(a)
        else:
            a, v = maximize(obj, A)
    else:
        lo = np.minimum(-10.0 * (1.0 + np.abs(lin / (2.0 * quad))), -10.0)
        a, v = maximize_scalar(obj, lo, 1.0 - 1e-12, 1e-10, n_scan=21)
    v = np.where(idle, 0.0, p * np.broadcast_to(v, shape))
    return v, np.broadcast_to(a, shape)


def positivity(a, e21: float, e12: float):
    """Both post-default wealth factors 1 + a.(-1, e21) and 1 + a.(e12, -1) positive."""
    a = np.asarray(a, dtype=float)
    return (1.0 - a[..., 0] + e21 * a[..., 1] > 0) & (1.0 + e12 * a[..., 0] - a[..., 1] > 0)


def generator_f0_pow(t, y, z, params: dict):
    """Power-utility generator before any default (two names, contagion jumps).

    f = p sup_a [(y b + sigma z).a - ((1-p)/2) y |sigma a|^2
        + y11 (1 + a.(-1, e21))^p / p + y12 (1 + a.(e12, -1))^p / p]

    Args:
        t: time.
        y: positive value.
        z: martingale integrand, trailing axis 2.
        params: ``b`` (2,), ``sigma`` (2,) diagonal, ``e21``, ``e12``, ``p``, ``A`` (box,
            finite set of pairs or unconstrained) and default-weighted after-default values
            ``y11``, ``y12`` broadcast with y.
    """
    return _f0(t, y, z, params)[0]


def _f0(t, y, z, params):
    b = np.asarray(_val(params["b"], t), dtype=float)
    s = np.asarray(_val(params["sigma"], t), dtype=float)
    p = params["p"]
    _check_power(p)
    e21, e12 = float(params.get("e21", 0.0)), float(params.get("e12", 0.0))
    A: ControlSet = params["A"]
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    y11 = np.asarray(params.get("y11", 0.0), dtype=float)
    y12 = np.asarray(params.get("y12", 0.0), dtype=float)
    if np.any(y <= 0):
        raise NumericalError("power generator needs a positive value process")
    lin = y[..., None] * b + s * z
    quad = 0.5 * (1.0 - p) * y[..., None] * s**2

    def obj(a):
        a = np.asarray(a, dtype=float)
        ok = positivity(a, e21, e12)
        f1 = 1.0 - a[..., 0] + e21 * a[..., 1]
        f2 = 1.0 + e12 * a[..., 0] - a[..., 1]
        with np.errstate(invalid="ignore", divide="ignore"):
            j1 = np.where(y11 != 0, np.where(f1 > 0, np.abs(f1) ** p / p, -np.inf), 0.0)
            j2 = np.where(y12 != 0, np.where(f2 > 0, np.abs(f2) ** p / p, -np.inf), 0.0)
        v = np.sum(lin * a - quad * a**2, axis=-1) + y11 * j1 + y12 * j2
        return np.where(ok | ((y11 == 0) & (y12 == 0)), v, -np.inf)

    decoupled = np.all((y11 == 0) & (y12 == 0))
    if A.kind == "finite":
        a, v = maximize(obj, A)
    elif A.kind == "box" and decoupled:
        # separable concave quadratic: clip the vertex coordinatewise
        a = np.clip(lin / (2.0 * quad), np.asarray(A.lower), np.asarray(A.upper))
        v = obj(a)
    elif A.kind == "box":
        a, v = maximize_box(obj, A.lower, A.upper, 1e-10, feasible=lambda a: positivity(a, e21, e12))
    else:
        if np.any(y11 != 0) or np.any(y12 != 0):
            raise ValueError("unconstrained pairs need zero contagion weights; give a box")
        a = lin / (2.0 * quad)
        v = obj(a)
    if not np.all(np.isfinite(v)):
        raise NumericalError("no admissible control keeps both wealth factors positive")
    return p * v, a


# ---------------------------------------------------------------------------
# references


def merton_exponential_reference(b, sigma, p: float, T: float, t=0.0):
    """Y_t = -int_t^T (b/sigma)^2 / (2p) ds for deterministic coefficients.

    ``b`` and ``sigma`` are floats or callables of time (integrated by 64-point
    Gauss-Legendre on [t, T]).
    """
    if p <= 0:
        raise ValueError("exponential utility needs p > 0")
    t = np.asarray(t, dtype=float)
    if not callable(b) and not callable(sigma):
        return -((b / sigma) ** 2) * (T - t) / (2.0 * p)
    x, w = np.polynomial.legendre.leggauss(64)

    def one(t0):
        s = 0.5 * (T - t0) * x + 0.5 * (T + t0)
        th = np.asarray(_val(b, s), dtype=float) / np.asarray(_val(sigma, s), dtype=float)
        return -0.5 * (T - t0) * np.sum(w * th**2) / (2.0 * p)

    return np.vectorize(one)(t) if t.ndim else float(one(float(t)))


def merton_power_reference(b, sigma, p: float, T: float) -> float:
    """Y_0 = prod over names of exp(p b^2 T / (2 (1-p) sigma^2))."""
    _check_power(p)
    b = np.atleast_1d(np.asarray(b, dtype=float))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    return float(np.exp(np.sum(p * b**2 * T / (2.0 * (1.0 - p) * sigma**2))))


# ---------------------------------------------------------------------------
# backward Euler


@dataclass
class BsdeSpec:
    """A BSDE: generator id, parameters and terminal condition.

    Attributes:
        generator: one of GENERATORS.
        terminal: per terminal backend node (trailing axes allowed), or a scalar.
        params: generator parameters; entries may be callables of the level index
            when named ``*_at`` (e.g. ``y1_at``, ``rate_at``, ``gbar_at``).
        scheme: ``implicit`` (fixed point in y) or ``explicit`` (y from E[Y_{t+dt}]).
        max_iter: fixed-point iteration cap.
        tol: fixed-point tolerance.
        zdim: component of the Brownian increment used by one-dimensional generators.
    """

    generator: str
    terminal: object = 0.0
    params: dict = field(default_factory=dict)
    scheme: str = "implicit"
    max_iter: int = 50
    tol: float = 1e-10
    zdim: int = 0

    def violations(self) -> list[str]:
        out = []
        if self.generator not in GENERATORS:
            out.append(f"unknown generator {self.generator!r}")
        if self.scheme not in ("implicit", "explicit"):
            out.append(f"unknown scheme {self.scheme!r}")
        p = self.params.get("p")
        if self.generator in ("f1_exp", "f0H_exp") and not (p is not None and p > 0):
            out.append("exponential generators need p > 0")
        if self.generator in ("f11_pow", "f12_pow", "f0_pow") and not (p is not None and p < 1 and p != 0):
            out.append("power generators need p < 1 and p != 0")
        s = self.params.get("sigma")
        if s is not None and not callable(s) and np.any(np.asarray(s) <= 0):
            out.append("sigma must be positive")
        return out


@dataclass
class BsdeSolution:
    """Y and Z per level, per-step martingale residuals and fixed-point iteration counts."""

    Y: list
    Z: list
    residuals: np.ndarray
    iterations: list

    @property
    def y0(self) -> float:
        return float(np.mean(self.Y[0]))


def _resolve(params: dict, i: int) -> dict:
    out = {}
    for k, v in params.items():
        if k.endswith("_at"):
            out[k[:-3]] = v(i)
        else:
            out[k] = v
    return out


def make_generator(spec: BsdeSpec):
    """Generator callable gen(i, t, y, z) with z's last axis the Brownian dimension."""
    gid, zd = spec.generator, spec.zdim
    if gid == "zero":
        return lambda i, t, y, z: np.zeros_like(np.asarray(y, dtype=float))
    if gid == "custom":
        return spec.params["fn"]
    if gid == "f1_exp":
        return lambda i, t, y, z: generator_f1(t, z[..., zd], _resolve(spec.params, i))
    if gid == "f0H_exp":
        return lambda i, t, y, z: generator_f0H(t, y, z[..., zd], _resolve(spec.params, i))
    if gid in ("f11_pow", "f12_pow"):
        return lambda i, t, y, z: generator_f11_pow(t, y, z[..., zd], _resolve(spec.params, i))
    if gid == "f0_pow":
        return lambda i, t, y, z: generator_f0_pow(t, y, z, _resolve(spec.params, i))
    raise ValueError(f"unknown generator {gid!r}")


def solve_backward_euler(spec: BsdeSpec, grid: TimeGrid, backend) -> BsdeSolution:
    """Backward Euler: Z_i = E[Y_{i+1} dW_i | F_i] / dt, Y_i = E[Y_{i+1} | F_i] + f dt.

    With ``scheme="implicit"`` the y argument of f is Y_i, found by fixed-point
    iteration (``max_iter``, ``tol``); otherwise it is E[Y_{i+1} | F_i].

    Args:
        spec: BSDE specification.
        grid: time grid.
        backend: FiniteTree or MonteCarloRegression.

    Returns:
        BsdeSolution.
    """
    bad = spec.violations()
    if bad:
        raise ValueError("; ".join(bad))
    gen = make_generator(spec)
    N, dt = grid.N, grid.dt
    nN = backend.size(N)
    term = np.asarray(spec.terminal, dtype=float)
    if term.ndim == 0 or term.shape[0] != nN:
        term = np.broadcast_to(term, (nN,) + term.shape).copy()
    Y = [None] * (N + 1)
    Z = [None] * (N + 1)
    Y[N] = term
    res = np.zeros(N)
    its = [0] * N
    for i in range(N - 1, -1, -1):
        t = grid.time(i)
        EY = backend.cond_exp(i, Y[i + 1])
        z = backend.cond_exp_dw(i, Y[i + 1]) / dt
        if spec.scheme == "explicit":
            y = EY + gen(i, t, EY, z) * dt
            k = 1
        else:
            y = EY.copy()
            for k in range(1, spec.max_iter + 1):
                y_new = EY + gen(i, t, y, z) * dt
                if not np.all(np.isfinite(y_new)):
                    raise NumericalError(f"non-finite value at level {i}")
                diff = float(np.max(np.abs(y_new - y), initial=0.0))
                y = y_new
                if diff <= spec.tol * max(1.0, float(np.max(np.abs(y), initial=0.0))):
                    break
            else:
                raise NumericalError(f"fixed point did not converge at level {i} after {spec.max_iter} iterations")
        Y[i], Z[i], its[i] = y, z, k
        f = gen(i, t, y if spec.scheme == "implicit" else EY, z)
        edw = backend.cond_exp_dw(i, np.ones_like(Y[i + 1]))
        r = EY + f * dt - y - np.sum(z * edw, axis=-1)
        res[i] = float(np.max(np.abs(r), initial=0.0))
    Z[N] = np.zeros(Y[N].shape + (backend.dims,))
    return BsdeSolution(Y, Z, res, its)
