"""Indifference pricing of a defaultable claim and bilateral-contagion investment."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .bsde import (
    _f0,
    _f0H,
    convex_min_1d,
    dist2_to_scaled_set,
    generator_f0_pow,
    generator_f1,
    generator_f11_pow,
    safe_exp,
)
from .density import DensityFamily
from .model import ControlSet, FiniteTree, NumericalError
from .projection import coupling_table

log = logging.getLogger(__name__)

GAMMA_FLOOR = 1e-12
FLOOR_MASS_LIMIT = 1e-6


def _coef(c, t):
    return np.asarray(c(t) if callable(c) else c, dtype=float)


def node_probabilities(tree: FiniteTree) -> list[np.ndarray]:
    """Unconditional probability of every node, per level."""
    out = [np.ones(1)]
    for i in range(tree.N):
        nxt = np.zeros(tree.size(i + 1))
        np.add.at(nxt, tree.children[i].reshape(-1), (out[-1][:, None] * tree.probs[i]).reshape(-1))
        out.append(nxt)
    return out


# ---------------------------------------------------------------------------
# pricing


@dataclass
class ExpMarket:
    """Coefficients of the traded asset before and after the default.

    Each entry is a float or a callable of time. After-default coefficients may
    also be arrays broadcast over (default node, mark).
    """

    b0: object = 0.0
    sigma0: object = 1.0
    b1: object = 0.0
    sigma1: object = 1.0


@dataclass
class DefaultableClaim:
    """Claim paying H0 on survival to T and H1(theta, e) after a default.

    Attributes:
        H0: float, per terminal node array (n_N,), or callable(state_N) -> (n_N,).
        H1: float, array broadcast to (n_N, N+1, M), or callable(state_N, times, marks)
            with times of shape (N+1, 1) and marks of shape (M,).
        bound: optional bound checked on |H|.
    """

    H0: object = 0.0
    H1: object = 0.0
    bound: float | None = None

    def arrays(self, family: DensityFamily):
        be, g, N = family.backend, family.grid, family.grid.N
        nN, M = be.size(N), family.marks.M
        st = be.state[N] if hasattr(be, "state") and isinstance(be.state, list) else np.zeros((nN, be.dims))
        H0 = self.H0(st) if callable(self.H0) else self.H0
        H0 = np.broadcast_to(np.asarray(H0, dtype=float), (nN,)).copy()
        if callable(self.H1):
            H1 = self.H1(st, g.nodes[:, None], family.marks.values.reshape(-1))
        else:
            H1 = self.H1
        H1 = np.asarray(H1, dtype=float)
        if H1.ndim == 3 and H1.shape[1] == N + 2:
            H1 = H1[:, : N + 1]
        H1 = np.broadcast_to(H1, (nN, N + 1, M)).copy()
        if not (np.all(np.isfinite(H0)) and np.all(np.isfinite(H1))):
            raise ValueError("claim must be finite")
        if self.bound is not None and (np.max(np.abs(H0)) > self.bound or np.max(np.abs(H1)) > self.bound):
            raise ValueError("claim exceeds its bound")
        return H0, H1

    def shifted(self, c: float) -> "DefaultableClaim":
        """Claim plus a constant c (both branches)."""
        H0, H1 = self.H0, self.H1
        f0 = (lambda st: np.asarray(H0(st)) + c) if callable(H0) else np.asarray(H0, dtype=float) + c
        f1 = (lambda st, t, e: np.asarray(H1(st, t, e)) + c) if callable(H1) else np.asarray(H1, dtype=float) + c
        return DefaultableClaim(f0, f1, None if self.bound is None else self.bound + abs(c))


@dataclass
class PricingResult:
    """Indifference price and the ingredients of both optimization problems."""

    price: float
    y0_with_claim: float
    y0_without_claim: float
    residual_max: float
    floors_hit: int
    controls_t0: tuple = ()
    scheme: str = "exp"
    form: str = "derived"

    def to_dict(self) -> dict:
        return {
            "price": self.price,
            "y0_with_claim": self.y0_with_claim,
            "y0_without_claim": self.y0_without_claim,
            "residual_max": self.residual_max,
            "floors_hit": self.floors_hit,
            "scheme": self.scheme,
            "form": self.form,
        }


def _fixed_point(EU, step, max_iter=50, tol=1e-10):
    """Iterate u = EU + step(u) until the update is below tol (relative to max(1, |u|))."""
    u = EU.copy()
    for _ in range(max_iter):
        new = EU + step(u)
        if not np.all(np.isfinite(new)):
            raise NumericalError("non-finite value in the backward step")
        diff = float(np.max(np.abs(new - u), initial=0.0))
        u = new
        if diff <= tol * max(1.0, float(np.max(np.abs(u), initial=0.0))):
            return u, diff
    raise NumericalError("fixed point did not converge")


class _Pricer:
    """One exponential-utility problem (with or without the claim) on a one-name family."""

    def __init__(self, market: ExpMarket, family: DensityFamily, p: float, A0: ControlSet, A1: ControlSet):
        if family.n != 1:
            raise ValueError("pricing needs a one-name density family")
        if p <= 0:
            raise ValueError("exponential utility needs p > 0")
        for A in (A0, A1):
            if A.dim != 1:
                raise ValueError("pricing controls are one-dimensional")
        self.m, self.f, self.p, self.A0, self.A1 = market, family, p, A0, A1
        self.g = family.grid
        self.be = family.backend
        self.C = coupling_table(family)
        self.residual = 0.0
        self.w = family.marks.w
        self.e = family.marks.values.reshape(-1)

    # after default --------------------------------------------------------
    def _F1(self, t, u, zu):
        p = self.p
        b = _coef(self.m.b1, t)
        s = _coef(self.m.sigma1, t)
        pos = u > 0
        uu = np.where(pos, u, 1.0)
        lin = b * uu + s * zu
        q = lin / (p * s**2 * uu)
        d2, _ = dist2_to_scaled_set(p * s * q, self.A1, np.broadcast_to(p * s, q.shape))
        return np.where(pos, 0.5 * uu * d2 - lin**2 / (2.0 * s**2 * uu), 0.0)

    def _F0_obj(self, t, u, zu, K):
        p = self.p
        b = _coef(self.m.b0, t)
        s = _coef(self.m.sigma0, t)
        w, e = self.w, self.e

        def g(a):
            a = np.asarray(a, dtype=float)
            jump = np.sum(w * safe_exp(-p * a[..., None] * e) * K, axis=-1)
            return 0.5 * p**2 * s**2 * a**2 * u - p * a * (b * u + s * zu) + jump

        return g, (b * u + s * zu) / (p * s**2 * np.where(u > 0, u, 1.0))

    def solve_exp(self, H0, H1):
        """u-scale backward Euler; returns (u_0, a_0)."""
        g, be, p, N, dt = self.g, self.be, self.p, self.g.N, self.g.dt
        gN = self.f.gamma(N)[:, : N + 1, :]
        u1 = gN * safe_exp(p * H1)
        u0 = self.f.regime_density((), N) * safe_exp(p * H0)
        diag = [None] * (N + 1)
        diag[N] = u1[:, N, :]
        a0 = 0.0
        for i in range(N - 1, -1, -1):
            t = g.time(i)
            EU1 = be.cond_exp(i, u1)
            Z1 = be.cond_exp_dw(i, u1)[..., 0] / dt
            u1, r1 = _fixed_point(EU1, lambda u: self._F1(t, u, Z1) * dt)
            diag[i] = u1[:, i, :]
            K = self.C[0, i + 1] / dt * be.cond_exp(i, diag[i + 1])
            if i == 0:
                K = K + self.C[0, 0] / dt * diag[0]
            EU0 = be.cond_exp(i, u0)
            Z0 = be.cond_exp_dw(i, u0)[..., 0] / dt

            def step(u):
                obj, centre = self._F0_obj(t, u, Z0, K)
                v, _ = convex_min_1d(obj, self.A0, centre)
                return v * dt

            u0, r0 = _fixed_point(EU0, step)
            if i == 0:
                obj, centre = self._F0_obj(t, u0, Z0, K)
                a0 = float(np.mean(convex_min_1d(obj, self.A0, centre)[1]))
            self.residual = max(self.residual, r0, r1)
        return float(np.mean(u0)), a0

    def solve_discrete(self, H0, H1):
        """Exact dynamic programme on a pmf family over a FiniteTree; returns (u_0, a_0)."""
        be, p, N, dt = self.be, self.p, self.g.N, self.g.dt
        if not isinstance(be, FiniteTree) or self.f.rule.kind != "pmf":
            raise ValueError("the discrete scheme needs a pmf family on a FiniteTree")
        u1 = self.f.gamma(N)[:, : N + 1, :] * safe_exp(p * H1)
        u0 = self.f.regime_density((), N) * safe_exp(p * H0)
        w, e = self.w, self.e
        a0 = 0.0
        for i in range(N - 1, -1, -1):
            t = self.g.time(i)
            ch, pr, dw = be.children[i], be.probs[i], be.dw[i][..., 0]
            b1, s1 = _coef(self.m.b1, t), _coef(self.m.sigma1, t)
            b0, s0 = _coef(self.m.b0, t), _coef(self.m.sigma0, t)
            nxt1 = u1

            def g1(a):
                a = np.asarray(a, dtype=float)
                out = 0.0
                for k in range(ch.shape[1]):
                    r = (b1 * dt + s1 * dw[:, k]).reshape(-1, 1, 1)
                    out = out + pr[:, k].reshape(-1, 1, 1) * safe_exp(-p * a * r) * nxt1[ch[:, k]]
                return out

            shape1 = (ch.shape[0],) + u1.shape[1:]
            u1, _ = convex_min_1d(g1, self.A1, np.zeros(shape1))
            u1 = np.broadcast_to(u1, shape1).copy()
            cw = self.C[0, i + 1]

            def g0(a):
                a = np.asarray(a, dtype=float)
                out = 0.0
                for k in range(ch.shape[1]):
                    c = ch[:, k]
                    r = b0 * dt + s0 * dw[:, k]
                    jump = cw * np.sum(w * safe_exp(-p * a[..., None] * e) * nxt1[c, i + 1, :], axis=-1)
                    out = out + pr[:, k] * safe_exp(-p * a * r) * (u0[c] + jump)
                return out

            v, a = convex_min_1d(g0, self.A0, np.zeros(ch.shape[0]))
            u0 = np.broadcast_to(v, (ch.shape[0],)).copy()
            if i == 0:
                a0 = float(np.mean(a))
        return float(np.mean(u0)), a0

    def solve_value(self, H0, H1, form):
        """Value-scale backward Euler with the f1 / f0H generators (f0H explicit in y); returns (Y_0, a_0, floors)."""
        g, be, p, N, dt = self.g, self.be, self.p, self.g.N, self.g.dt
        gN = self.f.gamma(N)[:, : N + 1, :]
        g0 = self.f.regime_density((), N)
        floors = int(np.sum(gN < GAMMA_FLOOR) + np.sum(g0 < GAMMA_FLOOR))
        weights = self.C[0][None, :, None] * self.w
        floored_mass = float(np.sum(np.where(gN < GAMMA_FLOOR, GAMMA_FLOOR - gN, 0.0) * weights))
        if floored_mass > FLOOR_MASS_LIMIT:
            raise NumericalError(f"floored density mass {floored_mass:.3g} exceeds {FLOOR_MASS_LIMIT}")
        Y1 = H1 + np.log(np.maximum(gN, GAMMA_FLOOR)) / p
        Y0 = H0 + np.log(np.maximum(g0, GAMMA_FLOOR)) / p
        diag = [None] * (N + 1)
        diag[N] = Y1[:, N, :]
        p1 = dict(b=self.m.b1, sigma=self.m.sigma1, p=p, A=self.A1)
        a0 = 0.0
        for i in range(N - 1, -1, -1):
            t = g.time(i)
            EY1 = be.cond_exp(i, Y1)
            Z1 = be.cond_exp_dw(i, Y1)[..., 0] / dt
            Y1, r1 = _fixed_point(EY1, lambda y: generator_f1(t, Z1, p1) * dt)
            diag[i] = Y1[:, i, :]
            K = self.C[0, i + 1] / dt * be.cond_exp(i, safe_exp(p * diag[i + 1]))
            if i == 0:
                K = K + self.C[0, 0] / dt * safe_exp(p * diag[0])
            with np.errstate(divide="ignore"):
                y1 = np.log(K) / p
            p0 = dict(b=self.m.b0, sigma=self.m.sigma0, p=p, A=self.A0, marks=self.f.marks, y1=y1,
                      rate=1.0, form=form)
            EY0 = be.cond_exp(i, Y0)
            Z0 = be.cond_exp_dw(i, Y0)[..., 0] / dt
            # explicit in y: the exp(-p y) coupling makes the implicit map non-contractive on coarse grids
            f0, a = _f0H(t, EY0, Z0, p0)
            Y0 = EY0 + f0 * dt
            if i == 0:
                a0 = float(np.mean(a))
            self.residual = max(self.residual, r1)
        return float(np.mean(Y0)), a0, floors


def price_defaultable_claim(market: ExpMarket, claim: DefaultableClaim, family: DensityFamily, p: float,
                            A0: ControlSet, A1: ControlSet | None = None, scheme: str = "exp",
                            form: str = "derived") -> PricingResult:
    """Exponential-utility indifference price of a defaultable claim.

    The price is Y^{0,H}_0 - Y^0_0 where U(x - Y_0) is the optimal value with and
    without the claim.

    Args:
        market: asset coefficients.
        claim: the claim.
        family: one-name density family on its filtration backend.
        p: risk aversion (> 0).
        A0: control set before the default.
        A1: control set after the default (defaults to A0).
        scheme: ``exp`` (backward Euler on u = exp(pY)), ``value`` (backward Euler on Y
            with the f1 / f0H generators) or ``discrete`` (exact dynamic programme,
            pmf families on trees).
        form: ``derived`` or ``printed`` f0H (``value`` scheme only).

    Returns:
        PricingResult.
    """
    if scheme not in ("exp", "value", "discrete"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if form not in ("derived", "printed"):
        raise ValueError(f"unknown form {form!r}")
    A1 = A0 if A1 is None else A1
    if scheme == "value" and family.rule.kind == "pmf":
        raise ValueError("the value scheme needs a default-time density (point masses jump by O(1) per step)")
    bad = family.validate()
    if bad:
        raise ValueError("; ".join(bad))
    H0, H1 = claim.arrays(family)
    out, res, floors = [], 0.0, 0
    a_t0 = []
    for h0, h1 in ((H0, H1), (np.zeros_like(H0), np.zeros_like(H1))):
        pr = _Pricer(market, family, p, A0, A1)
        if scheme == "value":
            y, a, fl = pr.solve_value(h0, h1, form)
            floors += fl
        else:
            u, a = pr.solve_exp(h0, h1) if scheme == "exp" else pr.solve_discrete(h0, h1)
            if u <= 0:
                raise NumericalError("non-positive exponential-scale value")
            if u < GAMMA_FLOOR:
                floors += 1
            y = float(np.log(max(u, GAMMA_FLOOR)) / p)
        out.append(y)
        a_t0.append(a)
        res = max(res, pr.residual)
    return PricingResult(out[0] - out[1], out[0], out[1], res, floors, tuple(a_t0), scheme, form)


def static_certainty_equivalent(claim: DefaultableClaim, family: DensityFamily, p: float) -> float:
    """(1/p) log E[exp(p H)] with the family's quadrature, computed by direct summation."""
    be, N = family.backend, family.grid.N
    if not isinstance(be, FiniteTree):
        raise TypeError("static certainty equivalent needs a FiniteTree backend")
    H0, H1 = claim.arrays(family)
    P = node_probabilities(be)[N]
    C0 = coupling_table(family)[0]

    def moment(h0, h1):
        alive = family.regime_density((), N) * np.exp(p * h0)
        dead = np.einsum("nse,s,e->n", family.gamma(N)[:, : N + 1, :] * np.exp(p * h1), C0, family.marks.w)
        return float(np.sum(P * (alive + dead)))

    return float(np.log(moment(H0, H1)) / p - np.log(moment(0 * H0, 0 * H1)) / p)


# ---------------------------------------------------------------------------
# bilateral investment


@dataclass
class BilateralMarket:
    """Two defaultable assets with contagion.

    Attributes:
        b0, sigma0: drifts and (diagonal) volatilities of both assets before any default.
        b21, sigma21: asset 2 after name 1 defaulted; floats or callables (t, theta1_times).
        b12, sigma12: asset 1 after name 2 defaulted.
        e21: relative jump of asset 2 when name 1 defaults.
        e12: relative jump of asset 1 when name 2 defaults.
    """

    b0: tuple = (0.0, 0.0)
    sigma0: tuple = (1.0, 1.0)
    b21: object = 0.0
    sigma21: object = 1.0
    b12: object = 0.0
    sigma12: object = 1.0
    e21: float = 0.0
    e12: float = 0.0


@dataclass
class BilateralResult:
    """Y processes per layer, value and initial fractions."""

    y0: float
    value_at_x: float
    fractions_t0: tuple
    residual_max: float
    layers: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"y0": self.y0, "value_at_x": self.value_at_x, "fractions_t0": list(self.fractions_t0),
                "residual_max": self.residual_max}


def _coef_theta(c, t, thetas):
    return np.asarray(c(t, thetas) if callable(c) else c, dtype=float)


def invest_bilateral(market: BilateralMarket, family: DensityFamily, p: float, A0: ControlSet,
                     A11: ControlSet, A12: ControlSet, x: float = 1.0) -> BilateralResult:
    """Power-utility investment in two defaultable assets with contagion jumps.

    Solves the after-first-default layers Y^{1,1}(theta_1) and Y^{1,2}(theta_2) on every
    default node, then the before-default layer Y^0; V_0(x) = U(x) Y^0_0.

    Args:
        market: coefficients.
        family: unordered two-name family without finite ties.
        p: power (p < 1, p != 0).
        A0: pair control set before any default (box, finite or unconstrained).
        A11: survivor control set after name 1 defaulted.
        A12: survivor control set after name 2 defaulted.
        x: initial wealth (> 0).

    Returns:
        BilateralResult.
    """
    if family.ordered or family.n != 2:
        raise ValueError("needs an unordered two-name family")
    if not (p < 1 and p != 0):
        raise ValueError("power utility needs p < 1 and p != 0")
    if x <= 0:
        raise ValueError("initial wealth must be positive")
    bad = family.validate()
    if family.rule.kind == "pmf" and family.finite_ties() > 0:
        bad.append("simultaneous defaults are not supported")
    if bad:
        raise ValueError("; ".join(bad))
    be, g = family.backend, family.grid
    N, dt = g.N, g.dt
    if be.dims not in (1, 2) or (be.dims == 1 and not getattr(be, "is_trivial", False)):
        raise ValueError("needs a two-dimensional Brownian backend")
    w = family.marks.w
    C = coupling_table(family)
    # gamma(i) is (n, th1, e1, th2, e2): contract e2 then e1
    gbar = [np.tensordot(family.gamma(i)[:, : N + 1, :, : N + 1, :] @ w, w, axes=([2], [0])) for i in range(N + 1)]
    thetas = g.nodes
    z2 = 1 if be.dims == 2 else 0

    def after(which, A):
        """Survivor layer for name ``which`` defaulted first; returns (levels, diag)."""
        dens = family.regime_density((which,), N) @ w
        Y = dens[:, : N + 1].copy()
        levels = [None] * (N + 1)
        levels[N] = Y
        diag = [None] * (N + 1)
        diag[N] = Y[:, N]
        b = market.b21 if which == 0 else market.b12
        s = market.sigma21 if which == 0 else market.sigma12
        zc = z2 if which == 0 else 0
        res = 0.0
        for i in range(N - 1, -1, -1):
            t = g.time(i)
            nxt = gbar[i + 1][:, :, i + 1] if which == 0 else gbar[i + 1][:, i + 1, :]
            rate = C[:, i + 1] / dt * be.cond_exp(i, nxt)
            own = gbar[i][:, i, i]
            rate[:, i] += C[i, i] / dt * own
            EY = be.cond_exp(i, Y)
            Z = be.cond_exp_dw(i, Y)[..., zc] / dt
            prm = dict(b=_coef_theta(b, t, thetas), sigma=_coef_theta(s, t, thetas), p=p, A=A, gbar=rate)
            Y, r = _fixed_point(EY, lambda y: generator_f11_pow(t, y, Z, prm) * dt)
            res = max(res, r)
            levels[i] = Y
            diag[i] = Y[:, i]
        return levels, diag, res

    L11, D11, r11 = after(0, A11)
    L12, D12, r12 = after(1, A12)
    Y0 = family.regime_density((), N).copy()
    L0 = [None] * (N + 1)
    L0[N] = Y0
    res = max(r11, r12)
    a0 = (0.0, 0.0)
    for i in range(N - 1, -1, -1):
        t = g.time(i)
        y11 = C[0, i + 1] / dt * be.cond_exp(i, D11[i + 1])
        y12 = C[0, i + 1] / dt * be.cond_exp(i, D12[i + 1])
        if i == 0:
            y11 = y11 + C[0, 0] / dt * D11[0]
            y12 = y12 + C[0, 0] / dt * D12[0]
        EY = be.cond_exp(i, Y0)
        Z = be.cond_exp_dw(i, Y0) / dt
        if Z.shape[-1] == 1:
            Z = np.concatenate([Z, np.zeros_like(Z)], axis=-1)
        prm = dict(b=market.b0, sigma=market.sigma0, e21=market.e21, e12=market.e12, p=p, A=A0, y11=y11, y12=y12)
        Y0, r = _fixed_point(EY, lambda y: generator_f0_pow(t, y, Z, prm) * dt)
        res = max(res, r)
        L0[i] = Y0
        if i == 0:
            a = np.asarray(_f0(t, Y0, Z, prm)[1], dtype=float).reshape(-1, 2)
            a0 = (float(a[0, 0]), float(a[0, 1]))
    y0 = float(np.mean(Y0))
    value = float(x**p / p * y0)
    return BilateralResult(y0, value, a0, res, {"0": L0, "1,1": L11, "1,2": L12})
