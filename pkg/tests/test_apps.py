import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gdecomp.apps import (
    BilateralMarket,
    DefaultableClaim,
    ExpMarket,
    invest_bilateral,
    node_probabilities,
    price_defaultable_claim,
    static_certainty_equivalent,
)
from gdecomp.density import independent_product, pmf_density, poisson_density
from gdecomp.model import (
    TWO_NAMES,
    ControlProblemSpec,
    ControlSet,
    FiniteTree,
    MarkSpace,
    RegimeSpec,
    StateGrid,
    TimeGrid,
    ordered_layout,
)
from gdecomp.oracle import DiscreteModel, pure_enumeration_value

MARKET = ExpMarket(0.1, 0.3, 0.05, 0.25)


def one_name_family(seed, N=3):
    g = TimeGrid(1.0, N)
    tree = FiniteTree.binomial(g)
    rng = np.random.default_rng(seed)
    m = rng.dirichlet(np.ones(N + 2), size=tree.size(N))
    m[:, 0] = 0.0
    m /= m.sum(axis=1, keepdims=True)
    em = rng.dirichlet(np.ones(2), size=(tree.size(N), N + 2))
    return pmf_density(g, MarkSpace((-0.5, -0.2), (0.5, 0.5)), m[:, :, None] * em, ordered_layout(1), tree)


def test_node_probabilities_sum_to_one():
    tree = FiniteTree.from_branching(3, [0.3, 0.7], [-1.0, 1.0])
    assert all(np.isclose(p.sum(), 1.0) for p in node_probabilities(tree))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 2.0))
def test_discrete_scheme_matches_utility_oracle(seed, p):
    # exact states on the tree: the oracle enumerates every adapted finite control
    fam = one_name_family(seed)
    A = ControlSet.finite([-1.0, 0.0, 0.5, 1.0])
    h1 = lambda th, e: 1.0 + 0.5 * th + e
    claim = DefaultableClaim(H0=0.2, H1=lambda st_, t, e: h1(t, e))
    r = price_defaultable_claim(MARKET, claim, fam, p, A, scheme="discrete")
    U = lambda x: -np.exp(-p * x)
    m = MARKET
    regs = {
        "0": RegimeSpec(drift=lambda t, x, a, th, mk: a * m.b0 + 0 * x, vol=lambda t, x, a, th, mk: a * m.sigma0 + 0 * x,
                        terminal_gain=lambda x, th, mk: U(x - 0.2), controls=A),
        "1": RegimeSpec(drift=lambda t, x, a, th, mk: a * m.b1 + 0 * x, vol=lambda t, x, a, th, mk: a * m.sigma1 + 0 * x,
                        terminal_gain=lambda x, th, mk: U(x - h1(th[0], mk[0])), controls=A),
    }
    spec = ControlProblemSpec(fam.grid, ordered_layout(1), regs, {"1": lambda t, x, a, e: x + a * e},
                              x0=0.0, signed_gains=True)
    v = pure_enumeration_value(DiscreteModel(spec, fam, StateGrid(-5.0, 5.0, 3)))
    assert abs(v - U(-r.y0_with_claim)) <= 1e-8 * max(1.0, abs(v))


@pytest.mark.parametrize("scheme", ["exp", "discrete"])
def test_zero_claim_has_zero_price(scheme):
    r = price_defaultable_claim(MARKET, DefaultableClaim(), one_name_family(1), 1.0, ControlSet.interval(-2, 2),
                                scheme=scheme)
    assert abs(r.price) <= 1e-10 and r.scheme == scheme


def test_constant_claim_without_default_risk():
    g = TimeGrid(1.0, 20)
    phi = np.zeros(g.N + 2)
    phi[-1] = 1.0
    fam = pmf_density(g, MarkSpace.single(), phi[:, None])
    r = price_defaultable_claim(MARKET, DefaultableClaim(0.7, 0.7), fam, 1.0, ControlSet.unconstrained())
    assert abs(r.price - 0.7) <= 1e-6


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.3, 3.0))
def test_no_trading_is_static_certainty_equivalent(seed, p):
    fam = one_name_family(seed, N=4)
    claim = DefaultableClaim(H0=lambda st_: 0.3 * st_[:, 0], H1=lambda st_, t, e: 1.0 + t + e)
    for scheme in ("exp", "discrete"):
        r = price_defaultable_claim(ExpMarket(), claim, fam, p, ControlSet.finite([0.0]), scheme=scheme)
        assert abs(r.price - static_certainty_equivalent(claim, fam, p)) <= 1e-8


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10_000), st.floats(-2.0, 2.0))
def test_cash_translation(seed, c):
    fam = one_name_family(seed, N=4)
    claim = DefaultableClaim(H0=0.1, H1=lambda st_, t, e: 0.5 + e)
    A = ControlSet.interval(-2, 2)
    for scheme in ("exp", "discrete"):
        p1 = price_defaultable_claim(MARKET, claim, fam, 1.0, A, scheme=scheme).price
        p2 = price_defaultable_claim(MARKET, claim.shifted(c), fam, 1.0, A, scheme=scheme).price
        assert abs(p2 - p1 - c) <= 1e-8


def test_value_scheme_tracks_exp_scheme_on_a_density():
    fam = poisson_density(0.5, 1, TimeGrid(1.0, 100), MarkSpace.single(-0.5))
    claim = DefaultableClaim(0.0, 1.0)
    A = ControlSet.interval(-2, 2)
    pe = price_defaultable_claim(MARKET, claim, fam, 1.0, A).price
    pv = price_defaultable_claim(MARKET, claim, fam, 1.0, A, scheme="value")
    assert abs(pe - pv.price) <= 1e-3 and pv.floors_hit == 0
    assert pv.to_dict()["form"] == "derived"


def test_pricing_input_checks():
    fam = one_name_family(0)
    with pytest.raises(ValueError):
        price_defaultable_claim(MARKET, DefaultableClaim(), fam, 1.0, ControlSet.finite([0.0]), scheme="value")
    with pytest.raises(ValueError):
        price_defaultable_claim(MARKET, DefaultableClaim(), fam, 1.0, ControlSet.finite([0.0]), scheme="pde")
    with pytest.raises(ValueError):
        price_defaultable_claim(MARKET, DefaultableClaim(), fam, -1.0, ControlSet.finite([0.0]))
    with pytest.raises(ValueError):
        price_defaultable_claim(MARKET, DefaultableClaim(5.0, bound=1.0), fam, 1.0, ControlSet.finite([0.0]))
    with pytest.raises(ValueError):
        price_defaultable_claim(MARKET, DefaultableClaim(np.inf), fam, 1.0, ControlSet.finite([0.0]))


# ---------------------------------------------------------------------------
# bilateral


def two_name_family(seed, N=4, symmetric=False):
    g = TimeGrid(1.0, N)
    tree = FiniteTree.binomial(g, dims=2)
    rng = np.random.default_rng(seed)
    m = rng.random((tree.size(N), N + 2, N + 2))
    m[:, 0, :] = m[:, :, 0] = 0.0
    for k in range(N + 1):
        m[:, k, k] = 0.0
    if symmetric:
        m = 0.5 * (m + np.transpose(m, (0, 2, 1)))
    m /= m.sum(axis=(1, 2), keepdims=True)
    return pmf_density(g, MarkSpace.single(), m[:, :, None, :, None], TWO_NAMES, tree)


def test_merton_limit():
    N = 100
    g = TimeGrid(1.0, N)
    phi = np.zeros(N + 2)
    phi[-1] = 1.0
    fam = independent_product(g, MarkSpace.single(), [(phi, [1.0]), (phi, [1.0])])
    r = invest_bilateral(BilateralMarket(b0=(0.2, 0.0), sigma0=(0.4, 1.0)), fam, 0.5, ControlSet.box((-5, 5), (0, 0)),
                         ControlSet.interval(-5, 0.99), ControlSet.interval(-5, 0.99))
    assert abs(r.y0 - np.exp(0.125)) <= 1e-3
    # Merton fraction b / ((1 - p) sigma^2)
    assert abs(r.fractions_t0[0] - 2.5) <= 1e-6
    assert np.isclose(r.value_at_x, r.y0 / 0.5)


def test_symmetric_names_get_symmetric_fractions():
    fam = two_name_family(3, symmetric=True)
    mk = BilateralMarket(b0=(0.1, 0.1), sigma0=(0.3, 0.3), b21=0.1, sigma21=0.3, b12=0.1, sigma12=0.3,
                         e21=-0.2, e12=-0.2)
    box = ControlSet.box((-0.5, 0.5), (-0.5, 0.5))
    r = invest_bilateral(mk, fam, 0.5, box, ControlSet.interval(-0.5, 0.5), ControlSet.interval(-0.5, 0.5))
    assert abs(r.fractions_t0[0] - r.fractions_t0[1]) <= 1e-6
    assert r.y0 > 0
    assert r.to_dict()["y0"] == r.y0


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.2, 0.8))
def test_shrinking_controls_never_helps(seed, p):
    fam = two_name_family(seed)
    mk = BilateralMarket(b0=(0.12, 0.05), sigma0=(0.3, 0.25), b21=0.1, sigma21=0.3, b12=0.08, sigma12=0.2,
                         e21=-0.2, e12=0.1)
    ys = [invest_bilateral(mk, fam, p, ControlSet.box((-r, r), (-r, r)), ControlSet.interval(-r, min(r, 0.9)),
                           ControlSet.interval(-r, min(r, 0.9))).y0 for r in (0.0, 0.3, 0.8)]
    assert ys[0] <= ys[1] + 1e-12 and ys[1] <= ys[2] + 1e-12


def test_bilateral_input_checks():
    fam = two_name_family(0)
    z1, z2 = ControlSet.finite([0.0]), ControlSet.finite([(0.0, 0.0)])
    mk = BilateralMarket()
    with pytest.raises(ValueError):
        invest_bilateral(mk, fam, 1.0, z2, z1, z1)
    with pytest.raises(ValueError):
        invest_bilateral(mk, fam, 0.5, z2, z1, z1, x=0.0)
    with pytest.raises(ValueError):
        invest_bilateral(mk, one_name_family(0), 0.5, z2, z1, z1)
    g = TimeGrid(1.0, 2)
    arr = np.zeros((4, 1, 4, 1))
    arr[1, 0, 1, 0] = 1.0
    ties = pmf_density(g, MarkSpace.single(), arr, TWO_NAMES)
    with pytest.raises(ValueError, match="simultaneous"):
        invest_bilateral(mk, ties, 0.5, z2, z1, z1)
