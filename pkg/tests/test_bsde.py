import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gdecomp.bsde import (
    BsdeSpec,
    convex_min_1d,
    dist2_to_scaled_set,
    exp_utility,
    generator_f0_pow,
    generator_f0H,
    generator_f1,
    generator_f11_pow,
    merton_exponential_reference,
    merton_power_reference,
    positivity,
    safe_exp,
    solve_backward_euler,
)
from gdecomp.model import ControlSet, FiniteTree, MarkSpace, MonteCarloRegression, NumericalError, TimeGrid


def test_dist2_examples():
    v, a = dist2_to_scaled_set(0.7, ControlSet.interval(0, 1), 0.4)
    assert np.isclose(v, 0.09) and a == 1.0
    v, a = dist2_to_scaled_set(0.2, ControlSet.interval(0, 1), 0.4)
    assert v == 0.0 and np.isclose(a, 0.5)
    v, a = dist2_to_scaled_set(1.0, ControlSet.finite([0.0]), 3.0)
    assert v == 1.0 and a == 0.0
    v, _ = dist2_to_scaled_set(5.0, ControlSet.unconstrained(), 0.4)
    assert v == 0.0
    with pytest.raises(ValueError):
        dist2_to_scaled_set(0.0, ControlSet.interval(0, 1), 0.0)


@given(st.floats(-5, 5), st.floats(-2, 2), st.floats(0, 3), st.floats(0.1, 2))
def test_dist2_is_a_squared_distance(point, lo, width, s):
    A = ControlSet.interval(lo, lo + width)
    v, a = dist2_to_scaled_set(point, A, s)
    assert A.contains(a)
    assert np.isclose(v, (point - a * s) ** 2)
    grid = np.linspace(lo, lo + width, 101)
    assert v <= np.min((point - grid * s) ** 2) + 1e-12
    if lo * s <= point <= (lo + width) * s:
        # a * sigma reproduces the point up to one rounding
        assert v <= (4e-16 * max(1.0, abs(point))) ** 2


def test_f1_closed_forms():
    prm = {"b": 0.2, "sigma": 0.4, "p": 1.0, "A": ControlSet.unconstrained()}
    assert np.isclose(generator_f1(0.0, 0.0, prm), -0.125)
    prm["A"] = ControlSet.finite([0.0])
    # no trading: -theta z - theta^2/2p + (p/2)(z + theta/p)^2 = p z^2 / 2
    assert np.isclose(generator_f1(0.0, 0.3, prm), 0.5 * 0.09)


def test_f0H_examples():
    marks = MarkSpace.single(0.0)
    prm = {"b": 0.0, "sigma": 1.0, "p": 1.0, "A": ControlSet.finite([0.0]), "marks": marks, "y1": np.zeros(1),
           "form": "printed"}
    assert np.isclose(generator_f0H(0.0, 0.0, 0.0, prm), 2.0)
    prm["form"] = "derived"
    # derived form: (p/2) z'^2 + U(y) U(-y1) / p = 0 + (-1)(-1) = 1
    assert np.isclose(generator_f0H(0.0, 0.0, 0.0, prm), 1.0)
    prm.update(A=ControlSet.unconstrained(), b=0.3, sigma=0.5, rate=0.0)
    assert np.isclose(generator_f0H(0.0, 0.0, 0.0, prm), -(0.6**2) / 2)
    prm.update(rate=1.0)
    assert abs(generator_f0H(0.0, 40.0, 0.0, prm) - (-(0.6**2) / 2)) <= 1e-12
    with pytest.raises(ValueError):
        generator_f0H(0.0, 0.0, 0.0, dict(prm, form="other"))


def test_f11_examples():
    prm = {"b": 0.2, "sigma": 0.4, "p": 0.5, "A": ControlSet.interval(0.0, 1.0), "gbar": 0.0}
    assert np.isclose(generator_f11_pow(0.0, 1.0, 0.0, prm), 0.08)
    prm.update(A=ControlSet.finite([0.0]), gbar=0.7)
    assert np.isclose(generator_f11_pow(0.0, 1.0, 0.0, prm), 0.7)
    prm.update(A=ControlSet.interval(-1.0, 0.9), gbar=0.0, b=0.0)
    assert generator_f11_pow(0.0, 1.0, 0.0, prm) == 0.0
    with pytest.raises(NumericalError):
        generator_f11_pow(0.0, -1.0, 0.0, prm)
    with pytest.raises(ValueError):
        generator_f11_pow(0.0, 1.0, 0.0, dict(prm, p=1.0))


@settings(max_examples=30, deadline=None)
@given(st.floats(-0.3, 0.3), st.floats(0.1, 0.5), st.floats(0.1, 0.9), st.floats(0.0, 2.0), st.floats(0.2, 3.0))
def test_f11_beats_every_grid_control(b, s, p, gbar, y):
    A = ControlSet.interval(-2.0, 0.95)
    prm = {"b": b, "sigma": s, "p": p, "A": A, "gbar": gbar}
    f = generator_f11_pow(0.0, y, 0.0, prm)
    a = np.linspace(-2.0, 0.95, 400)
    vals = p * (b * y * a - 0.5 * (1 - p) * y * s**2 * a**2 + gbar * (1 - a) ** p / p)
    assert f >= vals.max() - 1e-9


def test_f0_pow_examples():
    prm = {"b": np.array([0.2, 0.1]), "sigma": np.array([0.4, 0.3]), "p": 0.5, "e21": 0.0, "e12": 0.0,
           "A": ControlSet.box((-10, 10), (-10, 10)), "y11": 0.0, "y12": 0.0}
    exact = 0.5 * (0.04 / (2 * 0.5 * 0.16) + 0.01 / (2 * 0.5 * 0.09))
    assert np.isclose(generator_f0_pow(0.0, 1.0, np.zeros(2), prm), exact)
    prm.update(A=ControlSet.finite([(0.0, 0.0)]), y11=0.3, y12=0.2)
    assert np.isclose(generator_f0_pow(0.0, 1.0, np.zeros(2), prm), 0.5)


def test_f0_pow_symmetric_argmax():
    from gdecomp.bsde import _f0

    prm = {"b": np.array([0.1, 0.1]), "sigma": np.array([0.3, 0.3]), "p": 0.5, "e21": -0.2, "e12": -0.2,
           "A": ControlSet.box((-0.5, 0.5), (-0.5, 0.5)), "y11": 0.4, "y12": 0.4}
    _, a = _f0(0.0, np.array([1.0]), np.zeros((1, 2)), prm)
    assert abs(a[0, 0] - a[0, 1]) <= 1e-6
    assert positivity(a, -0.2, -0.2).all()


def test_references():
    assert merton_exponential_reference(0.2, 0.4, 1.0, 1.0) == -0.125
    assert merton_exponential_reference(0.0, 0.4, 1.0, 1.0) == 0.0
    assert merton_exponential_reference(0.2, 0.4, 1.0, 0.0) == 0.0
    assert np.isclose(merton_exponential_reference(lambda t: 0.2 + 0 * t, 0.4, 1.0, 1.0), -0.125)
    assert np.isclose(merton_power_reference(0.2, 0.4, 0.5, 1.0), np.exp(0.125))
    assert np.isclose(merton_power_reference([0.2, 0.2], [0.4, 0.4], 0.5, 1.0), np.exp(0.25))
    with pytest.raises(ValueError):
        merton_power_reference(0.2, 0.4, 1.0, 1.0)


def test_utilities_saturate():
    assert np.isfinite(safe_exp(1e4))
    assert exp_utility(0.0, 2.0) == -1.0


def test_convex_min_unconstrained_expands_bracket():
    v, a = convex_min_1d(lambda a: (a - 500.0) ** 2, ControlSet.unconstrained(), np.asarray(0.0))
    assert abs(a - 500.0) <= 1e-5 and v <= 1e-9


@settings(max_examples=10, deadline=None)
@given(st.floats(-3, 3), st.integers(1, 6))
def test_zero_generator_keeps_constants(c, N):
    g = TimeGrid(1.0, N)
    sol = solve_backward_euler(BsdeSpec("zero", c), g, FiniteTree.binomial(g))
    assert all(np.allclose(Y, c) for Y in sol.Y)
    assert all(np.allclose(Z, 0.0) for Z in sol.Z)


def test_terminal_exactness_and_residuals():
    g = TimeGrid(1.0, 8)
    tree = FiniteTree.binomial(g)
    term = np.sin(tree.state[8][:, 0])
    spec = BsdeSpec("f1_exp", term, {"b": 0.1, "sigma": 0.3, "p": 2.0, "A": ControlSet.interval(-1, 1)})
    sol = solve_backward_euler(spec, g, tree)
    assert np.array_equal(sol.Y[8], term)
    assert np.max(sol.residuals) <= 1e-9


def test_zero_generator_comparison():
    g = TimeGrid(1.0, 5)
    tree = FiniteTree.binomial(g)
    h = tree.state[5][:, 0]
    lo = solve_backward_euler(BsdeSpec("zero", h), g, tree).y0
    hi = solve_backward_euler(BsdeSpec("zero", h + np.abs(h)), g, tree).y0
    assert hi >= lo


def test_merton_exponential_and_no_trading():
    g = TimeGrid(1.0, 200)
    tree = FiniteTree.trivial(200)
    prm = {"b": 0.2, "sigma": 0.4, "p": 1.0, "A": ControlSet.unconstrained()}
    assert abs(solve_backward_euler(BsdeSpec("f1_exp", 0.0, prm), g, tree).y0 + 0.125) <= 1.25e-4
    prm["A"] = ControlSet.finite([0.0])
    assert solve_backward_euler(BsdeSpec("f1_exp", 0.0, prm), g, tree).y0 == 0.0


def test_merton_exponential_on_regression_backend():
    g = TimeGrid(1.0, 20)
    be = MonteCarloRegression(g, 4000, degree=2, seed=1)
    prm = {"b": 0.2, "sigma": 0.4, "p": 1.0, "A": ControlSet.unconstrained()}
    assert abs(solve_backward_euler(BsdeSpec("f1_exp", 0.0, prm), g, be).y0 + 0.125) <= 1e-3


def test_spec_violations():
    g = TimeGrid(1.0, 2)
    tree = FiniteTree.trivial(2)
    for spec in (BsdeSpec("nope"), BsdeSpec("f1_exp", 0.0, {"p": -1.0}), BsdeSpec("f0_pow", 0.0, {"p": 1.0}),
                 BsdeSpec("zero", 0.0, {"sigma": -1.0}), BsdeSpec("zero", scheme="crank")):
        assert spec.violations()
        with pytest.raises(ValueError):
            solve_backward_euler(spec, g, tree)


def test_fixed_point_failure_is_reported():
    g = TimeGrid(1.0, 2)
    spec = BsdeSpec("custom", 1.0, {"fn": lambda i, t, y, z: 10.0 * y + 1.0}, max_iter=5)
    with pytest.raises(NumericalError):
        solve_backward_euler(spec, g, FiniteTree.trivial(2))
