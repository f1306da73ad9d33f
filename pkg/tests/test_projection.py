import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gdecomp.density import independent_product, poisson_density
from gdecomp.model import TWO_NAMES, FiniteTree, GOptionalTuple, MarkSpace, TimeGrid, ordered_layout
from gdecomp.oracle import random_instance
from gdecomp.projection import (
    coupling_table,
    direct_expectation,
    expectation_functional,
    expectation_functional_two_names,
    project_optional,
    project_optional_backward,
    time_weights,
)


def random_tuple(layout, seed, predictable=False):
    rng = np.random.default_rng(seed)
    comps = {}
    for lab in layout.labels():
        c = rng.normal(size=5)

        def f(ctx, c=c):
            out = c[0] + c[1] * ctx.t + c[2] * ctx.state[..., 0]
            for th, e in zip(ctx.theta_idx, ctx.mark_idx):
                out = out + c[3] * np.asarray(th) + c[4] * np.asarray(e)
            return out

        comps[lab] = f
    return GOptionalTuple(comps, predictable)


def test_time_weights():
    g = TimeGrid(1.0, 4)
    assert np.allclose(time_weights(g, "left"), [0.25, 0.25, 0.25, 0.25, 0.0])
    assert np.allclose(time_weights(g, "trapezoid"), [0.125, 0.25, 0.25, 0.25, 0.125])
    with pytest.raises(ValueError):
        time_weights(g, "right")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.booleans(), st.floats(-3, 3))
def test_constant_projects_to_itself(seed, two, c):
    fam = random_instance(seed, two_names=two).family
    Y = GOptionalTuple.constant(fam.layout, c)
    for i in range(fam.grid.N + 1):
        assert np.allclose(project_optional(Y, fam, fam.grid.time(i)), c, atol=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_forward_and_backward_projection_agree(seed, two):
    fam = random_instance(seed, two_names=two).family
    Y = random_tuple(fam.layout, seed)
    for i in range(fam.grid.N + 1):
        t = fam.grid.time(i)
        a = project_optional(Y, fam, t)
        b = project_optional_backward(Y, fam, t)
        assert np.allclose(a, b.value, atol=1e-12)
        assert b.level == i and set(b.layers) == set(fam.layout.labels())


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(-2, 2))
def test_projection_is_linear(seed, c):
    fam = random_instance(seed).family
    Y1, Y2 = random_tuple(fam.layout, seed), random_tuple(fam.layout, seed + 1)
    comb = GOptionalTuple({lab: (lambda ctx, lab=lab: Y1.components[lab](ctx) + c * Y2.components[lab](ctx))
                           for lab in fam.layout.labels()})
    t = fam.grid.time(1)
    lhs = project_optional(comb, fam, t)
    assert np.allclose(lhs, project_optional(Y1, fam, t) + c * project_optional(Y2, fam, t), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.booleans(), st.sampled_from(["left", "trapezoid"]), st.booleans())
def test_expectation_matches_enumeration(seed, two, rule, predictable):
    fam = random_instance(seed, two_names=two).family
    Y = random_tuple(fam.layout, seed, predictable)
    Z = random_tuple(fam.layout, seed + 7)
    J = expectation_functional(Y, Z, fam, time_rule=rule)
    assert abs(J.J0 - direct_expectation(Y, Z, fam, rule)) <= 1e-12


def test_expectation_of_constants():
    fam = random_instance(3).family
    one, zero = GOptionalTuple.constant(fam.layout, 1.0), GOptionalTuple.constant(fam.layout, 0.0)
    assert np.isclose(expectation_functional(one, zero, fam).J0, fam.grid.T)
    assert np.isclose(expectation_functional(zero, one, fam).J0, 1.0)
    assert np.isclose(expectation_functional(one, zero, fam, time_rule="trapezoid").J0, fam.grid.T)


def test_poisson_expectation_of_default_count():
    # E[number of arrivals by T] for two tracked arrivals: 1 - P(tau_1 > T) + 1 - P(tau_2 > T)
    g = TimeGrid(1.0, 200)
    fam = poisson_density(1.0, 2, g)
    count = GOptionalTuple({"0": 0.0, "1": 1.0, "2": 2.0})
    zero = GOptionalTuple.constant(fam.layout, 0.0)
    J = expectation_functional(zero, count, fam).J0
    exact = (1 - np.exp(-1.0)) + (1 - 2 * np.exp(-1.0))
    assert abs(J - exact) <= 1e-6


def test_two_names_wrapper_and_horizon_check():
    g = TimeGrid(1.0, 3)
    phi = np.array([0.0, 0.1, 0.1, 0.1, 0.7])
    fam = independent_product(g, MarkSpace.single(), [(phi, [1.0]), (phi, [1.0])], backend=FiniteTree.binomial(g))
    one = GOptionalTuple.constant(TWO_NAMES, 1.0)
    zero = GOptionalTuple.constant(TWO_NAMES, 0.0)
    J = expectation_functional_two_names(zero, one, fam)
    assert np.isclose(J.J0, 1.0)
    assert set(J.layers) == {"0", "1,1", "1,2", "2"}
    with pytest.raises(ValueError):
        expectation_functional(zero, one, fam, T=2.0)
    with pytest.raises(ValueError):
        expectation_functional_two_names(zero, one, poisson_density(1.0, 2, g))


def test_coupling_table():
    g = TimeGrid(1.0, 3)
    pmf = random_instance(0, N=3).family
    C = coupling_table(pmf)
    assert np.array_equal(C, np.triu(np.ones((4, 4)), 1))
    q = poisson_density(1.0, 1, g, rule="trapezoid")
    Cq = coupling_table(q)
    assert np.allclose(Cq[0], [1 / 6, 1 / 3, 1 / 3, 1 / 6])
    assert np.all(np.tril(Cq, -1) == 0)


def test_projection_rejects_off_grid_time():
    fam = poisson_density(1.0, 1, TimeGrid(1.0, 4))
    with pytest.raises(ValueError):
        project_optional(GOptionalTuple.constant(ordered_layout(1)), fam, 0.3)
