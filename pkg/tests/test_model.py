import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gdecomp.model import (
    TWO_NAMES,
    ControlProblemSpec,
    ControlSet,
    FiniteTree,
    Layout,
    MarkSpace,
    MonteCarloRegression,
    RegimeSpec,
    StateGrid,
    TimeGrid,
    ordered_layout,
    orderize,
    validate_spec,
)

times = st.lists(st.one_of(st.floats(0, 10, allow_nan=False), st.just(math.inf)), min_size=0, max_size=6)


@given(times)
def test_orderize_sorts_and_tracks_indices(ts):
    sc = orderize(ts, [f"m{k}" for k in range(len(ts))])
    assert list(sc.times) == sorted(ts)
    assert sorted(sc.index_marks) == list(range(1, len(ts) + 1))
    for t, m, j in zip(sc.times, sc.marks, sc.index_marks):
        assert ts[j - 1] == t and m == f"m{j - 1}"


def test_orderize_ties_keep_original_order():
    sc = orderize([2.0, 1.0, 2.0], ["a", "b", "c"])
    assert sc.index_marks == (2, 1, 3)
    with pytest.raises(ValueError):
        orderize([-1.0])


def test_time_grid():
    g = TimeGrid(1.0, 3)
    assert g.nodes[-1] == 1.0 and g.time(4) == math.inf
    assert len(g.theta_values) == 5
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0)
    with pytest.raises(ValueError):
        TimeGrid(-1.0, 2)


def test_mark_space():
    m = MarkSpace((0.0, 1.0), (0.25, 0.75))
    assert m.M == 2 and np.allclose(m.w, [0.25, 0.75])
    with pytest.raises(ValueError):
        MarkSpace((0.0,), (0.5,))
    assert MarkSpace((0.0,), (2.0,), pmf=False).w[0] == 2.0


@given(st.floats(-3, 3), st.floats(-2, 2), st.lists(st.floats(-8, 8), min_size=1, max_size=10))
def test_state_grid_interp_is_exact_on_affine_tables(a, b, xs):
    sg = StateGrid(-5.0, 5.0, 21)
    table = a * sg.nodes + b
    x = np.asarray(xs)
    out, clamped = sg.interp(table, x)
    xc = np.clip(x, -5.0, 5.0)
    assert np.allclose(out, a * xc + b, atol=1e-12)
    assert clamped == int(np.count_nonzero(np.abs(x) > 5.0 + 1e-8))


def test_state_grid_reads_nodes_exactly():
    sg = StateGrid(0.0, 3.0, 31)
    table = np.random.default_rng(0).normal(size=31)
    out, _ = sg.interp(table, sg.nodes + 1e-12)
    assert np.array_equal(out, table)


@given(st.floats(-10, 10), st.floats(0, 5), st.floats(-20, 20))
def test_interval_projection(lo, width, a):
    cs = ControlSet.interval(lo, lo + width)
    p = cs.project(a)
    assert cs.contains(p)
    assert cs.project(p) == p


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6, unique=True), st.floats(-10, 10))
def test_finite_projection_is_nearest(pts, a):
    cs = ControlSet.finite(pts)
    p = float(cs.project(a))
    assert cs.contains(p)
    assert abs(p - a) <= min(abs(q - a) for q in pts) + 1e-12


def test_control_set_violations():
    assert ControlSet.interval(1.0, 0.0).violations()
    assert ControlSet.finite([]).violations()
    assert ControlSet.box((0, 1), (0, 1)).dim == 2
    assert ControlSet.box((0, 1), (-1, 1)).contains([0.5, -1.0])


def test_layouts():
    assert ordered_layout(2).labels() == ["0", "1", "2"]
    assert ordered_layout(2).jump_labels() == ["1", "2"]
    assert TWO_NAMES.labels() == ["0", "1,1", "1,2", "2"]
    assert TWO_NAMES.jump_labels() == ["1,1", "1,2", "2,1", "2,2"]
    assert TWO_NAMES.next_sets((), simultaneous=True) == [(0,), (1,), (0, 1)]
    with pytest.raises(ValueError):
        Layout(3, False)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 2))
def test_binomial_tree_martingale_and_increment_variance(N, d):
    g = TimeGrid(1.0, N)
    tree = FiniteTree.binomial(g, dims=d)
    for i in range(N):
        W = tree.state[i + 1]
        assert np.allclose(tree.cond_exp(i, W), tree.state[i])
        # E[W_{i+1} dW] = dt per dimension
        edw = tree.cond_exp_dw(i, W[:, 0])
        assert np.allclose(edw[:, 0], g.dt)
        assert np.allclose(tree.cond_exp(i, np.ones(tree.size(i + 1))), 1.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.floats(0.1, 0.9))
def test_branching_tree_tower_property(N, p):
    tree = FiniteTree.from_branching(N, [p, 1 - p], [-1.0, 1.0])
    rng = np.random.default_rng(N)
    f = rng.normal(size=tree.size(N))
    v = f
    for i in range(N - 1, -1, -1):
        v = tree.cond_exp(i, v)
    probs = np.ones(1)
    for i in range(N):
        probs = (probs[:, None] * tree.probs[i]).reshape(-1)
    assert np.isclose(v[0], np.dot(probs, f))


def test_tree_rejects_bad_probabilities():
    with pytest.raises(ValueError):
        FiniteTree([np.zeros((1, 2), int)], [np.array([[0.3, 0.3]])], [np.zeros((1, 2, 1))],
                   [np.zeros((1, 1)), np.zeros((1, 1))])


def test_mc_regression_reproduces_basis_and_is_seeded():
    g = TimeGrid(1.0, 4)
    a = MonteCarloRegression(g, 2000, degree=2, seed=3)
    b = MonteCarloRegression(g, 2000, degree=2, seed=3)
    assert np.array_equal(a.increments, b.increments)
    W = a.state[2][:, 0]
    assert np.allclose(a.cond_exp(2, W**2 + 1.0), W**2 + 1.0)
    with pytest.raises(ValueError):
        MonteCarloRegression(g, 2, degree=3)


def _spec(**kw):
    g = TimeGrid(1.0, 2)
    regs = {"0": RegimeSpec(**kw), "1": RegimeSpec()}
    return ControlProblemSpec(g, ordered_layout(1), regs, {"1": lambda t, x, a, e: x}), g


def test_validate_spec():
    spec, g = _spec()
    assert validate_spec(spec, g, MarkSpace.single()).ok
    spec, g = _spec(running_gain=lambda t, x, a, th, mk: x - 10.0)
    rep = validate_spec(spec, g, MarkSpace.single())
    assert not rep.ok and "nonnegative" in rep.violations[0]
    spec, g = _spec(drift=lambda t, x, a, th, mk: np.where(x > 0, np.inf, 0.0))
    assert "not finite" in validate_spec(spec, g, MarkSpace.single()).violations[0]
    bad = ControlProblemSpec(g, ordered_layout(1), {"0": RegimeSpec()}, {})
    assert validate_spec(bad, g, MarkSpace.single()).violations == ("regime 1 missing", "jump map 1 missing")
