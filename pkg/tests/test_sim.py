import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gdecomp.decompose import d1_instance, extract_policy, solve_ordered
from gdecomp.density import pmf_density, pmf_from_entries, poisson_density
from gdecomp.model import ControlProblemSpec, FiniteTree, MarkSpace, RegimeSpec, TimeGrid, ordered_layout
from gdecomp.sim import (
    BATCH,
    batch_rng,
    mc_gain,
    sample_default_indices,
    sample_default_scenario,
    simulate_paths,
)


def test_batch_streams_are_deterministic_and_distinct():
    a = batch_rng(3, 1, 0).random(5)
    assert np.array_equal(a, batch_rng(3, 1, 0).random(5))
    assert not np.array_equal(a, batch_rng(3, 1, 1).random(5))
    assert not np.array_equal(a, batch_rng(3, 2, 0).random(5))


def test_d1_default_frequencies():
    _, fam, _ = d1_instance()
    n = 100_000
    th, _ = sample_default_indices(fam, batch_rng(0, 9, 0).random(n))
    for k, p in zip((1, 2, 3), (0.3, 0.3, 0.4)):
        freq = np.mean(th[:, 0] == k)
        assert abs(freq - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_no_default_before_horizon():
    g = TimeGrid(1.0, 4)
    fam = pmf_from_entries(g, MarkSpace.single(), {(5,): 1.0})
    sc = sample_default_scenario(fam, seed=4)
    assert sc.times == (math.inf,) and sc.index_marks == (1,)


def test_poisson_survival_frequency():
    g = TimeGrid(1.0, 50)
    fam = poisson_density(1.0, 1, g)
    n = 50_000
    th, _ = sample_default_indices(fam, batch_rng(1, 9, 0).random(n))
    p = math.exp(-1.0)
    # the trapezoid mass in [0, T] is off by O(dt^2)
    assert abs(np.mean(th[:, 0] == g.N + 1) - p) <= 3 * math.sqrt(p * (1 - p) / n) + 1e-3


def test_constant_gains_have_zero_error():
    spec, fam, _ = d1_instance(controls=(0.0,))
    zero = ControlProblemSpec(spec.grid, spec.layout,
                              {lab: RegimeSpec(terminal_gain=lambda x, th, mk: 0.0 * x, controls=r.controls)
                               for lab, r in spec.regimes.items()}, spec.jumps, spec.x0)
    assert mc_gain(None, zero, fam, 1000) == (0.0, 0.0)
    one = ControlProblemSpec(spec.grid, spec.layout,
                             {lab: RegimeSpec(terminal_gain=lambda x, th, mk: 0.0 * x + 1.0, controls=r.controls)
                              for lab, r in spec.regimes.items()}, spec.jumps, spec.x0)
    assert mc_gain(None, one, fam, 1000) == (1.0, 0.0)


def test_d1_optimal_policy_gain():
    spec, fam, sg = d1_instance()
    pol = extract_policy(solve_ordered(spec, fam, state_grid=sg))
    m, se = mc_gain(pol, spec, fam, 100_000, seed=2)
    assert abs(m - 1.21) <= 3 * se


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 1000))
def test_paths_do_not_depend_on_threads(seed):
    spec, fam, _ = d1_instance()
    a = simulate_paths(spec, fam, BATCH + 17, seed, threads=1)
    b = simulate_paths(spec, fam, BATCH + 17, seed, threads=3)
    for k in ("increments", "states", "regimes", "thetas", "marks", "gains"):
        assert np.array_equal(getattr(a, k), getattr(b, k))


def test_csv_layout(tmp_path):
    spec, fam, _ = d1_instance()
    pb = simulate_paths(spec, fam, 4, seed=1)
    out = tmp_path / "paths.csv"
    pb.to_csv(out)
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["path_id", "t", "state", "regime", "theta_1", "e_1"]
    assert len(rows) == 1 + 4 * (fam.grid.N + 1)


def test_zero_coefficients_keep_the_state():
    g = TimeGrid(1.0, 10)
    fam = pmf_from_entries(g, MarkSpace.single(), {(11,): 1.0})
    spec = ControlProblemSpec(g, ordered_layout(1), {"0": RegimeSpec(), "1": RegimeSpec()},
                              {"1": lambda t, x, a, e: x}, x0=2.5)
    pb = simulate_paths(spec, fam, 100, seed=0, noise="gaussian")
    assert np.all(pb.states == 2.5)


def test_gaussian_increments():
    g = TimeGrid(1.0, 4)
    fam = pmf_from_entries(g, MarkSpace.single(), {(5,): 1.0})
    spec = ControlProblemSpec(g, ordered_layout(1), {"0": RegimeSpec(), "1": RegimeSpec()},
                              {"1": lambda t, x, a, e: x})
    dw = simulate_paths(spec, fam, 40_000, seed=5, noise="gaussian").increments.ravel()
    n = dw.size
    assert abs(dw.mean()) <= 5 * math.sqrt(g.dt / n)
    assert abs(dw.var() - g.dt) <= 5 * g.dt * math.sqrt(2 / n)


def test_tree_noise_uses_the_backend_increments():
    g = TimeGrid(1.0, 3)
    tree = FiniteTree.binomial(g)
    m = np.zeros((tree.size(3), 5))
    m[:, 4] = 1.0
    fam = pmf_density(g, MarkSpace.single(), m[:, :, None], ordered_layout(1), tree)
    spec = ControlProblemSpec(g, ordered_layout(1),
                              {"0": RegimeSpec(vol=lambda t, x, a, th, mk: 1.0 + 0 * x), "1": RegimeSpec()},
                              {"1": lambda t, x, a, e: x})
    pb = simulate_paths(spec, fam, 50, seed=1)
    assert np.allclose(np.abs(pb.increments), math.sqrt(g.dt))
    assert np.allclose(pb.states[:, -1], pb.increments.sum(axis=1))


def test_input_checks():
    spec, fam, _ = d1_instance(masses=(0.3, 0.3, 0.3))
    with pytest.raises(ValueError, match="normalized"):
        simulate_paths(spec, fam, 10)
    spec, fam, _ = d1_instance()
    with pytest.raises(ValueError):
        simulate_paths(spec, fam, 0)
    with pytest.raises(ValueError):
        simulate_paths(spec, fam, 10, noise="brownian")
    with pytest.raises(ValueError, match="pmf"):
        mc_gain(None, spec, poisson_density(1.0, 1, spec.grid), 10)
