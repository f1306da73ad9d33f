import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gdecomp.decompose import d1_instance
from gdecomp.density import poisson_density
from gdecomp.model import ControlProblemSpec, ControlSet, RegimeSpec, StateGrid, TimeGrid
from gdecomp.oracle import (
    BudgetExceeded,
    DiscreteModel,
    brute_force_value,
    compare,
    pure_enumeration_value,
    random_instance,
)


def test_d1_report():
    spec, fam, sg = d1_instance()
    rep = compare(DiscreteModel(spec, fam, sg))
    assert rep.ok and rep.v_brute == 1.21
    assert rep.abs_diff <= 1e-15
    assert rep.policy_agreement == 1.0
    d = rep.to_dict()
    assert set(d) >= {"v_brute", "v_decomposed", "abs_diff", "layer_diffs", "ok", "flags"}


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([2, 3, 4]))
def test_ordered_instances_agree(seed, N):
    rep = compare(random_instance(seed, N=N))
    assert rep.ok, rep.to_dict()
    assert max(rep.layer_diffs.values()) <= 1e-10


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_two_name_instances_agree(seed, sym):
    rep = compare(random_instance(seed, two_names=True, symmetric=sym))
    assert rep.ok, rep.to_dict()


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_pure_enumeration_matches_dynamic_programming(seed):
    # lattice states stay on the grid, so interpolation is exact
    m = random_instance(seed, N=2)
    assert abs(pure_enumeration_value(m) - brute_force_value(m)) <= 1e-12


def test_random_instances_are_seeded():
    a, b = random_instance(5), random_instance(5)
    assert np.array_equal(a.family.gamma(a.family.grid.N), b.family.gamma(b.family.grid.N))
    assert compare(a).v_brute == compare(b).v_brute


def test_budget_and_admissibility_checks():
    spec, fam, sg = d1_instance()
    with pytest.raises(BudgetExceeded):
        brute_force_value(DiscreteModel(spec, fam, sg, budget=2))
    regs = dict(spec.regimes, **{"0": RegimeSpec(controls=ControlSet.interval(0.0, 1.0))})
    bad = ControlProblemSpec(spec.grid, spec.layout, regs, spec.jumps, spec.x0)
    with pytest.raises(ValueError, match="finite"):
        brute_force_value(DiscreteModel(bad, fam, sg))
    pois = poisson_density(1.0, 1, TimeGrid(1.0, 2))
    with pytest.raises(ValueError, match="pmf"):
        brute_force_value(DiscreteModel(spec, pois, sg))
    with pytest.raises(ValueError):
        pure_enumeration_value(random_instance(1, N=4))


def test_unnormalized_density_is_flagged():
    spec, fam, sg = d1_instance(masses=(0.3, 0.3, 0.3))
    rep = compare(DiscreteModel(spec, fam, sg))
    assert not rep.ok and rep.v_brute is None and rep.flags


def test_comparison_principle_on_oracle():
    # a larger terminal gain never lowers the oracle value
    spec, fam, sg = d1_instance()
    regs = {lab: RegimeSpec(r.drift, r.vol, r.running_gain, (lambda x, th, mk: x + 0.1), r.controls)
            for lab, r in spec.regimes.items()}
    up = ControlProblemSpec(spec.grid, spec.layout, regs, spec.jumps, spec.x0)
    assert brute_force_value(DiscreteModel(up, fam, StateGrid(0.0, 3.0, 31))) >= 1.21
