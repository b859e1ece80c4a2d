import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calibra import functionals
from calibra.audit import eval_property
from calibra.errors import ConfigError
from calibra.properties import (FiniteDistribution, bayes_pair_family, expected_id, expected_score,
                                grid_points, mean_property, mean_variance_family, nearest_grid_index,
                                parse_property, quantile_cvar_family, quantile_property,
                                rescaled_pinball_score)

from conftest import finite_dists

LABELS = np.round(np.arange(101) / 100, 2)


def builtins():
    return [mean_property(), quantile_property(0.5, 2.0, 0.5), quantile_property(0.9, 2.0)]


# --- FiniteDistribution ---------------------------------------------------------

def test_distribution_merges_and_sorts():
    d = FiniteDistribution([0.5, 0.1, 0.5 + 1e-13], [0.25, 0.5, 0.25])
    assert d.support.tolist() == [0.1, 0.5]
    assert d.probs.tolist() == [0.5, 0.5]


def test_distribution_drops_zero_mass():
    d = FiniteDistribution([0.0, 1.0], [1.0, 0.0])
    assert d == FiniteDistribution.point(0.0)


@pytest.mark.parametrize("support,probs", [
    ([1.2], [1.0]), ([-0.1], [1.0]), ([0.2, 0.3], [0.5, 0.6]), ([0.2], [-1.0]), ([], []),
])
def test_distribution_rejects_invalid(support, probs):
    with pytest.raises(ValueError):
        FiniteDistribution(support, probs)


def test_distribution_round_trips_through_dict():
    d = FiniteDistribution([0.1, 0.7], [0.3, 0.7])
    assert FiniteDistribution.from_dict(d.to_dict()) == d


@given(finite_dists())
def test_distribution_invariants(d):
    assert abs(d.probs.sum() - 1.0) <= 1e-12
    assert np.all(np.diff(d.support) > 0)
    assert d.support.min() >= 0 and d.support.max() <= 1


# --- mean ---------------------------------------------------------------------------

def test_mean_examples():
    p = mean_property()
    assert p.id_eval(0.5, 0.2) == pytest.approx(0.3)
    assert p.score_eval(0.5, 0.2) == pytest.approx(0.045)
    half = FiniteDistribution([0.0, 1.0], [0.5, 0.5])
    assert expected_id(p, 0.5, half) == 0.0
    assert expected_id(p, 0.7, half) == pytest.approx(0.2)
    assert (p.lipschitz_L, p.anti_lipschitz_La, p.id_bound_C, p.score_range_B) == (1.0, 1.0, 1.0, 0.5)


@given(finite_dists())
def test_mean_score_at_mean_is_half_variance(d):
    # oracle: expand (mu - y)^2 / 2 by hand
    mu = sum(p * y for y, p in zip(d.support, d.probs))
    var = sum(p * (y - mu) ** 2 for y, p in zip(d.support, d.probs))
    assert expected_score(mean_property(), mu, d) == pytest.approx(var / 2, abs=1e-12)


def test_point_mass_score_is_zero():
    assert expected_score(mean_property(), 0.3, FiniteDistribution.point(0.3)) == 0.0


# --- quantile -------------------------------------------------------------------------

def test_quantile_examples():
    q9 = quantile_property(0.9, 2.0)
    assert q9.id_eval(0.5, 0.3) == pytest.approx(0.1)
    q5 = quantile_property(0.5, 2.0)
    assert q5.score_eval(0.4, 0.6) == pytest.approx(0.4)
    grid10 = FiniteDistribution(np.arange(10) / 10 + 0.05, np.full(10, 0.1))
    # oracle: 5 of the 10 atoms are <= 0.45
    assert expected_id(q5, 0.45, grid10) == pytest.approx(5 / 10 - 0.5, abs=1e-12)
    assert expected_id(q5, 0.0, FiniteDistribution.point(0.2)) == -0.5
    assert q9.id_bound_C == pytest.approx(0.9)
    assert q9.lipschitz_L == 2.0


def test_pinball_at_median_of_two_atoms():
    # oracle: (1 - tau) * g + E max(y - g, 0) = 0.25 + 0.5 * 0.5
    d = FiniteDistribution([0.0, 1.0], [0.5, 0.5])
    assert expected_score(quantile_property(0.5, 1.0), 0.5, d) == pytest.approx(0.5)


@pytest.mark.parametrize("tau", [0.0, 1.0, -0.2, 1.5])
def test_quantile_rejects_bad_tau(tau):
    with pytest.raises(ValueError):
        quantile_property(tau, 2.0)


def test_quantile_anti_lipschitz_is_reciprocal_density_bound():
    assert quantile_property(0.5, 2.0, 0.5).anti_lipschitz_La == 2.0


# --- Bayes pairs ------------------------------------------------------------------------

def test_rescaled_pinball_examples():
    assert rescaled_pinball_score(0.5)(0.4, 0.6) == pytest.approx(0.8)
    assert rescaled_pinball_score(0.9)(0.7, 0.7) == pytest.approx(0.7)
    assert rescaled_pinball_score(0.5)(0.0, 1.0) == pytest.approx(2.0)


def test_bayes_pair_examples():
    mv = mean_variance_family()
    assert mv.cond_id_eval(0.5, 0.1, 0.2) == pytest.approx(0.1 - 0.3 ** 2 / 2)
    qc = quantile_cvar_family(0.5, 0.5, 2.0)
    assert qc.cond_id_eval(0.4, 0.8, 0.6) == pytest.approx(0.0)
    assert qc.cross_lipschitz_Lc == 1.0
    assert quantile_cvar_family(0.8, 0.5, 2.0).cross_lipschitz_Lc == pytest.approx(4.0)
    assert mv.level_lipschitz_L1 == 1.0
    assert mv.cond_score_range_B1 == pytest.approx(0.5)
    assert qc.cond_score_range_B1 == pytest.approx(2.0)


@given(st.floats(0, 1), st.floats(0, 1))
def test_bayes_id_vanishes_at_bayes_risk(g0, y):
    for fam in (mean_variance_family(), quantile_cvar_family(0.3, 0.5, 2.0)):
        s = float(fam.bayes_score(g0, y))
        assert fam.cond_id_eval(g0, s, y) == 0.0


def test_bayes_pair_requires_lipschitz_for_custom_score():
    with pytest.raises(ValueError):
        bayes_pair_family(mean_property(), bayes_score=rescaled_pinball_score(0.5))


@given(finite_dists())
def test_bayes_inner_value_matches_functional(d):
    mu = functionals.mean(d)
    fam = mean_variance_family()
    half_var = expected_score(mean_property(), mu, d)
    assert expected_id(fam, (mu, half_var), d) == pytest.approx(0.0, abs=1e-12)
    tau = 0.5
    qc = quantile_cvar_family(tau, 0.5, 2.0)
    q = functionals.quantile(d, tau)
    cv = functionals.cvar(d, tau)
    assert expected_id(qc, (q, cv), d) == pytest.approx(0.0, abs=1e-12)


# --- spec-level invariants on grids ------------------------------------------------------

@pytest.mark.parametrize("prop", builtins(), ids=lambda p: p.name)
@pytest.mark.parametrize("m", [1, 7, 20])
def test_id_bounded_and_monotone_on_grid(prop, m):
    g = grid_points(m)
    V = prop.id_eval(g[:, None], LABELS[None, :])
    assert np.all(np.abs(V) <= prop.id_bound_C + 1e-15)
    assert np.all(np.diff(V, axis=0) >= 0)


def test_mean_score_derivative_is_id():
    p = mean_property()
    h = 1e-3
    for g in grid_points(9):
        for y in LABELS[::10]:
            num = (p.score_eval(g + h, y) - p.score_eval(g - h, y)) / (2 * h)
            assert num == pytest.approx(p.id_eval(g, y), abs=1e-9)


@pytest.mark.parametrize("tau", [0.3, 0.5, 0.9])
def test_pinball_subgradient_at_grid_points(tau):
    p = quantile_property(tau, 2.0)
    for g in grid_points(9):
        for y in LABELS:
            left = p.score_eval(g, y) - p.score_eval(g - 1e-7, y)
            right = p.score_eval(g + 1e-7, y) - p.score_eval(g, y)
            v = p.id_eval(g, y)
            assert left / 1e-7 - 1e-6 <= v <= right / 1e-7 + 1e-6


@pytest.mark.parametrize("tau", [0.25, 0.5, 0.9])
def test_pinball_is_integral_of_id(tau):
    # the expected id is a step function with jumps at the atoms; integrate it exactly
    p = quantile_property(tau, 1.0)
    d = FiniteDistribution([0.05, 0.3, 0.42, 0.66, 0.9], [0.1, 0.2, 0.3, 0.15, 0.25])
    a, b = 0.2, 0.7
    cuts = np.r_[a, d.support[(d.support > a) & (d.support < b)], b]
    integral = sum(expected_id(p, (lo + hi) / 2, d) * (hi - lo) for lo, hi in zip(cuts[:-1], cuts[1:]))
    assert expected_score(p, b, d) - expected_score(p, a, d) == pytest.approx(integral, abs=1e-12)


@settings(max_examples=200)
@given(finite_dists())
def test_zero_at_truth_and_orientation(d):
    mean = mean_property()
    assert expected_id(mean, eval_property("mean", d), d) == pytest.approx(0.0, abs=1e-9)
    for tau in (0.1, 0.5, 0.9):
        q = quantile_property(tau, 2.0)
        truth = eval_property(f"quantile(tau={tau})", d)
        # atoms make the id jump: it must cross zero at the quantile
        assert expected_id(q, truth, d) >= -1e-9
        below = d.support[d.support < truth]
        if below.size:
            assert expected_id(q, float(below[-1]), d) < 1e-9
        vals = [expected_id(q, g, d) for g in grid_points(20)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_quantile_zero_at_truth_when_tau_hits_cdf():
    d = FiniteDistribution([0.1, 0.4, 0.8], [0.25, 0.25, 0.5])
    q = quantile_property(0.5, 2.0)
    assert expected_id(q, eval_property("quantile(tau=0.5)", d), d) == 0.0


@given(finite_dists(), st.integers(0, 100).map(lambda k: k / 100))
def test_mean_sandwich_equalities(d, g):
    p = mean_property()
    truth = functionals.mean(d)
    v = expected_id(p, g, d)
    excess = expected_score(p, g, d) - expected_score(p, truth, d)
    assert excess == pytest.approx(v * v / 2, abs=1e-12)
    assert excess == pytest.approx(v * (g - truth) - v * v / 2, abs=1e-12)


# --- config parsing and grid ------------------------------------------------------------------

def test_parse_property():
    assert parse_property("mean").name == "mean"
    q = parse_property("quantile(tau=0.9, m2=2)")
    assert q.params["tau"] == 0.9 and q.lipschitz_L == 2.0
    assert parse_property("mean_variance").inner_kind == "half_variance"
    assert parse_property("quantile_cvar(tau=0.5, m1=0.5, m2=2)").outer.anti_lipschitz_La == 2.0


@pytest.mark.parametrize("text", ["median", "quantile(tau=0.5)", "quantile(tau=2, m2=1)",
                                  "mean(x=1)", "quantile(tau=abc, m2=1)", "((("])
def test_parse_property_rejects(text):
    with pytest.raises(ConfigError):
        parse_property(text)


def test_grid_points():
    assert grid_points(9).tolist() == pytest.approx([k / 10 for k in range(1, 10)])
    assert nearest_grid_index(0.0, 9) == 0
    assert nearest_grid_index(1.0, 9) == 8
    # 0.15 is exactly between 0.1 and 0.2 on this grid; the smaller one wins
    assert nearest_grid_index(0.5, 2) == 0 or math.isclose(grid_points(2)[0], 1 / 3)
    with pytest.raises(ValueError):
        grid_points(0)
