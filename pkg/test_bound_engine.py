"""
Tests for the bound engine: r-terms, moment summaries, σ/λ, theorem
assembly, the fourth-moment checks and the concentration inequality.
"""

import math
from dataclasses import replace

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bound_engine import (
    C_FREE,
    THEOREMS,
    Ingredients,
    estimate_moments,
    estimate_r_terms,
    lemma_3_1_check,
    lemma_3_2_check,
    proposition_3_1_check,
    r4_ld1_bound,
    sigma_lambda,
    theorem_bound,
)
from config import config
from errors import CapabilityError, RangeError, UsageError
from estimates import Method
from fields import erickson_field, iid_field, local_maxima_field, moving_sum_field
from neighborhoods import from_adjacency, kappa_stats

ROOT3 = math.sqrt(3.0)


@pytest.fixture
def iid3():
    return iid_field(3)


def _ingredients(model, **extra):
    return Ingredients(n=model.n, kappas=kappa_stats(model.system), **extra)


# =============================================================================
# R-TERMS
# =============================================================================

def test_exact_r_terms_for_three_signs(iid3):
    r = estimate_r_terms(iid3)
    assert r.method is Method.EXACT
    assert r.value("r1") == pytest.approx(0.0, abs=1e-12)
    assert r.value("r2") == 0.0
    assert r.value("r3") == pytest.approx(1 / ROOT3)
    assert r.value("r4") == pytest.approx(0.5)
    assert r.value("r5") == pytest.approx(1 / (2 * ROOT3))
    assert r.value("r6") == pytest.approx(1 / (2 * ROOT3))
    assert all(r.get(name).se == 0.0 for name in r.terms)


def test_theorem_2_1_bound_for_three_signs(iid3):
    report = theorem_bound("2.1", _ingredients(iid3, r_terms=estimate_r_terms(iid3)))
    assert report.value == pytest.approx(11 / ROOT3 + 0.5)
    assert report.value == pytest.approx(6.851, abs=1e-3)
    assert not report.c_free
    assert report.se == 0.0


def test_r4_chain_dominates_r4(iid3):
    chain = r4_ld1_bound(iid3)
    assert chain.value == pytest.approx((4 + 2 / ROOT3) / ROOT3)
    assert chain.value >= estimate_r_terms(iid3, terms=["r4"]).value("r4")


def test_r4_chain_monte_carlo_close_to_exact(monkeypatch):
    model = moving_sum_field([8], 1)
    exact = r4_ld1_bound(model)
    monkeypatch.setattr(config, "exact_max_outcomes", 0)
    mc = r4_ld1_bound(model, replicates=20000, seed=3)
    assert mc.method is Method.MONTE_CARLO
    assert abs(mc.value - exact.value) <= 5 * mc.se + 1e-9


def test_ld3_terms_need_ld3_system(iid3):
    ld1 = from_adjacency(nx.empty_graph(3))
    with pytest.raises(CapabilityError):
        estimate_r_terms(iid3, ld1, terms=["r7"])


def test_ld1_system_is_closed_for_pair_terms():
    model = iid_field(4)
    ld1 = from_adjacency(nx.empty_graph(4))
    closed = estimate_r_terms(model, ld1)
    assert closed.closure_applied
    assert set(closed.terms) == {"r1", "r2", "r3", "r4", "r5", "r6"}
    own = estimate_r_terms(model)
    assert closed.value("r5") == pytest.approx(own.value("r5"))


def test_unknown_terms_are_usage_errors(iid3):
    with pytest.raises(UsageError):
        estimate_r_terms(iid3, terms=["r13"])


def test_monte_carlo_r_terms_are_unbiased(monkeypatch):
    model = moving_sum_field([8], 1)
    exact = estimate_r_terms(model)
    monkeypatch.setattr(config, "exact_max_outcomes", 0)
    mc = estimate_r_terms(model, replicates=20000, seed=17)
    assert mc.method is Method.MONTE_CARLO
    assert mc.phase_sizes == (5000, 15000)
    for name in ("r3", "r4", "r5", "r7", "r8", "r9", "r10", "r11", "r12"):
        est = mc.get(name)
        assert abs(est.value - exact.value(name)) <= 5 * est.se + 1e-6, name


def test_monte_carlo_r_terms_for_three_signs(monkeypatch, iid3):
    monkeypatch.setattr(config, "exact_max_outcomes", 0)
    mc = estimate_r_terms(iid3, replicates=100000, seed=23, terms=["r1", "r2", "r3", "r4", "r5", "r6"])
    assert mc.method is Method.MONTE_CARLO
    expected = {
        "r1": 0.0,
        "r2": 0.0,
        "r3": 1 / ROOT3,
        "r4": 0.5,
        "r5": 1 / (2 * ROOT3),
        "r6": 1 / (2 * ROOT3),
    }
    for name, value in expected.items():
        est = mc.get(name)
        assert abs(est.value - value) <= 4 * est.se + 1e-12, name
    # X_iY_i = 1/3 and |Y_i| < 1 on every draw
    assert mc.get("r2").se == 0.0
    assert mc.get("r5").se > 0


def test_monte_carlo_r_terms_are_reproducible(monkeypatch):
    model = moving_sum_field([25], 2, "uniform")
    monkeypatch.setattr(config, "chunk_size", 128)
    first = estimate_r_terms(model, replicates=600, seed=4, terms=["r2", "r3", "r5", "r6"])
    monkeypatch.setattr(config, "threads", 4)
    second = estimate_r_terms(model, replicates=600, seed=4, terms=["r2", "r3", "r5", "r6"])
    for name in first.terms:
        assert first.get(name).value == second.get(name).value
        assert first.get(name).se == second.get(name).se


def test_monte_carlo_needs_replicates():
    with pytest.raises(UsageError):
        estimate_r_terms(moving_sum_field([30], 1))


# =============================================================================
# MOMENTS AND SIGMA
# =============================================================================

def test_moment_summary_for_three_signs(iid3):
    moments = estimate_moments(iid3, p=3.0)
    assert moments.gamma.value == pytest.approx(1 / ROOT3)
    # θ^3 = max(E|X|^3 + E|Y|^3)
    assert moments.theta.value ** 3 == pytest.approx(2 * 3 ** -1.5)
    assert moments.theta_x.value ** 3 == pytest.approx(3 ** -1.5)
    assert moments.moment_sum(2.0) == pytest.approx(2.0)


def test_moment_order_range(iid3):
    with pytest.raises(RangeError):
        estimate_moments(iid3, p=4.5)
    with pytest.raises(RangeError):
        estimate_moments(iid3, p=2.0)


def test_sigma_lambda_for_independent_field():
    result = sigma_lambda(iid_field(100))
    assert np.allclose(result.sigma2, 0.99)
    assert result.lam.value == pytest.approx(1 / math.sqrt(0.99))
    assert result.lam.value == pytest.approx(1.00504, abs=1e-5)


def test_sigma_lambda_monte_carlo_agrees_with_oracle():
    model = moving_sum_field([12], 1)
    exact = sigma_lambda(model)
    blind = replace(model, covariance=None)
    mc = sigma_lambda(blind, seed=2, samples=40000)
    assert mc.method is Method.MONTE_CARLO
    assert np.all(np.abs(mc.sigma2 - exact.sigma2) <= 5 * mc.sigma2_se + 1e-3)


def test_sigma_lambda_needs_ld3():
    model = iid_field(3)
    with pytest.raises(CapabilityError):
        sigma_lambda(model, from_adjacency(nx.empty_graph(3)))


# =============================================================================
# THEOREMS
# =============================================================================

def test_theorem_catalogue():
    assert len(THEOREMS) == 11
    assert C_FREE == {"2.5-rate", "2.6n-rate", "2.7n-rate", "2.8u", "2.8n-rate"}


def test_missing_ingredient_is_a_capability_error():
    with pytest.raises(CapabilityError):
        theorem_bound("2.1", Ingredients())
    with pytest.raises(UsageError):
        theorem_bound("9.9", Ingredients())


def test_theorem_2_2_with_fourth_moments(iid3):
    moments = estimate_moments(iid3, p=4.0)
    report = theorem_bound("2.2", _ingredients(iid3, moments=moments))
    theta = (2 / 9) ** 0.25
    expected = 24 * 3 * theta ** 3 + 2.5 * theta ** 2 * math.sqrt(3)
    assert report.value == pytest.approx(expected)
    assert report.extras['sum_form'] == pytest.approx(24 * moments.moment_sum(3.0) + 2.5 * math.sqrt(2 / 3))


def test_theorem_2_2_rejects_p_mismatch(iid3):
    ing = _ingredients(iid3, moments=estimate_moments(iid3, p=3.0))
    with pytest.raises(CapabilityError):
        theorem_bound("2.2", ing, p=4.0)


def test_theorem_2_3_uses_lambda(iid3):
    ing = _ingredients(iid3, r_terms=estimate_r_terms(iid3), sigma=sigma_lambda(iid3))
    report = theorem_bound("2.3", ing)
    lam = 1 / math.sqrt(1 - 1 / 3)
    total = sum(ing.r_terms.value(k) for k in ("r2", "r3", "r7", "r8", "r9", "r10", "r11", "r12"))
    assert report.value == pytest.approx(4 * lam ** 1.5 * total)


def test_theorem_2_4_and_2_5(iid3):
    ing = _ingredients(iid3, moments=estimate_moments(iid3, p=3.0), z=1.0)
    assert theorem_bound("2.4", ing).value == pytest.approx(75 / ROOT3)
    rate = theorem_bound("2.5-rate", ing)
    assert rate.c_free
    assert rate.value == pytest.approx((1 / ROOT3) / 8)


def test_theorem_2_4_rejects_fourth_order(iid3):
    ing = _ingredients(iid3, moments=estimate_moments(iid3, p=4.0))
    with pytest.raises(RangeError):
        theorem_bound("2.4", ing)


def test_lattice_theorems():
    model = moving_sum_field([6], 1)
    moments = estimate_moments(model, p=3.0)
    ing = _ingredients(model, moments=moments, m=1, dimension=1, z=0.0)
    assert theorem_bound("2.6n-rate", ing).value == pytest.approx(19 ** 3 * 2 ** 2 * moments.gamma.value)
    with pytest.raises(CapabilityError):
        theorem_bound("2.6u", _ingredients(model, moments=moments))


@pytest.mark.parametrize("shape,m", [([30], 1), ([60], 2), ([12, 12], 1)])
@pytest.mark.parametrize("p", [3.0, 2.5])
def test_lattice_uniform_bound_is_general_bound_at_interior_kappa(shape, m, p):
    model = moving_sum_field(shape, m)
    kappas = kappa_stats(model.system)
    # boxes are wide enough for a full sup-ball of radius 5m
    assert kappas.kappa_nc == (10 * m + 1) ** len(shape)
    moments = estimate_moments(model, p=p, replicates=200, seed=0)
    ing = Ingredients(n=model.n, kappas=kappas, moments=moments, m=m, dimension=len(shape))
    lattice = theorem_bound("2.6u", ing).value
    general = theorem_bound("2.4", ing).value
    assert lattice == pytest.approx(general, rel=1e-12)


def test_graph_theorems():
    model = local_maxima_field(nx.cycle_graph(9))
    ing = Ingredients(n=9, max_degree=2, vertices=9, count_sigma=math.sqrt(0.4), z=1.0)
    assert theorem_bound("2.8u", ing).value == pytest.approx(4 * 9 / 0.4 ** 1.5)
    assert theorem_bound("2.8n-rate", ing).value == pytest.approx(32 * 9 / 0.4 ** 1.5 / 8)
    assert model.metadata['sigma2'] == pytest.approx(0.4)


def test_dependency_graph_theorem_2_7():
    model = iid_field(3)
    moments = estimate_moments(model, p=3.0)
    ing = _ingredients(model, moments=moments, max_degree=1, vertices=3)
    assert theorem_bound("2.7u", ing).value == pytest.approx(75 * 3 * 3 ** -1.5)
    assert theorem_bound("2.7n-rate", ing).value == pytest.approx(3 * 3 ** -1.5)


# =============================================================================
# MOMENT IDENTITIES AND INEQUALITIES
# =============================================================================

def test_fourth_moment_identity_for_four_signs():
    report = lemma_3_1_check(iid_field(4), xi=lambda v: 2 * v)
    assert report.row("3.20").lhs == pytest.approx(40.0)
    assert report.row("3.20").rhs == pytest.approx(40.0)
    assert report.holds


@pytest.mark.parametrize("model", [
    moving_sum_field([6], 1),
    moving_sum_field([3, 2], 1, "rademacher"),
    local_maxima_field(nx.cycle_graph(6)),
])
def test_fourth_moment_identity_on_dependent_fields(model):
    report = lemma_3_1_check(model)
    assert report.row("3.19").holds
    assert report.row("3.20").holds
    assert report.holds


def test_fourth_moment_identity_with_transform():
    report = lemma_3_1_check(moving_sum_field([6], 1), xi=lambda v: v ** 3, center=True)
    assert report.holds


def test_uncentred_transform_is_rejected():
    with pytest.raises(RangeError):
        lemma_3_1_check(iid_field(3), xi=lambda v: v * v, center=False)


def test_mixed_fourth_moment_bound_for_two_signs():
    root2 = math.sqrt(2.0)
    report = lemma_3_2_check(
        iid_field(2),
        xi=lambda v: root2 * v,
        eta=lambda values, system: root2 * values,
    )
    assert report.row("3.27").lhs == pytest.approx(8.0)
    assert report.row("3.27").rhs == pytest.approx(60.0)
    assert report.holds


def test_mixed_fourth_moment_bound_on_moving_sum():
    assert lemma_3_2_check(moving_sum_field([7], 1)).holds


def test_concentration_inequality_for_three_signs(iid3):
    report = proposition_3_1_check(iid3, intervals=[(-0.1, 0.1), (-1.0, 1.0)])
    first = report.intervals[0]
    assert first.probability == 0.0
    assert first.rhs == pytest.approx(0.125 + 2.125 / ROOT3 + 2 / ROOT3)
    assert first.rhs == pytest.approx(2.5066, abs=1e-4)
    assert report.intervals[1].probability == pytest.approx(0.75)
    assert report.holds


def test_concentration_inequality_rejects_reversed_interval(iid3):
    with pytest.raises(RangeError):
        proposition_3_1_check(iid3, intervals=[(1.0, -1.0)])


# =============================================================================
# RANDOM ENUMERABLE MODELS
# =============================================================================

@st.composite
def enumerable_models(draw):
    """Small LD4* fields whose law can be enumerated outright."""
    kind = draw(st.sampled_from(["moving_sum", "lattice", "erickson", "local_maxima"]))
    if kind == "moving_sum":
        length = draw(st.integers(min_value=2, max_value=8))
        return moving_sum_field([length], draw(st.integers(min_value=0, max_value=2)))
    if kind == "lattice":
        rows = draw(st.integers(min_value=1, max_value=3))
        cols = draw(st.integers(min_value=2, max_value=10 // rows))
        return moving_sum_field([rows, cols], draw(st.integers(min_value=0, max_value=2)))
    if kind == "erickson":
        n = draw(st.integers(min_value=2, max_value=8))
        return erickson_field(n, draw(st.sampled_from(["window", "tight"])))
    return local_maxima_field(nx.cycle_graph(draw(st.integers(min_value=4, max_value=7))))


@settings(max_examples=50, deadline=None)
@given(model=enumerable_models())
def test_fourth_moment_identity_on_random_models(model):
    assert model.can_enumerate
    report = lemma_3_1_check(model)
    assert [row.name for row in report.rows] == ["3.19", "3.20", "3.21", "3.22", "3.23"]
    assert report.holds, report.to_dict()


@settings(max_examples=50, deadline=None)
@given(model=enumerable_models())
def test_mixed_fourth_moment_bound_on_random_models(model):
    report = lemma_3_2_check(model)
    assert report.holds, report.to_dict()


@settings(max_examples=10, deadline=None)
@given(
    model=enumerable_models(),
    intervals=st.lists(
        st.tuples(st.floats(min_value=-3.0, max_value=3.0), st.floats(min_value=0.0, max_value=3.0)),
        min_size=10,
        max_size=10,
    ),
)
def test_concentration_inequality_on_random_intervals(model, intervals):
    report = proposition_3_1_check(model, intervals=[(a, a + length) for a, length in intervals])
    assert len(report.intervals) == 10
    assert all(check.rhs >= 0.625 * (check.b - check.a) for check in report.intervals)
    assert report.holds, report.to_dict()
