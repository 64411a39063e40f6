"""
Tests for Stein kernels, the pair-term closed forms and the smoothed Stein solution.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

import stein_kernels
from errors import RangeError, StructuralError
from fields import enumerate_field, iid_field, moving_sum_field, sample
from neighborhoods import closure_extend, from_adjacency, neighbor_pairs_b
from stein_kernels import (
    KernelSample,
    TAIL_THRESHOLD,
    k_integral_identity,
    kernel_integrals,
    khat,
    khat_i,
    marginal_atoms,
    pair_sum,
    r5_closed_form,
    r5_pair,
    r6sq_closed_form,
    r10_pair,
    smoothed_indicator,
    smoothed_indicator_mean,
    starred_pair_expectation,
    stein_derivative,
    stein_solution,
    stein_value,
)


# =============================================================================
# KERNELS
# =============================================================================

def test_kernel_sample_sums_over_neighborhoods():
    model = moving_sum_field([5], 1)
    values = sample(model, 3).values
    ks = KernelSample.build(model.system, values)
    assert ks.y[0, 2] == pytest.approx(values[1] + values[2] + values[3])
    assert ks.z[0, 0] == pytest.approx(values[0] + values[1] + values[2])
    assert ks.consistent_with(model.system)
    assert ks.w[0] == pytest.approx(values.sum())


def test_kernel_sample_rejects_wrong_width():
    model = moving_sum_field([5], 1)
    with pytest.raises(StructuralError):
        KernelSample.build(model.system, np.zeros((2, 4)))


def test_khat_integrates_to_sum_of_products():
    model = moving_sum_field([6], 2, "uniform")
    ks = KernelSample.build(model.system, sample(model, 11).values)
    step = 1e-4
    grid = np.arange(-6.0, 6.0, step) + step / 2
    integral = sum(khat(ks, t)[0] for t in grid) * step
    assert integral == pytest.approx(kernel_integrals(ks)[0], abs=5e-3)


def test_khat_i_sign_convention():
    ks = KernelSample(x=np.array([[0.5]]), y=np.array([[2.0]]))
    assert khat_i(ks, 0, -1.0) == pytest.approx(0.5)
    assert khat_i(ks, 0, 1.0) == 0.0
    negative = KernelSample(x=np.array([[0.5]]), y=np.array([[-2.0]]))
    assert khat_i(negative, 0, 1.0) == pytest.approx(-0.5)


def test_kernel_identity_is_exactly_one_for_standardized_fields():
    for model in (iid_field(3), moving_sum_field([6], 1)):
        estimate = k_integral_identity(model, replicates=10, seed=0)
        assert estimate.is_exact
        assert estimate.value == pytest.approx(1.0)


def test_kernel_identity_monte_carlo():
    estimate = k_integral_identity(moving_sum_field([40], 2), replicates=4000, seed=5)
    assert not estimate.is_exact
    assert abs(estimate.value - 1.0) <= 5 * estimate.se + 1e-12


# =============================================================================
# PAIR TERMS
# =============================================================================

def test_pair_sum_is_independent_of_slicing(monkeypatch):
    model = moving_sum_field([12], 1, "uniform")
    values = model.sample_block(1, 0, 0, 50)
    star = model.sample_block(1, 1, 0, 50)
    ks = KernelSample.build(model.system, values)
    ks_star = KernelSample.build(model.system, star)
    pairs = neighbor_pairs_b(model.system)
    whole = r5_closed_form(ks, ks_star, pairs)
    monkeypatch.setattr(stein_kernels, "PAIR_SLICE_BUDGET", 60)
    sliced = r5_closed_form(ks, ks_star, pairs)
    assert np.allclose(whole, sliced)


def test_starred_expectation_matches_product_law():
    model = iid_field(3)
    law = enumerate_field(model)
    ks = KernelSample.build(model.system, law.values)
    pairs = neighbor_pairs_b(model.system)
    atoms = [marginal_atoms(ks.x[:, i], ks.y[:, i], law.probs) for i in range(3)]
    # independent copy of a symmetric ±1/√3 variable: E|X X*| min(|Y|,|Y*|,1) = (1/3)(1/√3)
    expected = 3 * (1 / 3) * (1 / math.sqrt(3))
    assert starred_pair_expectation(r10_pair, atoms, pairs) == pytest.approx(expected)
    # r5 pair on the copy: same-sign half only
    assert starred_pair_expectation(r5_pair, atoms, pairs) == pytest.approx(expected / 2)


def test_pair_sum_diagonal_on_independent_field():
    model = iid_field(4)
    ks = KernelSample.build(model.system, np.full((1, 4), 0.5))
    pairs = neighbor_pairs_b(model.system)
    assert len(pairs) == 4
    assert pair_sum(r5_pair, ks, ks, pairs)[0] == pytest.approx(4 * 0.25 * 0.5)


def test_closed_forms_with_opposite_copy():
    model = iid_field(4)
    ks = KernelSample.build(model.system, np.full((1, 4), 0.5))
    star = KernelSample.build(model.system, np.full((1, 4), -0.5))
    pairs = neighbor_pairs_b(model.system)
    # opposite signs kill every starred term
    assert r5_closed_form(ks, star, pairs)[0] == pytest.approx(0.5)
    assert r6sq_closed_form(ks, star, pairs)[0] == pytest.approx(0.5 * 4 * 0.25 * 0.25)
    assert r6sq_closed_form(ks, ks, pairs)[0] == pytest.approx(0.0)


def test_ld1_system_pairs_after_closure():
    system = closure_extend(from_adjacency([(0, 1), (1, 2)]))
    ks = KernelSample.build(system, np.array([[1.0, -1.0, 2.0]]))
    assert pair_sum(r10_pair, ks, ks, neighbor_pairs_b(system))[0] > 0


# =============================================================================
# STEIN SOLUTION
# =============================================================================

def _direct_solution(z, alpha, w):
    """f(w) = e^{w²/2} ∫_{-∞}^w (h(x) − Nh) e^{−x²/2} dx by quadrature."""
    nh = smoothed_indicator_mean(z, alpha)
    integrand = lambda x: (float(smoothed_indicator(z, alpha, x)) - nh) * math.exp(-0.5 * x * x)
    points = [p for p in (z, z + alpha) if -12.0 < p < w]
    value, _ = integrate.quad(integrand, -12.0, w, points=points or None, limit=200, epsabs=1e-13)
    return math.exp(0.5 * w * w) * value


@pytest.mark.parametrize("z,alpha", [(0.0, 0.5), (-1.0, 0.1), (1.5, 1.0), (-2.5, 2.0)])
@pytest.mark.parametrize("w", [-3.0, -1.2, 0.0, 0.3, 1.7, 3.0])
def test_stein_solution_matches_quadrature(z, alpha, w):
    assert stein_solution(z, alpha, w) == pytest.approx(_direct_solution(z, alpha, w), abs=1e-7)


def test_smoothed_indicator_mean_matches_quadrature():
    for z, alpha in ((0.0, 1.0), (-1.3, 0.2), (2.0, 0.5)):
        value, _ = integrate.quad(stats.norm.cdf, z, z + alpha)
        assert smoothed_indicator_mean(z, alpha) == pytest.approx(value / alpha, abs=1e-12)


def test_smoothed_indicator_shape():
    w = np.array([-1.0, 0.0, 0.25, 0.5, 2.0])
    assert np.allclose(smoothed_indicator(0.0, 0.5, w), [1.0, 1.0, 0.5, 0.0, 0.0])


def test_alpha_must_be_positive():
    with pytest.raises(RangeError):
        stein_solution(0.0, 0.0, 1.0)
    with pytest.raises(RangeError):
        smoothed_indicator(0.0, -1.0, 0.0)
    with pytest.raises(RangeError):
        smoothed_indicator_mean(0.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(
    z=st.floats(min_value=-3.0, max_value=3.0),
    alpha=st.floats(min_value=0.01, max_value=3.0),
    w=st.floats(min_value=-30.0, max_value=30.0),
)
def test_stein_solution_bounds(z, alpha, w):
    f = stein_solution(z, alpha, w)
    assert math.isfinite(f)
    assert -1e-12 <= f <= 1.0
    assert abs(float(stein_derivative(z, alpha, w))) <= 1.0 + 1e-9


@pytest.mark.parametrize("z,alpha", [(-2.0, 0.1), (0.0, 1.0), (2.0, 0.1)])
def test_stein_equation_residual(z, alpha):
    step = 1e-5
    grid = np.linspace(-8.0, 8.0, 161)
    grid = grid[np.minimum(np.abs(grid - z), np.abs(grid - z - alpha)) > 1e-3]
    slope = (stein_solution(z, alpha, grid + step) - stein_solution(z, alpha, grid - step)) / (2 * step)
    assert np.max(np.abs(slope - stein_derivative(z, alpha, grid))) < 1e-6


def test_stein_solution_is_finite_far_in_the_tails():
    w = np.array([-1e3, -50.0, 50.0, 1e3])
    f = stein_solution(0.0, 1.0, w)
    assert np.all(np.isfinite(f))
    assert np.all(f >= 0)
    # f(w) ~ (1 − Nh)/|w| on the left and Nh/w on the right
    nh = smoothed_indicator_mean(0.0, 1.0)
    assert f[0] * 1e3 == pytest.approx(1 - nh, rel=1e-3)
    assert f[-1] * 1e3 == pytest.approx(nh, rel=1e-3)


def test_stein_value_flags_tail():
    assert stein_value(0.0, 1.0, TAIL_THRESHOLD + 1).tail
    inside = stein_value(0.0, 1.0, 0.5)
    assert not inside.tail
    assert inside.derivative == pytest.approx(float(stein_derivative(0.0, 1.0, 0.5)))
