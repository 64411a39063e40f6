"""
Stein kernels, their integral identity, the independent-copy closed forms of
the variance integrals, and the solution of the smoothed Stein equation.
"""

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.special import erfcx, ndtr

from errors import RangeError, StructuralError
from estimates import Estimate
from fields import FieldModel, enumerate_field, map_replicates
from logger import log_debug, log_estimate
from neighborhoods import NeighborhoodSystem, PairSet

STREAM_IDENTITY = 11

# Pair slices are sized so one slice holds at most this many floats.
PAIR_SLICE_BUDGET = 1 << 22

TAIL_THRESHOLD = 8.0

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_SQRT_HALF_PI = math.sqrt(0.5 * math.pi)
_INV_SQRT_2PI = 1.0 / _SQRT_2PI
_INV_SQRT2 = 1.0 / math.sqrt(2.0)

ArrayLike = Union[float, np.ndarray]


# =============================================================================
# KERNEL SAMPLES
# =============================================================================

def neighborhood_sums(values: np.ndarray, membership: sparse.spmatrix) -> np.ndarray:
    """Per-index sums over a neighborhood family: out[r, i] = Σ_{j∈S_i} values[r, j]."""
    return np.asarray(membership.T @ values.T).T


@dataclass(frozen=True, eq=False)
class KernelSample:
    """X_i, Y_i = Σ_{A_i} X_j and (when B is known) Z_i = Σ_{B_i} X_j, per replicate row."""
    x: np.ndarray
    y: np.ndarray
    z: Optional[np.ndarray] = None

    @classmethod
    def build(cls, system: NeighborhoodSystem, values: np.ndarray) -> "KernelSample":
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        if values.shape[1] != system.n:
            raise StructuralError(f"values have {values.shape[1]} columns, system has {system.n} indices")
        y = neighborhood_sums(values, system.membership("A"))
        z = neighborhood_sums(values, system.membership("B")) if system.has("B") else None
        return cls(x=values, y=y, z=z)

    @property
    def w(self) -> np.ndarray:
        return self.x.sum(axis=1)

    def consistent_with(self, system: NeighborhoodSystem, atol: float = 1e-12) -> bool:
        """Recompute Y (and Z) from X and compare."""
        fresh = KernelSample.build(system, self.x)
        if not np.allclose(fresh.y, self.y, atol=atol, rtol=0):
            return False
        if self.z is not None and fresh.z is not None:
            return bool(np.allclose(fresh.z, self.z, atol=atol, rtol=0))
        return True


def khat_i(sample: KernelSample, i: int, t: float, row: int = 0) -> float:
    """K̂_i(t) = X_i{I(−Y_i ≤ t < 0) − I(0 ≤ t ≤ −Y_i)}."""
    x = sample.x[row, i]
    y = sample.y[row, i]
    left = 1.0 if (-y <= t < 0) else 0.0
    right = 1.0 if (0 <= t <= -y) else 0.0
    return float(x * (left - right))


def khat(sample: KernelSample, t: float) -> np.ndarray:
    """K̂(t) = Σ_i K̂_i(t) for every replicate row."""
    left = ((-sample.y <= t) & (t < 0)).astype(np.float64)
    right = ((0 <= t) & (t <= -sample.y)).astype(np.float64)
    return (sample.x * (left - right)).sum(axis=1)


def kernel_integrals(sample: KernelSample) -> np.ndarray:
    """∫K̂(t)dt per replicate, which is Σ_i X_i Y_i."""
    return (sample.x * sample.y).sum(axis=1)


def k_integral_identity(model: FieldModel, replicates: int, seed: int) -> Estimate:
    """Estimate ∫K(t)dt = Σ_i E X_iY_i; exact when the model can be enumerated."""
    system = model.system
    if model.can_enumerate:
        law = enumerate_field(model)
        value = float(np.dot(law.probs, kernel_integrals(KernelSample.build(system, law.values))))
        estimate = Estimate.exact(value)
    else:
        blocks = map_replicates(
            model, seed, STREAM_IDENTITY, replicates,
            lambda values: kernel_integrals(KernelSample.build(system, values)),
        )
        estimate = Estimate.from_samples(np.concatenate(blocks))
    log_estimate("k_integral", estimate.value, estimate.se, estimate.method.value, f"n={model.n}")
    return estimate


# =============================================================================
# PAIR TERMS
# =============================================================================

PairFunction = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def r5_pair(xi, yi, xj, yj):
    """X_iX_j I(Y_iY_j ≥ 0)(|Y_i| ∧ |Y_j| ∧ 1)."""
    cap = np.minimum(np.minimum(np.abs(yi), np.abs(yj)), 1.0)
    return xi * xj * (yi * yj >= 0) * cap


def r6_pair(xi, yi, xj, yj):
    """X_iX_j I(Y_iY_j ≥ 0)(Y_i² ∧ Y_j² ∧ 1)."""
    cap = np.minimum(np.minimum(yi * yi, yj * yj), 1.0)
    return xi * xj * (yi * yj >= 0) * cap


def r10_pair(xi, yi, xj, yj):
    """|X_iX_j|(|Y_i| ∧ |Y_j| ∧ 1)."""
    cap = np.minimum(np.minimum(np.abs(yi), np.abs(yj)), 1.0)
    return np.abs(xi * xj) * cap


def pair_sum(
    fn: PairFunction,
    first: KernelSample,
    second: KernelSample,
    pairs: PairSet,
) -> np.ndarray:
    """Σ over pairs (i, j) of fn(X_i, Y_i, X'_j, Y'_j), one value per replicate row."""
    reps = first.x.shape[0]
    total = np.zeros(reps)
    step = max(1, PAIR_SLICE_BUDGET // max(reps, 1))
    for start in range(0, len(pairs), step):
        rows = pairs.rows[start:start + step]
        cols = pairs.cols[start:start + step]
        total += fn(first.x[:, rows], first.y[:, rows], second.x[:, cols], second.y[:, cols]).sum(axis=1)
    return total


def r5_closed_form(sample: KernelSample, star: KernelSample, pairs: PairSet) -> np.ndarray:
    """Per-replicate r₅ summand: unstarred minus starred pair sums."""
    return pair_sum(r5_pair, sample, sample, pairs) - pair_sum(r5_pair, sample, star, pairs)


def r6sq_closed_form(sample: KernelSample, star: KernelSample, pairs: PairSet) -> np.ndarray:
    """Per-replicate r₆² summand with squared caps and the ½ factor."""
    return 0.5 * (pair_sum(r6_pair, sample, sample, pairs) - pair_sum(r6_pair, sample, star, pairs))


def r10_closed_form(sample: KernelSample, star: KernelSample, pairs: PairSet) -> np.ndarray:
    return pair_sum(r10_pair, sample, sample, pairs) + pair_sum(r10_pair, sample, star, pairs)


@dataclass(frozen=True, eq=False)
class MarginalAtoms:
    """Exact law of (X_i, Y_i) for one index."""
    x: np.ndarray
    y: np.ndarray
    probs: np.ndarray


def marginal_atoms(x: np.ndarray, y: np.ndarray, probs: np.ndarray, decimals: int = 12) -> MarginalAtoms:
    keys = np.round(np.stack([x, y], axis=1), decimals)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    mass = np.bincount(inverse.ravel(), weights=probs, minlength=len(uniq))
    return MarginalAtoms(x=uniq[:, 0], y=uniq[:, 1], probs=mass)


def starred_pair_expectation(fn: PairFunction, atoms: List[MarginalAtoms], pairs: PairSet) -> float:
    """Σ over pairs of E fn(X_i, Y_i, X_j*, Y_j*) with the copy independent of the field."""
    total = 0.0
    for i, j in zip(pairs.rows.tolist(), pairs.cols.tolist()):
        a, b = atoms[i], atoms[j]
        values = fn(a.x[:, None], a.y[:, None], b.x[None, :], b.y[None, :])
        total += float(a.probs @ values @ b.probs)
    return total


# =============================================================================
# STEIN EQUATION
# =============================================================================

def normal_cdf(z: ArrayLike) -> ArrayLike:
    """Standard normal distribution function Φ."""
    return ndtr(z)


def smoothed_indicator(z: float, alpha: float, w: ArrayLike) -> ArrayLike:
    """h_{z,α}(w): 1 for w ≤ z, 0 for w ≥ z + α, linear in between."""
    if alpha <= 0:
        raise RangeError(f"alpha must be positive, got {alpha}")
    return np.clip(1.0 + (z - np.asarray(w, dtype=np.float64)) / alpha, 0.0, 1.0)


def smoothed_indicator_mean(z: float, alpha: float) -> float:
    """E h_{z,α}(N(0,1)) = α⁻¹ ∫_z^{z+α} Φ(u) du."""
    if alpha <= 0:
        raise RangeError(f"alpha must be positive, got {alpha}")
    return float((_phi_integral(z + alpha) - _phi_integral(z)) / alpha)


def _density(u):
    return _INV_SQRT_2PI * np.exp(-0.5 * np.square(u))


def _phi_integral(u):
    """Antiderivative of Φ: uΦ(u) + φ(u)."""
    return u * ndtr(u) + _density(u)


def _tail_integral(u):
    """Antiderivative of 1 − Φ: u(1 − Φ(u)) − φ(u)."""
    return u * ndtr(-u) - _density(u)


def _scaled_phi_integral(u):
    """e^{u²/2}(uΦ(u) + φ(u)), valid for u ≤ 0."""
    return u * 0.5 * erfcx(-u * _INV_SQRT2) + _INV_SQRT_2PI


def _scaled_tail_integral(u):
    """e^{u²/2}(u(1 − Φ(u)) − φ(u)), valid for u ≥ 0."""
    return u * 0.5 * erfcx(u * _INV_SQRT2) - _INV_SQRT_2PI


def _solution_terms(z: float, alpha: float, w: np.ndarray) -> np.ndarray:
    """
    α·f_{z,α}(w), as the average over u ∈ [z, z+α] of the indicator solutions

        f_u(w) = √(2π) e^{w²/2} (1 − Φ(w)) Φ(u)   for u < w,
        f_u(w) = √(2π) e^{w²/2} Φ(w) (1 − Φ(u))   for u ≥ w.

    The e^{w²/2} factors are absorbed into erfcx or into non-positive
    exponents, so no branch overflows.
    """
    top = z + alpha
    out = np.zeros_like(w)

    # u < w part: ∫_z^{min(w, top)} Φ(u) du times √(2π)e^{w²/2}(1 − Φ(w))
    lower_mask = w > z
    if np.any(lower_mask):
        wl = w[lower_mask]
        m = np.minimum(wl, top)
        part = np.empty_like(wl)
        pos = wl >= 0
        part[pos] = _SQRT_HALF_PI * erfcx(wl[pos] * _INV_SQRT2) * (_phi_integral(m[pos]) - _phi_integral(z))
        neg = ~pos
        if np.any(neg):
            wn, mn = wl[neg], m[neg]
            # here z < m <= w < 0, so both exponents are <= 0
            part[neg] = _SQRT_2PI * ndtr(-wn) * (
                np.exp(0.5 * (wn * wn - mn * mn)) * _scaled_phi_integral(mn)
                - np.exp(0.5 * (wn * wn - z * z)) * _scaled_phi_integral(z)
            )
        out[lower_mask] += part

    # u ≥ w part: ∫_{max(w, z)}^{top} (1 − Φ(u)) du times √(2π)e^{w²/2}Φ(w)
    upper_mask = w < top
    if np.any(upper_mask):
        wu = w[upper_mask]
        lo = np.maximum(wu, z)
        part = np.empty_like(wu)
        neg = wu <= 0
        part[neg] = _SQRT_HALF_PI * erfcx(-wu[neg] * _INV_SQRT2) * (_tail_integral(top) - _tail_integral(lo[neg]))
        pos = ~neg
        if np.any(pos):
            wp, lp = wu[pos], lo[pos]
            # here 0 < w <= lo < top
            part[pos] = _SQRT_2PI * ndtr(wp) * (
                np.exp(0.5 * (wp * wp - top * top)) * _scaled_tail_integral(top)
                - np.exp(0.5 * (wp * wp - lp * lp)) * _scaled_tail_integral(lp)
            )
        out[upper_mask] += part
    return out


@dataclass(frozen=True)
class SteinValue:
    value: float
    derivative: float
    tail: bool


def stein_solution(z: float, alpha: float, w: ArrayLike) -> ArrayLike:
    """
    Bounded solution f_{z,α} of f′(w) − wf(w) = h_{z,α}(w) − Eh_{z,α}(N(0,1)).

    Scalar in, float out; array in, array out.
    """
    if alpha <= 0:
        raise RangeError(f"alpha must be positive, got {alpha}")
    arr = np.atleast_1d(np.asarray(w, dtype=np.float64))
    if np.any(np.abs(arr) > TAIL_THRESHOLD):
        log_debug(f"stein_solution: tail regime |w| > {TAIL_THRESHOLD} for z={z} alpha={alpha}")
    values = _solution_terms(float(z), float(alpha), arr) / alpha
    if np.ndim(w) == 0:
        return float(values[0])
    return values


def stein_derivative(z: float, alpha: float, w: ArrayLike) -> ArrayLike:
    """f′_{z,α}(w) read off the equation itself: w f(w) + h(w) − Nh."""
    f = stein_solution(z, alpha, w)
    return np.asarray(w) * f + smoothed_indicator(z, alpha, w) - smoothed_indicator_mean(z, alpha)


def stein_value(z: float, alpha: float, w: float) -> SteinValue:
    value = stein_solution(z, alpha, w)
    derivative = float(stein_derivative(z, alpha, w))
    return SteinValue(value=value, derivative=derivative, tail=abs(w) > TAIL_THRESHOLD)
