"""
Distances between the law of W and the standard normal, convergence-rate
fits, and dominance verdicts.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from bound_engine import BoundReport
from config import config
from errors import CapabilityError, RangeError
from fields import FieldModel, exact_enumerate, sample_w
from logger import log_debug, log_estimate, log_verdict
from stein_kernels import normal_cdf

STREAM_DISTANCE = 31
STREAM_PROFILE = 32

MIN_MC_REPLICATES = 1000
DEFAULT_ZGRID = (-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0)


def dkw_radius(delta: float, replicates: int) -> float:
    """Dvoretzky–Kiefer–Wolfowitz radius: sup |F̂ − F| ≤ r with probability ≥ 1 − δ."""
    return math.sqrt(math.log(2.0 / delta) / (2.0 * replicates))


@dataclass(eq=False)
class EmpiricalDistance:
    """Kolmogorov distance to Φ with its Monte Carlo uncertainty."""
    ks: float
    dkw_radius: float
    replicates: int
    mode: str                         # 'exact' | 'monte-carlo'
    profile: Optional[pd.DataFrame] = None   # columns z, abs_diff, se
    delta: float = 1e-3

    def to_dict(self) -> Dict[str, Any]:
        out = {
            'ks': self.ks,
            'dkw_radius': self.dkw_radius,
            'replicates': self.replicates,
            'mode': self.mode,
            'delta': self.delta,
        }
        if self.profile is not None:
            out['profile'] = self.profile.to_dict(orient='records')
        return out


# =============================================================================
# KOLMOGOROV DISTANCE
# =============================================================================

def ks_from_atoms(atoms: Sequence[Tuple[float, float]]) -> float:
    """sup_z |F(z) − Φ(z)| for a finite law, checking both F(v) and F(v−) at every atom."""
    values = np.array([v for v, _ in atoms])
    probs = np.array([p for _, p in atoms])
    order = np.argsort(values)
    values, probs = values[order], probs[order]
    right = np.cumsum(probs)
    left = right - probs
    phi = normal_cdf(values)
    return float(max(np.max(np.abs(right - phi)), np.max(np.abs(left - phi))))


def ks_from_sample(w: np.ndarray) -> float:
    """sup over the sorted sample of max(|i/N − Φ(w_(i))|, |(i−1)/N − Φ(w_(i))|)."""
    w = np.sort(np.asarray(w, dtype=np.float64))
    count = len(w)
    phi = normal_cdf(w)
    upper = np.arange(1, count + 1) / count
    lower = np.arange(0, count) / count
    return float(max(np.max(np.abs(upper - phi)), np.max(np.abs(lower - phi))))


def kolmogorov_distance(
    model: FieldModel,
    replicates: Optional[int] = None,
    seed: int = 0,
    delta: Optional[float] = None,
    threads: Optional[int] = None,
) -> EmpiricalDistance:
    """
    Kolmogorov distance of W to N(0,1).

    Exact over atoms when the model can be enumerated, otherwise from
    ``replicates`` seeded draws of W.
    """
    delta = delta or config.delta
    if model.can_enumerate:
        atoms = exact_enumerate(model)
        result = EmpiricalDistance(ks=ks_from_atoms(atoms), dkw_radius=0.0,
                                   replicates=len(atoms), mode="exact", delta=delta)
    else:
        if replicates is None or replicates < MIN_MC_REPLICATES:
            raise RangeError(f"Monte Carlo distance needs at least {MIN_MC_REPLICATES} replicates, got {replicates}")
        w = sample_w(model, seed, STREAM_DISTANCE, replicates, threads)
        result = EmpiricalDistance(ks=ks_from_sample(w), dkw_radius=dkw_radius(delta, replicates),
                                   replicates=replicates, mode="monte-carlo", delta=delta)
    log_estimate("ks", result.ks, result.dkw_radius, result.mode, f"n={model.n}")
    return result


def nonuniform_profile(
    model: FieldModel,
    replicates: Optional[int] = None,
    seed: int = 0,
    zgrid: Sequence[float] = DEFAULT_ZGRID,
    delta: Optional[float] = None,
    threads: Optional[int] = None,
) -> EmpiricalDistance:
    """Pointwise |F(z) − Φ(z)| on ``zgrid`` with binomial standard errors, plus the KS distance."""
    delta = delta or config.delta
    zgrid = np.asarray(list(zgrid), dtype=np.float64)
    if not np.all(np.isfinite(zgrid)):
        raise RangeError("zgrid must be finite")
    phi = normal_cdf(zgrid)

    if model.can_enumerate:
        atoms = exact_enumerate(model)
        values = np.array([v for v, _ in atoms])
        probs = np.array([p for _, p in atoms])
        cdf = np.array([probs[values <= z + 1e-12].sum() for z in zgrid])
        se = np.zeros_like(cdf)
        ks, radius, count, mode = ks_from_atoms(atoms), 0.0, len(atoms), "exact"
    else:
        if replicates is None or replicates < MIN_MC_REPLICATES:
            raise RangeError(f"Monte Carlo profile needs at least {MIN_MC_REPLICATES} replicates, got {replicates}")
        w = np.sort(sample_w(model, seed, STREAM_PROFILE, replicates, threads))
        cdf = np.searchsorted(w, zgrid, side="right") / replicates
        se = np.sqrt(cdf * (1 - cdf) / replicates)
        ks, radius, count, mode = ks_from_sample(w), dkw_radius(delta, replicates), replicates, "monte-carlo"

    profile = pd.DataFrame({'z': zgrid, 'abs_diff': np.abs(cdf - phi), 'se': se})
    log_debug(f"nonuniform_profile: {mode} over {len(zgrid)} points, max diff {profile['abs_diff'].max():.4g}")
    return EmpiricalDistance(ks=ks, dkw_radius=radius, replicates=count, mode=mode,
                             profile=profile, delta=delta)


def write_profile_csv(distance: EmpiricalDistance, path: Union[str, Path]) -> Path:
    if distance.profile is None:
        raise CapabilityError("distance carries no profile")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    distance.profile.to_csv(path, index=False, columns=['z', 'abs_diff', 'se'])
    return path


# =============================================================================
# RATE FITS
# =============================================================================

@dataclass
class RateFit:
    """log(distance) = intercept + slope · log(n)."""
    slope: float
    intercept: float
    slope_ci: Tuple[float, float]
    slope_se: float
    points: int
    confidence: float = 0.95

    def to_dict(self) -> Dict[str, Any]:
        return {
            'slope': self.slope,
            'intercept': self.intercept,
            'slope_ci': list(self.slope_ci),
            'slope_se': self.slope_se,
            'points': self.points,
            'confidence': self.confidence,
        }


def rate_fit(points: Sequence[Tuple[float, float, float]], confidence: float = 0.95) -> RateFit:
    """
    Weighted least squares of ln(distance) on ln(n).

    Args:
        points: (n, distance, weight) triples, at least three
        confidence: Two-sided level of the slope interval

    Returns:
        RateFit with a t-based interval from the residual variance
    """
    if len(points) < 3:
        raise RangeError(f"rate fit needs at least 3 points, got {len(points)}")
    frame = pd.DataFrame(list(points), columns=['n', 'distance', 'weight'])
    if (frame['distance'] <= 0).any():
        raise RangeError("rate fit needs positive distances")
    if (frame['n'] <= 0).any() or (frame['weight'] <= 0).any():
        raise RangeError("rate fit needs positive sizes and weights")

    root_w = np.sqrt(frame['weight'].to_numpy())
    design = np.column_stack([np.ones(len(frame)), np.log(frame['n'].to_numpy())]) * root_w[:, None]
    target = np.log(frame['distance'].to_numpy()) * root_w
    coef, _, _, _ = np.linalg.lstsq(design, target, rcond=None)
    residuals = target - design @ coef
    dof = len(frame) - 2
    if dof > 0:
        resid_var = float(residuals @ residuals) / dof
        cov = resid_var * np.linalg.inv(design.T @ design)
        slope_se = math.sqrt(max(cov[1, 1], 0.0))
        half = float(stats.t.ppf(0.5 + confidence / 2, dof)) * slope_se
    else:
        slope_se, half = 0.0, 0.0
    intercept, slope = float(coef[0]), float(coef[1])
    return RateFit(
        slope=slope,
        intercept=intercept,
        slope_ci=(slope - half, slope + half),
        slope_se=slope_se,
        points=len(frame),
        confidence=confidence,
    )


# =============================================================================
# VERDICTS
# =============================================================================

@dataclass(frozen=True)
class Verdict:
    theorem: str
    passed: bool
    ks: float
    dkw_radius: float
    bound: float
    bound_se: float
    margin: float

    @property
    def label(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def to_dict(self) -> Dict[str, Any]:
        return {
            'theorem': self.theorem,
            'verdict': self.label,
            'ks': self.ks,
            'dkw_radius': self.dkw_radius,
            'bound': self.bound,
            'bound_se': self.bound_se,
            'margin': self.margin,
        }


def dominance_verdict(distance: EmpiricalDistance, bound: BoundReport) -> Verdict:
    """PASS iff ks − 3·dkw ≤ bound + 3·se. C-free bounds cannot be checked."""
    if bound.c_free:
        raise CapabilityError(f"theorem {bound.theorem} has an unspecified constant; use rate_fit instead")
    low = distance.ks - 3 * distance.dkw_radius
    high = bound.value + 3 * bound.se
    verdict = Verdict(
        theorem=bound.theorem,
        passed=low <= high,
        ks=distance.ks,
        dkw_radius=distance.dkw_radius,
        bound=bound.value,
        bound_se=bound.se,
        margin=high - low,
    )
    log_verdict(bound.theorem, distance.ks, bound.value, verdict.label, verdict.margin)
    return verdict
