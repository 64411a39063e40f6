"""
Bound engine: estimates the error terms r1..r12, moment summaries, the
decoupled variances behind λ, and assembles every theorem's bound.

Exact enumeration replaces Monte Carlo whenever the model can be enumerated.
"""

import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from config import config
from errors import CapabilityError, DegeneracyError, RangeError, StructuralError, UsageError
from estimates import Estimate, Method, linear_combination
from fields import FieldModel, covariance_matrix, enumerate_field, map_replicates, sample_w
from logger import log_debug, log_estimate, log_info
from neighborhoods import (
    KappaStats,
    Level,
    NeighborhoodSystem,
    PairSet,
    closure_extend,
    kappa_stats,
    nc_sets,
    neighbor_pairs_b,
)
from stein_kernels import (
    KernelSample,
    marginal_atoms,
    neighborhood_sums,
    r5_closed_form,
    r5_pair,
    r6_pair,
    r6sq_closed_form,
    r10_closed_form,
    r10_pair,
    pair_sum,
    starred_pair_expectation,
)

# Stream ids of the estimators in this module
STREAM_R_TERMS = 21
STREAM_R1_PHASE1 = 22
STREAM_R1_PHASE2 = 23
STREAM_MOMENTS = 24
STREAM_R4_CHAIN = 25
STREAM_SIGMA = 26
STREAM_CONCENTRATION = 27

TERM_NAMES = tuple(f"r{k}" for k in range(1, 13))
LD3_TERMS = ("r7", "r8", "r9", "r10", "r11", "r12")
PAIR_TERMS = ("r5", "r6", "r10")

THEOREMS = (
    "2.1", "2.2", "2.3", "2.4", "2.5-rate",
    "2.6u", "2.6n-rate", "2.7u", "2.7n-rate", "2.8u", "2.8n-rate",
)
C_FREE = frozenset({"2.5-rate", "2.6n-rate", "2.7n-rate", "2.8u", "2.8n-rate"})


# =============================================================================
# BLOCK ACCUMULATION
# =============================================================================

def _merge(blocks: Iterable[Dict[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    """Add block partial sums key by key, in block order."""
    total: Dict[str, np.ndarray] = {}
    for block in blocks:
        for key, value in block.items():
            total[key] = total[key] + value if key in total else value
    return total


def _sums(per_rep: Dict[str, np.ndarray], per_index: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Block partial sums: scalars get a sum and a sum of squares, per-index arrays a column sum."""
    out: Dict[str, np.ndarray] = {}
    for key, value in per_rep.items():
        out[key] = np.array(value.sum())
        out[key + "^2"] = np.array(np.dot(value, value))
    for key, value in per_index.items():
        out[key] = value.sum(axis=0)
    return out


def _estimate(totals: Dict[str, np.ndarray], key: str, count: int) -> Estimate:
    return Estimate.from_sums(float(totals[key]), float(totals[key + "^2"]), count)


def _require_replicates(replicates: Optional[int], minimum: int = 2) -> int:
    if replicates is None or replicates < minimum:
        raise UsageError(f"need at least {minimum} replicates, got {replicates}", "replicates")
    return int(replicates)


# =============================================================================
# ERROR TERMS
# =============================================================================

@dataclass
class RTerms:
    """Estimated error terms with standard errors."""
    terms: Dict[str, Estimate]
    method: Method
    replicates: int
    phase_sizes: Optional[Tuple[int, int]] = None
    closure_applied: bool = False

    def get(self, name: str) -> Estimate:
        if name not in self.terms:
            raise CapabilityError(f"{name} was not estimated")
        return self.terms[name]

    def value(self, name: str) -> float:
        return self.get(name).value

    def to_dict(self) -> Dict[str, Any]:
        return {
            'terms': {name: est.to_dict() for name, est in self.terms.items()},
            'method': self.method.value,
            'replicates': self.replicates,
            'phase_sizes': list(self.phase_sizes) if self.phase_sizes else None,
            'closure_applied': self.closure_applied,
        }


def _resolve_terms(system: NeighborhoodSystem, terms: Optional[Sequence[str]]) -> List[str]:
    if terms is None:
        wanted = list(TERM_NAMES if system.level.covers(Level.LD3) else TERM_NAMES[:6])
    else:
        unknown = [t for t in terms if t not in TERM_NAMES]
        if unknown:
            raise UsageError(f"unknown terms {unknown}", "terms")
        wanted = [t for t in TERM_NAMES if t in terms]
    if any(t in LD3_TERMS for t in wanted):
        system.require(Level.LD3, "r7..r12")
    return wanted


def _pair_system(system: NeighborhoodSystem) -> Tuple[NeighborhoodSystem, bool]:
    if system.has("B"):
        return system, False
    log_info("estimate_r_terms: closing an LD1 system to obtain B sets for the pair terms")
    return closure_extend(system), True


def _index_features(sample: KernelSample) -> Dict[str, np.ndarray]:
    """Per-index quantities whose means enter r1, r11 and r12."""
    ax = np.abs(sample.x)
    features = {
        'xy': sample.x * sample.y,
        'big': (ax > 1).astype(np.float64),
        'xcap': ax * np.minimum(np.abs(sample.y), 1.0),
    }
    if sample.z is not None:
        w = np.abs(sample.w)[:, None]
        features['wz'] = (w + 1.0) * np.minimum(np.abs(sample.z), 1.0)
    return features


def _replicate_terms(
    sample: KernelSample,
    star: Optional[KernelSample],
    pairs: Optional[PairSet],
    wanted: Sequence[str],
) -> Dict[str, np.ndarray]:
    """
    Per-replicate summands of the directly averaged terms.

    Without ``star`` the pair terms carry only their unstarred part.
    """
    x, y = sample.x, sample.y
    ax, ay = np.abs(x), np.abs(y)
    axy = ax * ay
    aw = np.abs(sample.w)
    out: Dict[str, np.ndarray] = {}
    if "r2" in wanted:
        out['r2'] = (axy * (ay > 1)).sum(axis=1)
    if "r3" in wanted or "r4" in wanted:
        capped = (ax * np.minimum(y * y, 1.0)).sum(axis=1)
        if "r3" in wanted:
            out['r3'] = capped
        if "r4" in wanted:
            # Σ_i |W X_i|(Y_i² ∧ 1) with W common to every i
            out['r4'] = aw * capped
    if "r7" in wanted:
        out['r7'] = (axy * (ax > 1)).sum(axis=1)
    if "r8" in wanted or "r9" in wanted:
        small = ax * (ax <= 1) * np.minimum(ay, 1.0)
        az = np.abs(sample.z)
        if "r8" in wanted:
            out['r8'] = (small * az).sum(axis=1)
        if "r9" in wanted:
            out['r9'] = aw * (small * np.minimum(az, 1.0)).sum(axis=1)
    if pairs is not None:
        if star is None:
            if "r5" in wanted:
                out['r5'] = pair_sum(r5_pair, sample, sample, pairs)
            if "r6" in wanted:
                out['r6sq'] = 0.5 * pair_sum(r6_pair, sample, sample, pairs)
            if "r10" in wanted:
                out['r10'] = pair_sum(r10_pair, sample, sample, pairs)
        else:
            if "r5" in wanted:
                out['r5'] = r5_closed_form(sample, star, pairs)
            if "r6" in wanted:
                out['r6sq'] = r6sq_closed_form(sample, star, pairs)
            if "r10" in wanted:
                out['r10'] = r10_closed_form(sample, star, pairs)
    return out


def estimate_r_terms(
    model: FieldModel,
    system: Optional[NeighborhoodSystem] = None,
    replicates: Optional[int] = None,
    seed: int = 0,
    terms: Optional[Sequence[str]] = None,
) -> RTerms:
    """
    Estimate r1..r12 (those the system's level supports, or ``terms``).

    Args:
        model: Standardized field
        system: Neighborhoods to evaluate with; defaults to the model's own
        replicates: Monte Carlo budget, ignored on the exact path
        seed: Master seed
        terms: Subset of 'r1'..'r12'

    Returns:
        RTerms; exact when the model's enumerator is within the outcome limit
    """
    system = system or model.system
    if system.n != model.n:
        raise StructuralError(f"system has {system.n} indices, model has {model.n}")
    wanted = _resolve_terms(system, terms)
    closure_applied = False
    pairs = None
    eval_system = system
    if any(t in PAIR_TERMS for t in wanted):
        eval_system, closure_applied = _pair_system(system)
        pairs = neighbor_pairs_b(eval_system)

    started = time.perf_counter()
    if model.can_enumerate:
        result = _exact_r_terms(model, eval_system, pairs, wanted)
    else:
        result = _mc_r_terms(model, eval_system, pairs, wanted, _require_replicates(replicates), seed)
    result.closure_applied = closure_applied

    elapsed = time.perf_counter() - started
    for name, est in result.terms.items():
        log_estimate(name, est.value, est.se, est.method.value, f"replicates={est.replicates}")
    log_debug(f"estimate_r_terms: {result.method.value} in {elapsed:.2f}s")
    return result


def _exact_r_terms(
    model: FieldModel,
    system: NeighborhoodSystem,
    pairs: Optional[PairSet],
    wanted: Sequence[str],
) -> RTerms:
    law = enumerate_field(model)
    probs = law.probs
    sample = KernelSample.build(system, law.values)
    direct = _replicate_terms(sample, None, pairs, wanted)
    features = _index_features(sample)
    means = {key: law.expect(value) for key, value in features.items()}

    terms: Dict[str, Estimate] = {}
    if "r1" in wanted:
        deviation = np.abs((features['xy'] - means['xy']).sum(axis=1))
        terms['r1'] = Estimate.exact(float(probs @ deviation))
    for name in ("r2", "r3", "r4", "r7", "r8", "r9"):
        if name in wanted:
            terms[name] = Estimate.exact(float(probs @ direct[name]))

    if pairs is not None:
        atoms = [marginal_atoms(sample.x[:, i], sample.y[:, i], probs) for i in range(model.n)]
        if "r5" in wanted:
            starred = starred_pair_expectation(r5_pair, atoms, pairs)
            terms['r5'] = Estimate.exact(float(probs @ direct['r5']) - starred)
        if "r6" in wanted:
            starred = 0.5 * starred_pair_expectation(r6_pair, atoms, pairs)
            terms['r6'] = Estimate.exact(float(probs @ direct['r6sq']) - starred).sqrt()
        if "r10" in wanted:
            starred = starred_pair_expectation(r10_pair, atoms, pairs)
            terms['r10'] = Estimate.exact(float(probs @ direct['r10']) + starred)

    if "r11" in wanted:
        terms['r11'] = Estimate.exact(float(np.dot(means['big'], means['xcap'])))
    if "r12" in wanted:
        terms['r12'] = Estimate.exact(float(np.dot(means['wz'], means['xcap'])))

    return RTerms(terms=_clip_terms(terms), method=Method.EXACT, replicates=len(probs))


def _clip_terms(terms: Dict[str, Estimate]) -> Dict[str, Estimate]:
    """All terms are nonnegative; round-off below zero is reset."""
    return {
        name: est if est.value >= 0 else Estimate(0.0, est.se, est.replicates, est.method)
        for name, est in terms.items()
    }


def _mc_r_terms(
    model: FieldModel,
    system: NeighborhoodSystem,
    pairs: Optional[PairSet],
    wanted: Sequence[str],
    replicates: int,
    seed: int,
) -> RTerms:
    paired = pairs is not None
    products = [t for t in ("r11", "r12") if t in wanted]

    def block(values: np.ndarray, star: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
        sample = KernelSample.build(system, values)
        star_sample = KernelSample.build(system, star) if star is not None else None
        per_rep = _replicate_terms(sample, star_sample, pairs, wanted)
        per_index = {}
        if products:
            features = _index_features(sample)
            per_index = {key: features[key] for key in ('big', 'xcap', 'wz') if key in features}
        return _sums(per_rep, per_index)

    totals = _merge(map_replicates(model, seed, STREAM_R_TERMS, replicates, block, paired=paired))
    terms: Dict[str, Estimate] = {}
    for name in ("r2", "r3", "r4", "r5", "r7", "r8", "r9", "r10"):
        if name in wanted:
            terms[name] = _estimate(totals, name, replicates)
    if "r6" in wanted:
        terms['r6'] = _estimate(totals, 'r6sq', replicates).sqrt()

    if products:
        terms.update(_product_terms(model, system, totals, products, replicates, seed))

    phase_sizes = None
    if "r1" in wanted:
        terms['r1'], phase_sizes = _two_phase_r1(model, system, replicates, seed)

    return RTerms(
        terms=_clip_terms(terms),
        method=Method.MONTE_CARLO,
        replicates=replicates,
        phase_sizes=phase_sizes,
    )


def _product_terms(
    model: FieldModel,
    system: NeighborhoodSystem,
    totals: Dict[str, np.ndarray],
    products: Sequence[str],
    replicates: int,
    seed: int,
) -> Dict[str, Estimate]:
    """
    r11 = Σ P(|X_i|>1)·E|X_i|(|Y_i|∧1) and r12 = Σ E(|W|+1)(|Z_i|∧1)·E|X_i|(|Y_i|∧1).

    Values come from the main pass; SEs from a delta-method pass over the
    same replicates.
    """
    means = {key: totals[key] / replicates for key in ('big', 'xcap', 'wz') if key in totals}

    def linearization(values: np.ndarray) -> Dict[str, np.ndarray]:
        features = _index_features(KernelSample.build(system, values))
        per_rep = {}
        if "r11" in products:
            per_rep['r11'] = features['big'] @ means['xcap'] + features['xcap'] @ means['big']
        if "r12" in products:
            per_rep['r12'] = features['wz'] @ means['xcap'] + features['xcap'] @ means['wz']
        return _sums(per_rep, {})

    lin = _merge(map_replicates(model, seed, STREAM_R_TERMS, replicates, linearization))
    out = {}
    if "r11" in products:
        value = float(np.dot(means['big'], means['xcap']))
        out['r11'] = Estimate(value, _estimate(lin, 'r11', replicates).se, replicates, Method.MONTE_CARLO)
    if "r12" in products:
        value = float(np.dot(means['wz'], means['xcap']))
        out['r12'] = Estimate(value, _estimate(lin, 'r12', replicates).se, replicates, Method.MONTE_CARLO)
    return out


def _two_phase_r1(
    model: FieldModel,
    system: NeighborhoodSystem,
    replicates: int,
    seed: int,
) -> Tuple[Estimate, Tuple[int, int]]:
    """Phase 1 estimates every E X_iY_i; phase 2 averages |Σ(X_iY_i − m_i)|."""
    phase1 = max(1, int(round(config.r1_phase1_fraction * replicates)))
    phase2 = max(2, replicates - phase1)
    a_mat = system.membership("A")

    def products(values: np.ndarray) -> np.ndarray:
        return values * neighborhood_sums(values, a_mat)

    centre = _merge(
        map_replicates(model, seed, STREAM_R1_PHASE1, phase1, lambda v: {'xy': products(v).sum(axis=0)})
    )['xy'] / phase1

    def deviation(values: np.ndarray) -> Dict[str, np.ndarray]:
        return _sums({'r1': np.abs((products(values) - centre).sum(axis=1))}, {})

    totals = _merge(map_replicates(model, seed, STREAM_R1_PHASE2, phase2, deviation))
    log_debug(f"r1 two-phase split: {phase1} + {phase2}, Σ m_i = {centre.sum():.6g}")
    return _estimate(totals, 'r1', phase2), (phase1, phase2)


# =============================================================================
# REMARK CHAIN FOR r4
# =============================================================================

def r4_ld1_bound(
    model: FieldModel,
    system: Optional[NeighborhoodSystem] = None,
    replicates: Optional[int] = None,
    seed: int = 0,
) -> Estimate:
    """
    Moment chain bounding r4 under LD1 alone:

        Σ_i |A_i| Σ_{j∈A_i} [(1 + E|Y_j|) E|X_j|(X_j² ∧ 1) + E|Y_jX_j|(|X_j| ∧ 1)]
          + |A_i|² [(1 + E|Y_i|) E|X_i|(X_i² ∧ 1) + E|Y_iX_i|(|X_i| ∧ 1)]
    """
    system = system or model.system
    a_mat = system.membership("A")
    sizes = np.array([len(s) for s in system.a_sets], dtype=np.float64)
    # weight of index j: Σ_{i : j∈A_i} |A_i| + |A_j|²
    weights = np.asarray(a_mat @ sizes).ravel() + sizes * sizes

    def features(values: np.ndarray) -> Dict[str, np.ndarray]:
        y = neighborhood_sums(values, a_mat)
        ax = np.abs(values)
        return {
            'ay': np.abs(y),
            'u': ax * np.minimum(values * values, 1.0),
            'v': np.abs(y) * ax * np.minimum(ax, 1.0),
        }

    def chain(means: Dict[str, np.ndarray]) -> float:
        return float(np.dot(weights, (1.0 + means['ay']) * means['u'] + means['v']))

    if model.can_enumerate:
        law = enumerate_field(model)
        means = {key: law.expect(value) for key, value in features(law.values).items()}
        result = Estimate.exact(chain(means))
    else:
        replicates = _require_replicates(replicates)
        sums = _merge(map_replicates(
            model, seed, STREAM_R4_CHAIN, replicates,
            lambda v: {k: f.sum(axis=0) for k, f in features(v).items()},
        ))
        means = {key: value / replicates for key, value in sums.items()}

        def linearization(values: np.ndarray) -> Dict[str, np.ndarray]:
            f = features(values)
            per_rep = (f['u'] * (1.0 + means['ay']) + f['ay'] * means['u'] + f['v']) @ weights
            return _sums({'chain': per_rep}, {})

        lin = _merge(map_replicates(model, seed, STREAM_R4_CHAIN, replicates, linearization))
        result = Estimate(chain(means), _estimate(lin, 'chain', replicates).se, replicates, Method.MONTE_CARLO)
    log_estimate("r4_ld1_bound", result.value, result.se, result.method.value)
    return result


# =============================================================================
# MOMENTS
# =============================================================================

@dataclass
class MomentSummary:
    """Per-index absolute moments of X, Y, Z and the θ, θ_x, γ summaries."""
    p: float
    x_moments: Dict[float, np.ndarray]
    y_moments: Dict[float, np.ndarray]
    z_moments: Optional[Dict[float, np.ndarray]]
    theta: Estimate
    theta_x: Estimate
    gamma: Estimate
    method: Method
    replicates: int

    @property
    def n(self) -> int:
        return len(self.x_moments[self.p])

    def moment_sum(self, q: float) -> float:
        """Σ_i (E|X_i|^q + E|Y_i|^q)."""
        return float(self.x_moments[q].sum() + self.y_moments[q].sum())

    def to_dict(self) -> Dict[str, Any]:
        return {
            'p': self.p,
            'theta': self.theta.to_dict(),
            'theta_x': self.theta_x.to_dict(),
            'gamma': self.gamma.to_dict(),
            'moment_sums': {
                str(q): {'x': float(self.x_moments[q].sum()), 'y': float(self.y_moments[q].sum())}
                for q in self.x_moments
            },
            'method': self.method.value,
            'replicates': self.replicates,
        }


def _check_p(p: float, low: float, high: float, purpose: str):
    if not low < p <= high:
        raise RangeError(f"p must lie in ({low}, {high}] for {purpose}, got {p}")


def _max_root(means: np.ndarray, variances: np.ndarray, p: float, count: int, exact: bool) -> Estimate:
    """(max_i m_i)^{1/p} with a delta-method SE at the maximizing index."""
    idx = int(np.argmax(means))
    top = float(means[idx])
    value = top ** (1.0 / p)
    if exact:
        return Estimate.exact(value)
    se_top = math.sqrt(max(float(variances[idx]), 0.0) / count)
    se = (1.0 / p) * top ** (1.0 / p - 1.0) * se_top if top > 0 else 0.0
    return Estimate(value, se, count, Method.MONTE_CARLO)


def estimate_moments(
    model: FieldModel,
    system: Optional[NeighborhoodSystem] = None,
    p: float = 3.0,
    replicates: Optional[int] = None,
    seed: int = 0,
) -> MomentSummary:
    """Per-index E|X_i|^q, E|Y_i|^q, E|Z_i|^q for q ∈ {2, 3, p} and the summaries θ, θ_x, γ."""
    _check_p(p, 2.0, 4.0, "moment summaries")
    system = system or model.system
    orders = sorted({2.0, 3.0, float(p)})
    p = float(p)

    def features(values: np.ndarray) -> Dict[str, np.ndarray]:
        sample = KernelSample.build(system, values)
        ax, ay = np.abs(sample.x), np.abs(sample.y)
        out = {}
        for q in orders:
            out[f"x{q}"] = ax ** q
            out[f"y{q}"] = ay ** q
            if sample.z is not None:
                out[f"z{q}"] = np.abs(sample.z) ** q
        combined = out[f"x{p}"] + out[f"y{p}"]
        out['u^2'] = combined * combined
        out[f"x{p}^2"] = out[f"x{p}"] ** 2
        return out

    if model.can_enumerate:
        law = enumerate_field(model)
        feats = features(law.values)
        means = {key: law.expect(value) for key, value in feats.items()}
        gamma_rep = feats[f"x{p}"].sum(axis=1)
        gamma = Estimate.exact(float(law.probs @ gamma_rep))
        count, exact, method = len(law.probs), True, Method.EXACT
    else:
        count = _require_replicates(replicates)

        def block(values: np.ndarray) -> Dict[str, np.ndarray]:
            feats = features(values)
            return _sums({'gamma': feats[f"x{p}"].sum(axis=1)}, feats)

        totals = _merge(map_replicates(model, seed, STREAM_MOMENTS, count, block))
        means = {key: totals[key] / count for key in totals if key not in ('gamma', 'gamma^2')}
        gamma = _estimate(totals, 'gamma', count)
        exact, method = False, Method.MONTE_CARLO

    u_mean = means[f"x{p}"] + means[f"y{p}"]
    u_var = means['u^2'] - u_mean ** 2
    x_var = means[f"x{p}^2"] - means[f"x{p}"] ** 2
    has_z = f"z{p}" in means
    summary = MomentSummary(
        p=p,
        x_moments={q: means[f"x{q}"] for q in orders},
        y_moments={q: means[f"y{q}"] for q in orders},
        z_moments={q: means[f"z{q}"] for q in orders} if has_z else None,
        theta=_max_root(u_mean, u_var, p, count, exact),
        theta_x=_max_root(means[f"x{p}"], x_var, p, count, exact),
        gamma=gamma,
        method=method,
        replicates=count,
    )
    log_estimate("gamma", gamma.value, gamma.se, method.value, f"p={p}")
    return summary


# =============================================================================
# DECOUPLED VARIANCES
# =============================================================================

@dataclass
class SigmaLambda:
    """σ_i² = Var(Σ_{j∉N(C_i)} X_j) per index and λ = 1 ∨ max 1/σ_i."""
    sigma2: np.ndarray
    sigma2_se: np.ndarray
    lam: Estimate
    method: Method

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.sigma2)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'min_sigma2': float(self.sigma2.min()),
            'lambda': self.lam.to_dict(),
            'method': self.method.value,
        }


def _membership_of(sets, n: int) -> sparse.csr_matrix:
    rows = np.fromiter((j for s in sets for j in s), dtype=np.int64)
    cols = np.repeat(np.arange(n), [len(s) for s in sets])
    return sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


def sigma_lambda(
    model: FieldModel,
    system: Optional[NeighborhoodSystem] = None,
    seed: int = 0,
    samples: Optional[int] = None,
) -> SigmaLambda:
    """
    Exact σ_i² from the covariance oracle:

        σ_i² = 1ᵀΣ1 − 2 Σ_{j∈N(C_i)} (Σ1)_j + 1_{N(C_i)}ᵀ Σ 1_{N(C_i)}

    Without an oracle, a Monte Carlo run of ``samples`` draws.
    """
    system = system or model.system
    system.require(Level.LD3, "sigma_lambda")
    n = system.n
    excluded = _membership_of(nc_sets(system), n)

    if model.covariance is not None:
        cov = sparse.csr_matrix(covariance_matrix(model))
        row_sums = np.asarray(cov.sum(axis=1)).ravel()
        total = float(row_sums.sum())
        cross = np.asarray(excluded.T @ row_sums).ravel()
        inner = np.asarray(excluded.multiply(cov @ excluded).sum(axis=0)).ravel()
        sigma2 = total - 2.0 * cross + inner
        sigma2_se = np.zeros(n)
        method = Method.EXACT
        count = 0
    else:
        count = _require_replicates(samples or config.sigma_mc_samples)

        def block(values: np.ndarray) -> Dict[str, np.ndarray]:
            reduced = values.sum(axis=1, keepdims=True) - neighborhood_sums(values, excluded)
            return {f"m{k}": (reduced ** k).sum(axis=0) for k in (1, 2, 3, 4)}

        totals = _merge(map_replicates(model, seed, STREAM_SIGMA, count, block))
        m1, m2, m3, m4 = (totals[f"m{k}"] / count for k in (1, 2, 3, 4))
        sigma2 = m2 - m1 ** 2
        central4 = m4 - 4 * m1 * m3 + 6 * m1 ** 2 * m2 - 3 * m1 ** 4
        sigma2_se = np.sqrt(np.maximum(central4 - sigma2 ** 2, 0.0) / count)
        method = Method.MONTE_CARLO

    bad = np.flatnonzero(sigma2 <= 1e-12)
    if len(bad):
        raise DegeneracyError(f"σ_i² ≤ 0 for index {system.indices[int(bad[0])]!r}")

    idx = int(np.argmin(sigma2))
    inv = 1.0 / math.sqrt(float(sigma2[idx]))
    if inv > 1.0:
        lam = Estimate(inv, 0.5 * inv ** 3 * float(sigma2_se[idx]), count, method)
    else:
        lam = Estimate(1.0, 0.0, count, method)
    log_estimate("lambda", lam.value, lam.se, method.value, f"min sigma2={sigma2[idx]:.6g}")
    return SigmaLambda(sigma2=sigma2, sigma2_se=sigma2_se, lam=lam, method=method)


# =============================================================================
# THEOREM BOUNDS
# =============================================================================

@dataclass
class Ingredients:
    """Everything a theorem may consume; each theorem checks for what it needs."""
    r_terms: Optional[RTerms] = None
    moments: Optional[MomentSummary] = None
    kappas: Optional[KappaStats] = None
    sigma: Optional[SigmaLambda] = None
    n: Optional[int] = None
    m: Optional[int] = None
    dimension: Optional[int] = None
    max_degree: Optional[int] = None
    vertices: Optional[int] = None
    count_sigma: Optional[float] = None
    z: float = 0.0

    def need(self, name: str, theorem: str):
        value = getattr(self, name)
        if value is None:
            raise CapabilityError(f"theorem {theorem} needs ingredient '{name}'")
        return value


@dataclass
class BoundReport:
    """An assembled bound (or C-free rate functional) with its propagated SE."""
    theorem: str
    value: float
    se: float
    c_free: bool
    ingredients: Dict[str, Any] = field(default_factory=dict)
    extras: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'theorem': self.theorem,
            'value': self.value,
            'se': self.se,
            'c_free': self.c_free,
            'ingredients': self.ingredients,
            'extras': self.extras,
        }


def theorem_bound(theorem: str, ingredients: Ingredients, p: Optional[float] = None) -> BoundReport:
    """
    Assemble the bound of ``theorem`` from its ingredients.

    ``p`` defaults to the moment summary's p; Theorem 2.8 always uses 3.
    """
    if theorem not in THEOREMS:
        raise UsageError(f"unknown theorem {theorem!r}", "theorems")
    builder = _BUILDERS[theorem]
    report = builder(theorem, ingredients, p)
    if report.value < 0:
        raise RangeError(f"theorem {theorem} produced a negative bound {report.value}")
    return report


def _report(theorem: str, value: float, se: float, echo: Dict[str, Any], extras=None) -> BoundReport:
    return BoundReport(
        theorem=theorem,
        value=float(value),
        se=float(se),
        c_free=theorem in C_FREE,
        ingredients=echo,
        extras=extras or {},
    )


def _moment_p(theorem: str, ing: Ingredients, p: Optional[float], high: float) -> Tuple[MomentSummary, float]:
    moments = ing.need("moments", theorem)
    p = moments.p if p is None else float(p)
    _check_p(p, 2.0, high, f"theorem {theorem}")
    if p != moments.p:
        raise CapabilityError(f"theorem {theorem} asked for p={p}, moments were estimated at p={moments.p}")
    return moments, p


def _bound_2_1(theorem, ing, p):
    r = ing.need("r_terms", theorem)
    weights = {'r1': 1.0, 'r2': 4.0, 'r3': 8.0, 'r4': 1.0, 'r5': 4.5, 'r6': 1.5}
    est = linear_combination(weights, {k: r.get(k) for k in weights})
    return _report(theorem, est.value, est.se, {k: r.value(k) for k in weights})


def _bound_2_2(theorem, ing, p):
    moments, p = _moment_p(theorem, ing, p, 4.0)
    kappa = ing.need("kappas", theorem).get("kappa_nb")
    n = ing.n or moments.n
    theta = moments.theta.value
    q = min(3.0, p)
    value = (13 + 11 * kappa) * n * theta ** q + 2.5 * theta ** (p / 2) * math.sqrt(kappa * n)
    slope = (13 + 11 * kappa) * n * q * theta ** (q - 1) + 2.5 * (p / 2) * theta ** (p / 2 - 1) * math.sqrt(kappa * n)
    sum_form = (13 + 11 * kappa) * moments.moment_sum(q) + 2.5 * math.sqrt(kappa * moments.moment_sum(p))
    return _report(
        theorem, value, abs(slope) * moments.theta.se,
        {'kappa': kappa, 'theta': theta, 'p': p, 'n': n},
        {'sum_form': sum_form},
    )


def _bound_2_3(theorem, ing, p):
    r = ing.need("r_terms", theorem)
    sigma = ing.need("sigma", theorem)
    names = ('r2', 'r3', 'r7', 'r8', 'r9', 'r10', 'r11', 'r12')
    total = linear_combination({k: 1.0 for k in names}, {k: r.get(k) for k in names})
    lam = sigma.lam.value
    value = 4 * lam ** 1.5 * total.value
    se = 4 * lam ** 1.5 * total.se + 6 * lam ** 0.5 * total.value * sigma.lam.se
    echo = {k: r.value(k) for k in names}
    echo['lambda'] = lam
    return _report(theorem, value, se, echo)


def _bound_2_4(theorem, ing, p):
    moments, p = _moment_p(theorem, ing, p, 3.0)
    kappa = ing.need("kappas", theorem).get("kappa_nc")
    factor = 75 * kappa ** (p - 1)
    return _report(
        theorem, factor * moments.gamma.value, factor * moments.gamma.se,
        {'kappa': kappa, 'p': p, 'gamma': moments.gamma.value},
    )


def _bound_2_5(theorem, ing, p):
    moments, p = _moment_p(theorem, ing, p, 3.0)
    kappa = ing.need("kappas", theorem).get("kappa_dstar")
    factor = kappa ** p * (1 + abs(ing.z)) ** (-p)
    return _report(
        theorem, factor * moments.gamma.value, factor * moments.gamma.se,
        {'kappa': kappa, 'p': p, 'z': ing.z, 'gamma': moments.gamma.value},
    )


def _bound_2_6u(theorem, ing, p):
    moments, p = _moment_p(theorem, ing, p, 3.0)
    m, d = ing.need("m", theorem), ing.need("dimension", theorem)
    factor = 75 * (10 * m + 1) ** ((p - 1) * d)
    return _report(
        theorem, factor * moments.gamma.value, factor * moments.gamma.se,
        {'m': m, 'd': d, 'p': p, 'gamma': moments.gamma.value},
    )


def _bound_2_6n(theorem, ing, p):
    moments, p = _moment_p(theorem, ing, p, 3.0)
    m, d = ing.need("m", theorem), ing.need("dimension", theorem)
    factor = (1 + abs(ing.z)) ** (-p) * 19 ** (p * d) * (m + 1) ** ((p - 1) * d)
    return _report(
        theorem, factor * moments.gamma.value, factor * moments.gamma.se,
        {'m': m, 'd': d, 'p': p, 'z': ing.z, 'gamma': moments.gamma.value},
    )


def _graph_theta_term(theorem, ing, p):
    moments, p = _moment_p(theorem, ing, p, 3.0)
    degree = ing.need("max_degree", theorem)
    vertices = ing.need("vertices", theorem)
    theta = moments.theta_x
    value = vertices * theta.value ** p
    se = vertices * p * theta.value ** (p - 1) * theta.se
    return degree, vertices, theta.value, p, value, se


def _bound_2_7u(theorem, ing, p):
    degree, vertices, theta, p, base, base_se = _graph_theta_term(theorem, ing, p)
    factor = 75 * degree ** (5 * (p - 1))
    return _report(theorem, factor * base, factor * base_se,
                   {'D': degree, 'V': vertices, 'theta_x': theta, 'p': p})


def _bound_2_7n(theorem, ing, p):
    degree, vertices, theta, p, base, base_se = _graph_theta_term(theorem, ing, p)
    factor = (1 + abs(ing.z)) ** (-p) * degree ** (5 * p)
    return _report(theorem, factor * base, factor * base_se,
                   {'D': degree, 'V': vertices, 'theta_x': theta, 'p': p, 'z': ing.z})


def _bound_2_8u(theorem, ing, p):
    d = ing.need("max_degree", theorem)
    vertices = ing.need("vertices", theorem)
    sigma = ing.need("count_sigma", theorem)
    return _report(theorem, d ** 2 * vertices / sigma ** 3, 0.0, {'d': d, 'V': vertices, 'sigma': sigma})


def _bound_2_8n(theorem, ing, p):
    d = ing.need("max_degree", theorem)
    vertices = ing.need("vertices", theorem)
    sigma = ing.need("count_sigma", theorem)
    value = (1 + abs(ing.z)) ** (-3) * d ** 5 * vertices / sigma ** 3
    return _report(theorem, value, 0.0, {'d': d, 'V': vertices, 'sigma': sigma, 'z': ing.z})


_BUILDERS: Dict[str, Callable[[str, Ingredients, Optional[float]], BoundReport]] = {
    "2.1": _bound_2_1,
    "2.2": _bound_2_2,
    "2.3": _bound_2_3,
    "2.4": _bound_2_4,
    "2.5-rate": _bound_2_5,
    "2.6u": _bound_2_6u,
    "2.6n-rate": _bound_2_6n,
    "2.7u": _bound_2_7u,
    "2.7n-rate": _bound_2_7n,
    "2.8u": _bound_2_8u,
    "2.8n-rate": _bound_2_8n,
}


# =============================================================================
# MOMENT INEQUALITY CHECKS
# =============================================================================

@dataclass(frozen=True)
class CheckRow:
    """One side-by-side comparison; relation '=' (relative 1e-10) or '<='."""
    name: str
    lhs: float
    rhs: float
    relation: str

    @property
    def holds(self) -> bool:
        if self.relation == "=":
            return abs(self.lhs - self.rhs) <= 1e-10 * max(1.0, abs(self.lhs), abs(self.rhs))
        return self.lhs <= self.rhs * (1 + 1e-12) + 1e-15

    def to_dict(self) -> Dict[str, Any]:
        return {'name': self.name, 'lhs': self.lhs, 'rhs': self.rhs,
                'relation': self.relation, 'holds': self.holds}


@dataclass
class CheckReport:
    check: str
    rows: List[CheckRow]
    parameters: Dict[str, Any] = field(default_factory=dict)

    @property
    def holds(self) -> bool:
        return all(row.holds for row in self.rows)

    def row(self, name: str) -> CheckRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'check': self.check,
            'holds': self.holds,
            'parameters': self.parameters,
            'rows': [row.to_dict() for row in self.rows],
        }


PerIndexMap = Callable[[np.ndarray], np.ndarray]
BlockMap = Callable[[np.ndarray, NeighborhoodSystem], np.ndarray]


def _centred(values: np.ndarray, probs: np.ndarray, center: bool) -> np.ndarray:
    means = probs @ values
    if center:
        return values - means
    if np.any(np.abs(means) > 1e-12):
        raise RangeError("transformed variables must have zero mean")
    return values


def lemma_3_1_check(
    model: FieldModel,
    system: Optional[NeighborhoodSystem] = None,
    xi: Optional[PerIndexMap] = None,
    a: Optional[float] = None,
    center: bool = True,
) -> CheckReport:
    """
    Exact check of the second and fourth moment identities for T = Σ ξ_i and
    the bounds derived from them. ``xi`` maps X values elementwise.
    """
    system = system or model.system
    system.require(Level.LD3, "lemma_3_1_check")
    law = enumerate_field(model)
    probs = law.probs
    e = law.expect

    xi_vals = _centred(xi(law.values) if xi else law.values.copy(), probs, center)
    sa = neighborhood_sums(xi_vals, system.membership("A"))
    sb = neighborhood_sums(xi_vals, system.membership("B"))
    sc = neighborhood_sums(xi_vals, system.membership("C"))
    t = xi_vals.sum(axis=1)

    sigma2 = float(e(t * t))
    et4 = float(e(t ** 4))
    xa = e(xi_vals * sa)
    identity_319 = float(xa.sum())
    identity_320 = (
        3 * sigma2 ** 2
        - 6 * float(xa @ e(sb * sc))
        + 3 * float(xa @ e(sb * sb))
        - 3 * float(e(xi_vals * sa * sa * sb).sum())
        + float(e(xi_vals * sa ** 3).sum())
        + 6 * float(e(xi_vals * sa * sb * sc).sum())
        - 3 * float(e(xi_vals * sa * sb * sb).sum())
    )

    kappa1 = kappa_stats(system).get("kappa1")
    a = float(kappa1 if a is None else a)
    if a <= 0:
        raise RangeError(f"a must be positive, got {a}")
    fourth = e(xi_vals ** 4)
    bound_321 = 3 * sigma2 ** 2 + 5.5 * float(
        (a ** 3 * fourth + (e(sa ** 4) + e(sb ** 4) + e(sc ** 4)) / a).sum()
    )

    rows = [
        CheckRow("3.19", sigma2, identity_319, "="),
        CheckRow("3.20", et4, identity_320, "="),
        CheckRow("3.21", et4, bound_321, "<="),
        CheckRow("3.22", sigma2, kappa1 * float(e(xi_vals ** 2).sum()), "<="),
        CheckRow("3.23", et4, 3 * sigma2 ** 2 + 22 * kappa1 ** 3 * float(fourth.sum()), "<="),
    ]
    report = CheckReport("lemma_3_1", rows, {'kappa1': kappa1, 'a': a, 'outcomes': len(probs)})
    log_debug(f"lemma_3_1_check: holds={report.holds} kappa1={kappa1}")
    return report


def default_eta(values: np.ndarray, system: NeighborhoodSystem) -> np.ndarray:
    """η_i = Y_i, a function of X_{A_i}."""
    return neighborhood_sums(values, system.membership("A"))


def lemma_3_2_check(
    model: FieldModel,
    system: Optional[NeighborhoodSystem] = None,
    xi: Optional[PerIndexMap] = None,
    eta: Optional[BlockMap] = None,
    a: Optional[float] = None,
    center: bool = True,
) -> CheckReport:
    """Exact check of the mixed fourth moment bound E(T²S²) for T = Σξ_i, S = Ση_i."""
    system = system or model.system
    system.require(Level.LD4STAR, "lemma_3_2_check")
    law = enumerate_field(model)
    probs = law.probs
    e = law.expect

    xi_vals = _centred(xi(law.values) if xi else law.values.copy(), probs, center)
    eta_vals = _centred((eta or default_eta)(law.values, system), probs, center)
    t = xi_vals.sum(axis=1)
    s = eta_vals.sum(axis=1)
    lhs = float(e(t * t * s * s))
    base = 3 * float(e(t * t)) * float(e(s * s))

    kappa2 = kappa_stats(system).get("kappa2")
    a = float(kappa2 if a is None else a)
    if a <= 0:
        raise RangeError(f"a must be positive, got {a}")
    sums = {
        name: neighborhood_sums(vals, system.membership(fam))
        for name, vals, fam in (
            ('xi_C', xi_vals, "Cstar"), ('xi_D', xi_vals, "Dstar"),
            ('eta_B', eta_vals, "Bstar"), ('eta_C', eta_vals, "Cstar"), ('eta_D', eta_vals, "Dstar"),
        )
    }
    spread = sum(e(v ** 4) for v in sums.values())
    bound_326 = base + 4 * float((a ** 3 * e(xi_vals ** 4) + spread / a).sum())
    bound_327 = base + 12 * kappa2 ** 3 * float((e(xi_vals ** 4) + e(eta_vals ** 4)).sum())

    rows = [
        CheckRow("3.26", lhs, bound_326, "<="),
        CheckRow("3.27", lhs, bound_327, "<="),
    ]
    report = CheckReport("lemma_3_2", rows, {'kappa2': kappa2, 'a': a, 'outcomes': len(probs)})
    log_debug(f"lemma_3_2_check: holds={report.holds} kappa2={kappa2}")
    return report


# =============================================================================
# CONCENTRATION INEQUALITY
# =============================================================================

@dataclass(frozen=True)
class IntervalCheck:
    a: float
    b: float
    probability: float
    probability_se: float
    rhs: float
    rhs_se: float

    @property
    def holds(self) -> bool:
        return self.probability - 3 * self.probability_se <= self.rhs + 3 * self.rhs_se

    def to_dict(self) -> Dict[str, Any]:
        return {
            'a': self.a, 'b': self.b,
            'probability': self.probability, 'probability_se': self.probability_se,
            'rhs': self.rhs, 'rhs_se': self.rhs_se, 'holds': self.holds,
        }


@dataclass
class ConcentrationReport:
    intervals: List[IntervalCheck]
    r_terms: RTerms

    @property
    def holds(self) -> bool:
        return all(check.holds for check in self.intervals)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'check': 'proposition_3_1',
            'holds': self.holds,
            'intervals': [c.to_dict() for c in self.intervals],
            'r_terms': self.r_terms.to_dict(),
        }


def proposition_3_1_check(
    model: FieldModel,
    system: Optional[NeighborhoodSystem] = None,
    intervals: Sequence[Tuple[float, float]] = (),
    replicates: Optional[int] = None,
    seed: int = 0,
    r_terms: Optional[RTerms] = None,
) -> ConcentrationReport:
    """P(a ≤ W ≤ b) against 0.625(b − a) + 4r2 + 2.125r3 + 4r5 for each interval."""
    system = system or model.system
    for a, b in intervals:
        if a > b:
            raise RangeError(f"interval ({a}, {b}) has a > b")
    r_terms = r_terms or estimate_r_terms(model, system, replicates, seed, terms=("r2", "r3", "r5"))
    slack = linear_combination({'r2': 4.0, 'r3': 2.125, 'r5': 4.0},
                               {k: r_terms.get(k) for k in ('r2', 'r3', 'r5')})

    if model.can_enumerate:
        law = enumerate_field(model)
        w = law.values.sum(axis=1)
        weights = law.probs
        count = None
    else:
        count = _require_replicates(replicates)
        w = sample_w(model, seed, STREAM_CONCENTRATION, count)
        weights = None

    checks = []
    for a, b in intervals:
        inside = (w >= a - 1e-12) & (w <= b + 1e-12)
        if weights is not None:
            prob, prob_se = float(weights @ inside), 0.0
        else:
            prob = float(inside.mean())
            prob_se = math.sqrt(prob * (1 - prob) / count)
        checks.append(IntervalCheck(
            a=float(a), b=float(b),
            probability=prob, probability_se=prob_se,
            rhs=0.625 * (b - a) + slack.value, rhs_se=slack.se,
        ))
    return ConcentrationReport(intervals=checks, r_terms=r_terms)
