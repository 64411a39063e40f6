"""
Point estimates with standard errors, shared by every estimator.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional

import numpy as np


class Method(Enum):
    EXACT = "exact-enumeration"
    MONTE_CARLO = "monte-carlo"


@dataclass(frozen=True)
class Estimate:
    """A value with its standard error, replicate count and method tag."""
    value: float
    se: float = 0.0
    replicates: int = 0
    method: Method = Method.EXACT

    @classmethod
    def exact(cls, value: float) -> "Estimate":
        return cls(value=float(value), se=0.0, replicates=0, method=Method.EXACT)

    @classmethod
    def from_sums(cls, total: float, total_sq: float, count: int) -> "Estimate":
        """Sample mean and its standard error from running sums."""
        mean = total / count
        if count < 2:
            return cls(value=float(mean), se=0.0, replicates=count, method=Method.MONTE_CARLO)
        var = max(total_sq / count - mean * mean, 0.0) * count / (count - 1)
        return cls(
            value=float(mean),
            se=float(math.sqrt(var / count)),
            replicates=count,
            method=Method.MONTE_CARLO,
        )

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "Estimate":
        samples = np.asarray(samples, dtype=np.float64)
        return cls.from_sums(float(samples.sum()), float(np.dot(samples, samples)), len(samples))

    @property
    def is_exact(self) -> bool:
        return self.method is Method.EXACT

    def scaled(self, factor: float) -> "Estimate":
        return Estimate(self.value * factor, abs(factor) * self.se, self.replicates, self.method)

    def sqrt(self) -> "Estimate":
        """√value with a delta-method SE; negative values clip to 0."""
        root = math.sqrt(max(self.value, 0.0))
        if root > 0:
            se = self.se / (2.0 * root)
        else:
            # the delta method breaks down at 0; √se is a heuristic upper scale, not a derivative
            se = math.sqrt(self.se)
        return Estimate(root, se, self.replicates, self.method)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'value': self.value,
            'se': self.se,
            'replicates': self.replicates,
            'method': self.method.value,
        }


def linear_combination(weights: Dict[str, float], estimates: Dict[str, Estimate], offset: float = 0.0) -> Estimate:
    """
    Σ c_k · e_k with first-order SE Σ |c_k| · se_k.

    The terms usually share replicates, so their errors are not treated as
    independent.
    """
    value = offset
    se = 0.0
    exact = True
    replicates: Optional[int] = None
    for name, weight in weights.items():
        term = estimates[name]
        value += weight * term.value
        se += abs(weight) * term.se
        exact = exact and term.is_exact
        replicates = term.replicates if replicates is None else max(replicates, term.replicates)
    return Estimate(
        value=float(value),
        se=float(se),
        replicates=replicates or 0,
        method=Method.EXACT if exact else Method.MONTE_CARLO,
    )
