"""Confidence-score distributions with analytically known exceedance.

The stochastic mock backend and the accuracy simulator both draw
confidence values from these distributions. ``tail_prob(c)`` returns
P(X > c) in closed form, which is what makes the gate's true/false
positive rates known exactly instead of estimated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import beta as _beta

__all__ = [
    "ConfidenceDistribution",
    "split_uniform",
    "beta_dist",
    "point_mass",
    "distribution_from_config",
]


@dataclass(frozen=True)
class ConfidenceDistribution:
    """A named distribution over (0, 1].

    kinds:
      split_uniform(threshold, p_above) -- with probability p_above draw
          uniformly from (threshold, 1], otherwise from (0, threshold];
          P(X > threshold) equals p_above exactly.
      beta(a, b) -- standard Beta; tail via the regularized incomplete
          beta survival function.
      point(v) -- degenerate mass at v.
    """

    kind: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.kind == "split_uniform":
            t, p = self.params
            if not 0.0 < t < 1.0:
                raise ValueError(f"split_uniform threshold must be in (0, 1), got {t}")
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"split_uniform p_above must be in [0, 1], got {p}")
        elif self.kind == "beta":
            a, b = self.params
            if a <= 0 or b <= 0:
                raise ValueError("beta parameters must be positive")
        elif self.kind == "point":
            (v,) = self.params
            if not 0.0 < v <= 1.0:
                raise ValueError(f"point mass must lie in (0, 1], got {v}")
        else:
            raise ValueError(f"unknown distribution kind '{self.kind}'")

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray | float:
        """Draw from the distribution; values always lie in (0, 1]."""
        if self.kind == "split_uniform":
            t, p = self.params
            n = 1 if size is None else size
            above = rng.random(n) < p
            # 1 - U[0, 1-t) lands in (t, 1]; t - U[0, t) lands in (0, t]
            hi = 1.0 - rng.uniform(0.0, 1.0 - t, size=n)
            lo = t - rng.uniform(0.0, t, size=n)
            out = np.where(above, hi, lo)
        elif self.kind == "beta":
            a, b = self.params
            n = 1 if size is None else size
            out = rng.beta(a, b, size=n)
            # Beta can underflow to exactly 0; nudge into the open interval.
            out = np.maximum(out, np.finfo(np.float64).tiny)
        else:
            (v,) = self.params
            n = 1 if size is None else size
            out = np.full(n, v)
        return float(out[0]) if size is None else out

    def tail_prob(self, c: float) -> float:
        """P(X > c), exact."""
        if self.kind == "split_uniform":
            t, p = self.params
            if c >= 1.0:
                return 0.0
            if c >= t:
                return p * (1.0 - c) / (1.0 - t)
            if c >= 0.0:
                return p + (1.0 - p) * (t - c) / t
            return 1.0
        if self.kind == "beta":
            a, b = self.params
            return float(_beta.sf(c, a, b))
        (v,) = self.params
        return 1.0 if v > c else 0.0


def split_uniform(threshold: float, p_above: float) -> ConfidenceDistribution:
    return ConfidenceDistribution("split_uniform", (float(threshold), float(p_above)))


def beta_dist(a: float, b: float) -> ConfidenceDistribution:
    return ConfidenceDistribution("beta", (float(a), float(b)))


def point_mass(value: float) -> ConfidenceDistribution:
    return ConfidenceDistribution("point", (float(value),))


def distribution_from_config(spec: dict) -> ConfidenceDistribution:
    """Build a distribution from ``{"kind": ..., "params": [...]}``."""
    try:
        return ConfidenceDistribution(str(spec["kind"]), tuple(float(x) for x in spec["params"]))
    except KeyError as exc:
        raise ValueError(f"distribution config missing key {exc}") from None
