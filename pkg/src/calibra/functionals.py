"""Exact property values of finite-support label distributions."""
from __future__ import annotations

import numpy as np

from .properties import FiniteDistribution

# Cumulative sums of float masses undershoot exact CDF levels (0.1 * 5 != 0.5);
# CDF comparisons absorb that much roundoff.
CDF_TOL = 1e-12


def mean(dist: FiniteDistribution) -> float:
    return dist.mean()


def variance(dist: FiniteDistribution) -> float:
    mu = dist.mean()
    d = dist.support - mu
    return float(np.dot(dist.probs, d * d))


def quantile(dist: FiniteDistribution, tau: float) -> float:
    """Lower quantile inf{y : F(y) >= tau}; tau = 0 gives the support minimum."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    cdf = np.cumsum(dist.probs)
    idx = int(np.searchsorted(cdf, tau - CDF_TOL, side="left"))
    return float(dist.support[min(idx, dist.support.size - 1)])


def upper_quantile(dist: FiniteDistribution, tau: float) -> float:
    """inf{y : F(y) > tau}."""
    cdf = np.cumsum(dist.probs)
    above = np.flatnonzero(cdf > tau + CDF_TOL)
    if above.size == 0:
        return float(dist.support[-1])
    return float(dist.support[above[0]])


def cvar(dist: FiniteDistribution, tau: float) -> float:
    """CVaR through the Bayes-risk identity q + E[(y - q)_+] / (1 - tau)."""
    if not 0.0 <= tau < 1.0:
        raise ValueError("tau must lie in [0, 1)")
    q = quantile(dist, tau)
    tail = float(np.dot(dist.probs, np.maximum(dist.support - q, 0.0)))
    return q + tail / (1.0 - tau)


def quantile_variant_1(dist: FiniteDistribution, tau: float, c: float) -> float:
    """c * inf{F >= tau} + (1 - c) * inf{F > tau}."""
    return c * quantile(dist, tau) + (1.0 - c) * upper_quantile(dist, tau)


def quantile_variant_2(dist: FiniteDistribution, c: float) -> float:
    """c * (support minimum) + (1 - c) * (support maximum)."""
    return c * float(dist.support[0]) + (1.0 - c) * float(dist.support[-1])
