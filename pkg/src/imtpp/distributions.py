"""Log-normal, interval-truncated log-normal and categorical distributions.

Every function accepts plain floats, numpy arrays or :class:`~imtpp.diffgraph.Tensor`
arguments and returns a Tensor, so the same code serves the training graph and
scalar checks. Randomness always comes from a caller-supplied generator or an
explicit noise draw.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import special

from . import diffgraph as dg

log = logging.getLogger(__name__)

SIGMA_MIN = 1e-3
SIGMA_MAX = 1e3
MASS_FLOOR = 1e-12     # below this the truncated interval counts as exhausted
PROB_FLOOR = 1e-10     # floor inside the logs of the categorical KL
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_U_MIN = 1e-16
_U_MAX = 1.0 - 2.0 ** -53


class IntervalExhausted(ArithmeticError):
    """The truncated density has (numerically) no mass left below its upper bound."""


@dataclass(frozen=True)
class LogNormalParams:
    mu: Any
    sigma: Any

    def __post_init__(self):
        sig = self.sigma.value if isinstance(self.sigma, dg.Tensor) else np.asarray(self.sigma)
        if np.any(sig <= 0):
            raise ValueError("log-normal sigma must be positive")


@dataclass(frozen=True)
class TruncatedLogNormalParams:
    base: LogNormalParams
    upper: Any

    def __post_init__(self):
        up = self.upper.value if isinstance(self.upper, dg.Tensor) else np.asarray(self.upper)
        if np.any(up <= 0):
            raise ValueError("truncation bound must be positive")


@dataclass(frozen=True)
class MarkDistribution:
    """Categorical distribution over the mark vocabulary, held as logits."""

    logits: Any

    @property
    def log_probs(self) -> dg.Tensor:
        return dg.log_softmax(self.logits, axis=-1)

    @property
    def probs(self) -> np.ndarray:
        return dg.softmax(self.logits, axis=-1).value

    @classmethod
    def from_probs(cls, probs) -> "MarkDistribution":
        probs = np.asarray(probs, dtype=np.float64)
        if np.any(probs < 0) or not np.allclose(probs.sum(axis=-1), 1.0, atol=1e-9):
            raise ValueError("probabilities must be nonnegative and sum to one")
        with np.errstate(divide="ignore"):
            return cls(np.log(probs))


def sigma_from_raw(raw) -> dg.Tensor:
    """Positive scale from an unconstrained network output: exp, clamped to [1e-3, 1e3]."""
    return dg.exp(dg.clip(raw, math.log(SIGMA_MIN), math.log(SIGMA_MAX)))


# -- log-normal -------------------------------------------------------------------

def lognormal_logpdf(x, p: LogNormalParams) -> dg.Tensor:
    logx = dg.log(x)
    zs = dg.div(dg.sub(logx, p.mu), p.sigma)
    out = dg.sub(dg.neg(logx), dg.log(p.sigma))
    return dg.sub(dg.sub(out, _LOG_SQRT_2PI), dg.scale(dg.square(zs), 0.5))


def lognormal_sample_reparam(p: LogNormalParams, z) -> dg.Tensor:
    """exp(mu + sigma * z) for a standard normal draw ``z``."""
    return dg.exp(dg.add(p.mu, dg.mul(p.sigma, z)))


def lognormal_mean(p: LogNormalParams) -> dg.Tensor:
    return dg.exp(dg.add(p.mu, dg.scale(dg.square(p.sigma), 0.5)))


def lognormal_median(p: LogNormalParams) -> dg.Tensor:
    return dg.exp(p.mu)


def lognormal_cdf(x, mu, sigma) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(x > 0, special.ndtr((np.log(np.maximum(x, 1e-300)) - mu) / sigma), 0.0)


def lognormal_kl_closed(q: LogNormalParams, p: LogNormalParams) -> dg.Tensor:
    """KL(q || p) between two (untruncated) log-normals."""
    ratio = dg.log(dg.div(p.sigma, q.sigma))
    num = dg.add(dg.square(q.sigma), dg.square(dg.sub(q.mu, p.mu)))
    return dg.sub(dg.add(ratio, dg.div(num, dg.scale(dg.square(p.sigma), 2.0))), 0.5)


# -- truncated log-normal -----------------------------------------------------------

def _standardized_bound(p: TruncatedLogNormalParams) -> dg.Tensor:
    return dg.div(dg.sub(dg.log(p.upper), p.base.mu), p.base.sigma)


def truncated_log_mass(p: TruncatedLogNormalParams) -> dg.Tensor:
    """log P(X < upper) for the untruncated base distribution."""
    return dg.log_ndtr(_standardized_bound(p))


def truncated_lognormal_sample(p: TruncatedLogNormalParams, u, strict: bool = True) -> dg.Tensor:
    """Inverse-CDF draw on (0, upper) from a uniform ``u``; reparameterized in mu and sigma.

    With ``strict`` an exhausted interval raises :class:`IntervalExhausted`; batch
    callers pass ``strict=False`` and mask those rows themselves.
    """
    a = _standardized_bound(p)
    mass = dg.ndtr(a)
    if strict and np.any(mass.value < MASS_FLOOR):
        raise IntervalExhausted("no probability mass left inside the interval")
    u = np.clip(np.asarray(u, dtype=np.float64), _U_MIN, _U_MAX)
    z = dg.ndtri(dg.mul(dg.maximum(mass, 1e-300), u))
    x = dg.exp(dg.add(p.base.mu, dg.mul(p.base.sigma, z)))
    upper = p.upper.value if isinstance(p.upper, dg.Tensor) else np.asarray(p.upper, dtype=np.float64)
    over = x.value >= upper
    if np.any(over):
        # rounding at u -> 1 can land on the bound itself; pull back one ulp
        x = dg.where(over, np.nextafter(upper, 0.0), x)
    assert np.all(x.value < upper), "truncated draw escaped its interval"
    return x


def truncated_lognormal_logpdf(x, p: TruncatedLogNormalParams) -> dg.Tensor:
    """Normalized density on (0, upper); points outside get -inf (not differentiable)."""
    xv = x.value if isinstance(x, dg.Tensor) else np.asarray(x, dtype=np.float64)
    up = p.upper.value if isinstance(p.upper, dg.Tensor) else np.asarray(p.upper, dtype=np.float64)
    outside = (xv <= 0) | (xv >= up)
    if np.any(outside):
        log.debug("truncated log-normal density evaluated outside its support")
        if np.all(outside):
            return dg.Tensor(np.full(np.broadcast(xv, up).shape, -np.inf))
        safe = np.where(outside, 0.5 * up, xv)
        inner = dg.sub(lognormal_logpdf(safe, p.base), truncated_log_mass(p))
        return dg.Tensor(np.where(outside, -np.inf, inner.value))
    return dg.sub(lognormal_logpdf(x, p.base), truncated_log_mass(p))


def truncated_lognormal_cdf(x, mu: float, sigma: float, upper: float) -> np.ndarray:
    """Analytic CDF of the truncated law, for goodness-of-fit checks."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, upper)
    return lognormal_cdf(x, mu, sigma) / special.ndtr((math.log(upper) - mu) / sigma)


# -- categorical ---------------------------------------------------------------------

def categorical_logpmf(dist: MarkDistribution, idx) -> dg.Tensor:
    lp = dist.log_probs
    idx = np.asarray(idx, dtype=np.intp)
    if lp.ndim == 1:
        return dg.take(lp, int(idx))
    return dg.pick(lp, idx)


def categorical_sample(dist: MarkDistribution, gen: np.random.Generator | None = None,
                       u=None):
    """Inverse-CDF draw per row; ``u`` supplies the uniforms when noise is pre-drawn."""
    probs = np.atleast_2d(dist.probs)
    if u is None:
        u = gen.random(probs.shape[0])
    u = np.asarray(u, dtype=np.float64).reshape(-1, 1)
    cdf = np.cumsum(probs, axis=-1)
    idx = (u >= cdf[:, :-1]).sum(axis=-1) if probs.shape[1] > 1 else np.zeros(len(u), dtype=np.intp)
    idx = np.asarray(idx, dtype=np.intp)
    return idx if np.ndim(dist.probs) > 1 else int(idx[0])


def categorical_kl(q: MarkDistribution, p: MarkDistribution) -> dg.Tensor:
    """KL(q || p) = sum_i q_i (log q_i - log p_i), floored at 1e-10 inside the logs."""
    lq = dg.maximum(q.log_probs, math.log(PROB_FLOOR))
    lp = dg.maximum(p.log_probs, math.log(PROB_FLOOR))
    qp = dg.softmax(q.logits, axis=-1)
    pv = np.exp(lp.value)
    if np.any((qp.value > 0) & (pv <= PROB_FLOOR)):
        log.warning("categorical KL: prior assigns ~zero mass where the posterior does not; floored")
    return dg.sum(dg.mul(qp, dg.sub(lq, lp)), axis=-1)
