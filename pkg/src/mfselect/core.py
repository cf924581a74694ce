"""Factor distributions, special functions and ELBO/KL primitives.

Every factor type accepts scalar or array parameters. An array-valued factor
is a batch of independent factors of the same family (for example the ``n``
assignment distributions of a mixture model share one ``CategoricalFactor``
whose ``probabilities`` has shape ``(n, K)``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy import special

LOG_2PI = math.log(2.0 * math.pi)
PROB_FLOOR = 1e-300
MILLS_SWITCH = 35.0

_EULER = 0.57721566490153286061


class UsageError(ValueError):
    """Raised for invalid arguments to library operations."""


class NumericError(ArithmeticError):
    """Raised when an update or estimate produces invalid numbers."""


# ---------------------------------------------------------------------------
# special functions
# ---------------------------------------------------------------------------

def log_sum_exp(values) -> float:
    """Stable ``log(sum(exp(values)))`` for a non-empty vector."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise UsageError("log_sum_exp of an empty vector")
    m = v.max()
    if not np.isfinite(m):
        # all -inf, or a +inf/nan present
        return float(m) if m != -np.inf else -np.inf
    return float(m + np.log(np.sum(np.exp(v - m))))


def log_sum_exp_rows(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Row-wise log-sum-exp, keeping the reduced axis out."""
    v = np.asarray(values, dtype=float)
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(v - m), axis=axis))


def normalize_log_probs(logits: np.ndarray) -> np.ndarray:
    """Turn unnormalized log-probabilities (last axis) into probabilities."""
    logits = np.asarray(logits, dtype=float)
    return np.exp(logits - log_sum_exp_rows(logits)[..., None])


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x - 0.5 * LOG_2PI)


def norm_cdf(x):
    return special.ndtr(x)


def norm_logcdf(x):
    """``log Phi(x)``, accurate far into the lower tail."""
    return special.log_ndtr(x)


def _inverse_mills_lower(x):
    """``phi(x)/Phi(x)`` for ``x < -MILLS_SWITCH`` via the asymptotic series."""
    y = -np.asarray(x, dtype=float)
    y2 = 1.0 / (y * y)
    # Phi(-y)/phi(y) ~ (1/y) sum_k (-1)^k (2k-1)!! / y^{2k}; ten terms reach
    # machine precision for y > 35
    series = np.ones_like(y)
    term = np.ones_like(y)
    for k in range(1, 10):
        term = -term * (2 * k - 1) * y2
        series = series + term
    return y / series


def inverse_mills(x):
    """``phi(x)/Phi(x)`` for any finite ``x``."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    far = x < -MILLS_SWITCH
    near = ~far
    out[far] = _inverse_mills_lower(x[far])
    # Phi(x) = erfcx(-x/sqrt2) phi(x) sqrt(pi/2), which avoids exponentiating a large log ratio
    out[near] = math.sqrt(2.0 / math.pi) / special.erfcx(-x[near] / math.sqrt(2.0))
    return out


def truncated_normal_mean(location, side="positive"):
    """Mean of ``N(location, 1)`` truncated to one side of zero.

    ``side`` is ``"positive"``/``"negative"`` or a boolean array where
    ``True`` means positive. Vectorised over ``location``.
    """
    loc = np.asarray(location, dtype=float)
    if not np.all(np.isfinite(loc)):
        raise UsageError("truncated_normal_mean needs finite locations")
    if isinstance(side, str):
        if side not in ("positive", "negative"):
            raise UsageError(f"unknown side {side!r}")
        positive = np.full(loc.shape, side == "positive")
    else:
        positive = np.broadcast_to(np.asarray(side, dtype=bool), loc.shape)
    sign = np.where(positive, 1.0, -1.0)
    # negative side: l + phi(l)/(Phi(l) - 1) = -( -l + phi(-l)/Phi(-l) )
    s = sign * loc
    res = sign * (s + inverse_mills(np.atleast_1d(s)).reshape(s.shape))
    return res if res.ndim else float(res)


def digamma(x):
    """Digamma function for ``x > 0``.

    Recurrence up to ``x >= 6`` followed by the asymptotic expansion.
    """
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise UsageError("digamma is only defined here for x > 0")
    x = x.copy()
    acc = np.zeros_like(x)
    small = x < 6.0
    while np.any(small):
        acc[small] -= 1.0 / x[small]
        x[small] += 1.0
        small = x < 6.0
    inv = 1.0 / x
    inv2 = inv * inv
    # B_2k / (2k) coefficients
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (
        1.0 / 240 - inv2 * (1.0 / 132 - inv2 * (691.0 / 32760 - inv2 / 12.0))))))
    res = acc + np.log(x) - 0.5 * inv - series
    return res if res.ndim else float(res)


# ---------------------------------------------------------------------------
# factor types
# ---------------------------------------------------------------------------

def _as_array(x) -> np.ndarray:
    a = np.array(x, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GaussianFactor:
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _as_array(self.mean))
        object.__setattr__(self, "variance", _as_array(self.variance))
        if np.any(~(self.variance > 0)):
            raise NumericError("GaussianFactor variance must be positive")

    def entropy(self):
        return 0.5 * (LOG_2PI + 1.0 + np.log(self.variance))

    def second_moment(self):
        return self.mean ** 2 + self.variance

    def natural(self):
        return self.mean / self.variance, -0.5 / self.variance

    @classmethod
    def from_natural(cls, eta1, eta2):
        var = -0.5 / np.asarray(eta2, dtype=float)
        return cls(eta1 * var, var)


@dataclass(frozen=True)
class MultivariateGaussianFactor:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = _as_array(self.mean)
        cov = _as_array(self.covariance)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise UsageError("covariance must be d x d for a length-d mean")
        if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
            raise UsageError("covariance must be symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise UsageError("covariance must be positive definite") from exc
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def entropy(self) -> float:
        _, logdet = np.linalg.slogdet(self.covariance)
        return 0.5 * (self.dim * (LOG_2PI + 1.0) + logdet)

    def precision(self) -> np.ndarray:
        return np.linalg.inv(self.covariance)


@dataclass(frozen=True)
class InverseGammaFactor:
    shape: np.ndarray
    rate: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shape", _as_array(self.shape))
        object.__setattr__(self, "rate", _as_array(self.rate))
        if np.any(~(self.shape > 0)) or np.any(~(self.rate > 0)):
            raise NumericError("InverseGammaFactor needs shape > 0 and rate > 0")

    def mean(self):
        """E[x]; infinite when shape <= 1."""
        a, b = self.shape, self.rate
        return np.where(a > 1, b / np.maximum(a - 1, 1e-300), np.inf)

    def variance(self):
        """Var[x]; infinite when shape <= 2."""
        a, b = self.shape, self.rate
        a1, a2 = np.maximum(a - 1, 1.0), np.maximum(a - 2, 1e-300)
        return np.where(a > 2, b ** 2 / (a1 * a1 * a2), np.inf)

    def mean_inverse(self):
        """E[1/x]."""
        return self.shape / self.rate

    def mean_log(self):
        """E[log x]."""
        return np.log(self.rate) - digamma(self.shape)

    def entropy(self):
        a, b = self.shape, self.rate
        return a + np.log(b) + special.gammaln(a) - (1.0 + a) * digamma(a)


@dataclass(frozen=True)
class CategoricalFactor:
    probabilities: np.ndarray

    def __post_init__(self):
        p = _as_array(self.probabilities)
        if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-12):
            raise NumericError("categorical probabilities must be >= 0 and sum to 1")
        object.__setattr__(self, "probabilities", p)

    @classmethod
    def from_logits(cls, logits):
        return cls(normalize_log_probs(logits))

    def log_probabilities(self):
        return np.log(np.maximum(self.probabilities, PROB_FLOOR))

    def entropy(self):
        p = self.probabilities
        return -np.sum(np.where(p > 0, p * self.log_probabilities(), 0.0), axis=-1)


@dataclass(frozen=True)
class BetaFactor:
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", _as_array(self.alpha))
        object.__setattr__(self, "beta", _as_array(self.beta))
        if np.any(~(self.alpha > 0)) or np.any(~(self.beta > 0)):
            raise NumericError("BetaFactor needs alpha > 0 and beta > 0")

    def mean(self):
        return self.alpha / (self.alpha + self.beta)

    def variance(self):
        s = self.alpha + self.beta
        return self.alpha * self.beta / (s ** 2 * (s + 1))

    def mean_log(self):
        return digamma(self.alpha) - digamma(self.alpha + self.beta)

    def mean_log1m(self):
        return digamma(self.beta) - digamma(self.alpha + self.beta)

    def entropy(self):
        a, b = self.alpha, self.beta
        return (special.betaln(a, b) - (a - 1) * digamma(a) - (b - 1) * digamma(b)
                + (a + b - 2) * digamma(a + b))


@dataclass(frozen=True)
class TruncatedGaussianFactor:
    """Unit-scale normal truncated to one side of zero (batchable)."""

    location: np.ndarray
    positive: np.ndarray
    scale: float = field(default=1.0)

    def __post_init__(self):
        loc = _as_array(self.location)
        pos = np.array(np.broadcast_to(np.asarray(self.positive, dtype=bool), loc.shape))
        pos.setflags(write=False)
        if self.scale != 1.0:
            raise UsageError("only unit-scale truncated normals are supported")
        object.__setattr__(self, "location", loc)
        object.__setattr__(self, "positive", pos)

    def mean(self):
        return truncated_normal_mean(self.location, self.positive)

    def log_normalizer(self):
        """``log Phi(+-location)``, the log mass kept by the truncation."""
        sign = np.where(self.positive, 1.0, -1.0)
        return norm_logcdf(sign * self.location)


@dataclass(frozen=True)
class MeanFieldState:
    """Product of factors over parameter blocks and latent variables."""

    parameter_factors: Tuple = ()
    latent_factors: Tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "parameter_factors", tuple(self.parameter_factors))
        object.__setattr__(self, "latent_factors", tuple(self.latent_factors))

    def replace_parameter(self, index: int, factor) -> "MeanFieldState":
        factors = list(self.parameter_factors)
        factors[index] = factor
        return MeanFieldState(factors, self.latent_factors)

    def replace_latent(self, index: int, factor) -> "MeanFieldState":
        factors = list(self.latent_factors)
        factors[index] = factor
        return MeanFieldState(self.parameter_factors, factors)


# ---------------------------------------------------------------------------
# KL divergences
# ---------------------------------------------------------------------------

def kl_gaussian(q: MultivariateGaussianFactor, p: MultivariateGaussianFactor) -> float:
    """KL(q || p) between two multivariate normals."""
    if q.dim != p.dim:
        raise UsageError("dimension mismatch in kl_gaussian")
    lp = np.linalg.cholesky(p.covariance)
    lq = np.linalg.cholesky(q.covariance)
    solved = np.linalg.solve(lp, lq)
    trace = float(np.sum(solved ** 2))
    diff = np.linalg.solve(lp, p.mean - q.mean)
    maha = float(diff @ diff)
    logdet_ratio = 2.0 * (np.sum(np.log(np.diag(lp))) - np.sum(np.log(np.diag(lq))))
    return 0.5 * (trace + maha - q.dim + logdet_ratio)


def kl_beta(a, b, a0, b0):
    """KL(Beta(a, b) || Beta(a0, b0)), elementwise."""
    return (special.betaln(a0, b0) - special.betaln(a, b)
            + (a - a0) * digamma(a) + (b - b0) * digamma(b)
            - (a + b - a0 - b0) * digamma(a + b))
