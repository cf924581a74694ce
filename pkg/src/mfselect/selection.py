"""Model-selection criteria, gap constants and CAVI contraction rates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, optimize

from .core import LOG_2PI, NumericError, UsageError
from .engine import PARALLEL, SCHEDULE_KINDS
from .models.base import FisherBundle

MAXIMIZE = ("elbo", "penalized_elbo", "evidence")
MINIMIZE = ("bic", "aic", "extended_bic")


@dataclass(frozen=True)
class CriterionValue:
    model_id: object
    elbo: Optional[float]
    bic: Optional[float]
    aic: Optional[float]
    d_M: int
    n: int
    penalized_elbo: Optional[float] = None
    extended_bic: Optional[float] = None
    mc_evidence: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.d_M < 1:
            raise UsageError("d_M must be >= 1")
        if self.n < 0:
            raise UsageError("n must be >= 0")

    def value(self, criterion: str) -> Optional[float]:
        if criterion == "evidence":
            return None if self.mc_evidence is None else self.mc_evidence[0]
        if criterion not in MAXIMIZE + MINIMIZE:
            raise UsageError(f"unknown criterion {criterion!r}")
        return getattr(self, criterion)


def bic(loglik_max: float, d_M: int, n: int) -> float:
    """``-2 l + d log n``."""
    if n < 1:
        raise UsageError("BIC needs n >= 1")
    return -2.0 * loglik_max + d_M * math.log(n)


def aic(loglik_max: float, d_M: int) -> float:
    """``-2 l + 2 d``."""
    return -2.0 * loglik_max + 2.0 * d_M


def penalized_criteria(elbo: float, bic_value: float, log_model_prior: float):
    """``(ELBO + log pi(M), BIC - 2 log pi(M))``."""
    return elbo + log_model_prior, bic_value - 2.0 * log_model_prior


def elbo_factor(elbo0: float, elbo1: float) -> float:
    """ELBO difference, the surrogate for the log Bayes factor of model 0 over 1."""
    return elbo0 - elbo1


def select(values: Sequence[CriterionValue], criterion: str):
    """Best ``model_id`` under ``criterion``.

    ELBO-type criteria and the evidence are maximized, BIC-type criteria
    minimized. Exact ties go to the smaller ``d_M`` and then the smaller
    ``model_id``.
    """
    if not values:
        raise UsageError("select needs at least one candidate")
    scored = []
    for v in values:
        x = v.value(criterion)
        if x is None:
            raise UsageError(f"criterion {criterion!r} missing for model {v.model_id!r}")
        scored.append((-x if criterion in MAXIMIZE else x, v.d_M, v.model_id))
    return min(scored, key=lambda t: (t[0], t[1], t[2]))[2]


# ---------------------------------------------------------------------------
# gap constants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GapConstants:
    c_star: float
    c_bic_star: float
    c_tilde_star: float
    c_block_star: Optional[float] = None
    c_nolatent_star: Optional[float] = None
    #: ``C_b* - C*_BIC``, the block-family analogue of ``c_tilde_star``
    c_tilde_block_star: Optional[float] = None


def _logdet(m: np.ndarray) -> float:
    try:
        L = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NumericError("matrix is not positive definite") from exc
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def block_diagonal(m: np.ndarray, block_sizes: Sequence[int]) -> np.ndarray:
    """Copy of ``m`` with entries outside the diagonal blocks set to zero."""
    m = np.asarray(m, dtype=float)
    if sum(block_sizes) != m.shape[0] or any(b < 1 for b in block_sizes):
        raise UsageError("block sizes must be positive and sum to the dimension")
    out = np.zeros_like(m)
    start = 0
    for b in block_sizes:
        out[start:start + b, start:start + b] = m[start:start + b, start:start + b]
        start += b
    return out


def gap_constants(bundle: FisherBundle, block_sizes: Optional[Sequence[int]] = None) -> GapConstants:
    """Limiting gaps between evidence, ELBO and ``-BIC/2``."""
    V, V_c = bundle.V, bundle.V_c
    d = bundle.dim
    logdet_v = _logdet(V)
    diag_c = np.diag(V_c)
    if np.any(diag_c <= 0):
        raise NumericError("diagonal of V_c must be positive")
    c_star = 0.5 * (float(np.sum(np.log(diag_c))) - logdet_v)
    c_bic = -0.5 * logdet_v + 0.5 * d * LOG_2PI + bundle.prior_log_density_at_theta_star
    c_block = c_tilde_block = None
    if block_sizes is not None:
        c_block = 0.5 * (_logdet(block_diagonal(V_c, block_sizes)) - logdet_v)
        c_tilde_block = c_block - c_bic
    c_n = None
    if not np.any(bundle.V_s):
        c_n = 0.5 * (float(np.sum(np.log(np.diag(V)))) - logdet_v)
    return GapConstants(c_star, c_bic, c_star - c_bic, c_block, c_n, c_tilde_block)


def c_tilde_direct(bundle: FisherBundle) -> float:
    """``(1/2) log det diag(V_c) - (d/2) log 2 pi - log pi(theta*)``."""
    return (0.5 * float(np.sum(np.log(np.diag(bundle.V_c)))) - 0.5 * bundle.dim * LOG_2PI
            - bundle.prior_log_density_at_theta_star)


# ---------------------------------------------------------------------------
# contraction rates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContractionReport:
    scheme: str
    gamma: float
    alpha: float
    rayleigh_min: float
    rayleigh_max: float
    latent: bool


def rayleigh_extremes(M: np.ndarray, V: np.ndarray) -> Tuple[float, float]:
    """Extremes of ``b'Mb / b'Vb`` via the eigenvalues of ``L^{-1} M L^{-T}``."""
    L = np.linalg.cholesky(V)
    Ms = 0.5 * (M + M.T)
    W = linalg.solve_triangular(L, Ms, lower=True)
    W = linalg.solve_triangular(L, W.T, lower=True)
    ev = np.linalg.eigvalsh(0.5 * (W + W.T))
    return float(ev[0]), float(ev[-1])


def contraction_rates(bundle, gamma: float, scheme: str, latent: bool = False,
                      d: Optional[int] = None) -> ContractionReport:
    """Geometric rate ``alpha`` of the expected ELBO regret.

    ``bundle`` may be a :class:`FisherBundle` or a bare information matrix
    ``V`` (then ``V_s = 0``). Sequential schemes use the smallest Rayleigh
    quotient in ``alpha``; the parallel scheme uses the largest. Both
    extremes are reported.
    """
    if not 0.0 < gamma <= 1.0:
        raise UsageError("step size must lie in (0, 1]")
    if scheme not in SCHEDULE_KINDS:
        raise UsageError(f"unknown scheme {scheme!r}")
    if isinstance(bundle, FisherBundle):
        V, V_c = bundle.V, bundle.V_c
    else:
        V = np.atleast_2d(np.asarray(bundle, dtype=float))
        V_c = V
    d = V.shape[0] if d is None else d
    S = np.diag(np.diag(V))
    D = np.diag(np.diag(V_c)) if latent else S
    D_inv = np.diag(1.0 / np.diag(D))
    if scheme == PARALLEL:
        A = np.eye(V.shape[0]) - gamma * D_inv @ V
        lo, hi = rayleigh_extremes(A.T @ V @ A, V)
        alpha = hi
    elif latent:
        M = V @ D_inv @ (2.0 * D - gamma * S) @ D_inv @ V
        lo, hi = rayleigh_extremes(M, V)
        alpha = 1.0 - lo * gamma / d
    else:
        M = V @ D_inv @ V
        lo, hi = rayleigh_extremes(M, V)
        alpha = 1.0 - lo * gamma * (2.0 - gamma) / d
    return ContractionReport(scheme, gamma, float(alpha), lo, hi, bool(latent))


# ---------------------------------------------------------------------------
# KL projection
# ---------------------------------------------------------------------------

@dataclass
class ProjectionResult:
    theta_star: np.ndarray
    objective: float
    trace: List[float] = field(default_factory=list)
    samples: int = 0
    seed: int = 0


def kl_projection_theta_star(sample_true: Callable, candidate_loglik: Callable, theta0,
                             samples: int = 10 ** 6, seed: int = 0, gradient: Optional[Callable] = None,
                             rtol: float = 1e-8) -> ProjectionResult:
    """Minimize ``KL(P0 || P_theta)`` by maximizing a Monte Carlo average log-likelihood.

    Parameters
    ----------
    sample_true : callable
        ``sample_true(rng, size)`` returns a draw of ``size`` observations from ``P0``.
    candidate_loglik : callable
        ``candidate_loglik(theta, data)`` returns the summed log-likelihood.
    theta0 : array_like
        Starting point for the quasi-Newton search.
    gradient : callable, optional
        ``gradient(theta, data)`` of the summed log-likelihood.
    """
    rng = np.random.default_rng(seed)
    data = sample_true(rng, samples)
    trace: List[float] = []

    def f(theta):
        val = -candidate_loglik(theta, data) / samples
        trace.append(-val)
        return val

    jac = None if gradient is None else (lambda th: -np.asarray(gradient(th, data)) / samples)
    res = optimize.minimize(f, np.atleast_1d(np.asarray(theta0, dtype=float)), jac=jac,
                            method="BFGS", options={"gtol": rtol, "maxiter": 1000})
    if not res.success and not (res.status == 2 and np.all(np.isfinite(res.x))):
        raise NumericError(f"KL projection did not converge: {res.message} (theta={res.x})")
    return ProjectionResult(np.asarray(res.x), float(-res.fun), trace, samples, seed)
