"""Monte Carlo prior estimates of the log evidence and closed-form oracles."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import LOG_2PI, NumericError, UsageError, log_sum_exp
from .models.gmm import GmmModel, mixture_loglik
from .models.normal import NormalModel
from .models.probit import ProbitModel
from .models.sbm import SbmModel

ESS_WARNING = 100
SBM_MAX_NODES = 12
SBM_MAX_COMMUNITIES = 3


class LowEffectiveSampleSize(UserWarning):
    pass


@dataclass(frozen=True)
class EvidenceEstimate:
    log_evidence: float
    stderr_log: float
    samples: int
    seed: int
    ess: float = float("nan")

    def __post_init__(self):
        if self.samples < 1:
            raise UsageError("samples must be >= 1")
        if not self.stderr_log >= 0:
            raise UsageError("stderr_log must be >= 0")


def estimate_from_logliks(logliks, seed: int = 0, warn: bool = True) -> EvidenceEstimate:
    """Average ``exp(logliks)`` in log space.

    The standard error is the delta-method error of the log of the mean,
    ``sd(w) / (sqrt(S) mean(w))`` with ``w`` the max-shifted weights.
    """
    ll = np.asarray(logliks, dtype=float).ravel()
    S = ll.size
    if S == 0:
        raise UsageError("need at least one sample")
    if not np.any(np.isfinite(ll)) or np.all(ll == -np.inf):
        raise NumericError("every sample has zero likelihood; the data are impossible under the model")
    top = np.max(ll)
    w = np.exp(ll - top)
    mean_w = w.mean()
    log_ev = log_sum_exp(ll) - math.log(S)
    if S > 1:
        stderr = float(np.std(w, ddof=1) / (math.sqrt(S) * mean_w))
    else:
        stderr = 0.0
    ess = float(w.sum() ** 2 / np.sum(w ** 2))
    if warn and ess < ESS_WARNING and S >= ESS_WARNING:
        warnings.warn(f"effective sample size {ess:.1f} < {ESS_WARNING}; the evidence "
                      "estimate is unreliable", LowEffectiveSampleSize, stacklevel=3)
    return EvidenceEstimate(float(log_ev), stderr, S, seed, ess)


def _batched(fn, samples, rng, batch):
    out = []
    done = 0
    while done < samples:
        m = min(batch, samples - done)
        out.append(fn(m, rng))
        done += m
    return np.concatenate(out)


def sample_logliks(model, samples: int, seed: int = 0, batch: int = 20_000) -> np.ndarray:
    """Log-likelihoods ``log p(data | theta_k)`` for ``theta_k`` drawn from the prior."""
    rng = np.random.default_rng(seed)
    if isinstance(model, NormalModel):
        def fn(m, r):
            mu, s2 = model.sample_prior(m, r)
            return model.loglik(mu, s2)
    elif isinstance(model, ProbitModel):
        def fn(m, r):
            return model.loglik(model.sample_prior(m, r))
    elif isinstance(model, GmmModel):
        step = max(1, batch * 100 // max(model.n * model.K, 1))

        def fn(m, r):
            mu = model.sample_prior(m, r)
            return np.concatenate([mixture_loglik(model.data, mu[i:i + step])
                                   for i in range(0, m, step)])
    elif isinstance(model, SbmModel):
        return _sbm_logliks(model, samples, rng)
    else:
        raise UsageError(f"no evidence sampler for {type(model).__name__}")
    return _batched(fn, samples, rng, batch)


def _sbm_logliks(model: SbmModel, samples: int, rng) -> np.ndarray:
    if model.n > SBM_MAX_NODES or model.K > SBM_MAX_COMMUNITIES:
        raise UsageError(f"SBM evidence is available only for n <= {SBM_MAX_NODES} "
                         f"and K <= {SBM_MAX_COMMUNITIES}")
    Z, logp = model.label_configurations()
    e, pairs = model.block_counts(Z)
    # collapse labellings with identical block counts
    keys = np.concatenate([e, pairs], axis=1)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    weight = np.full(uniq.shape[0], -np.inf)
    for g in range(uniq.shape[0]):
        weight[g] = log_sum_exp(logp[inv == g])
    k = e.shape[1]
    ue, upairs = uniq[:, :k], uniq[:, k:]
    out = np.empty(samples)
    chunk = max(1, 2_000_000 // max(uniq.shape[0], 1))
    for start in range(0, samples, chunk):
        B = model.sample_prior(min(chunk, samples - start), rng)
        logb, log1mb = np.log(B), np.log1p(-B)
        ll = ue @ logb.T + (upairs - ue) @ log1mb.T
        ll = ll + weight[:, None]
        top = np.max(ll, axis=0)
        out[start:start + B.shape[0]] = top + np.log(np.sum(np.exp(ll - top), axis=0))
    return out


def mc_evidence(model, samples: int = 10 ** 5, seed: int = 0, warn: bool = True) -> EvidenceEstimate:
    """Plain prior Monte Carlo estimate of ``log p(data | M)``.

    Latent variables are summed or integrated exactly per draw: the mixture
    density for the GMM, ``Phi`` for the probit model, and an exhaustive
    label sum for small SBMs.
    """
    if samples < 1:
        raise UsageError("samples must be >= 1")
    return estimate_from_logliks(sample_logliks(model, samples, seed), seed=seed, warn=warn)


def closed_form_evidence_normal_known_variance(data, mu0: float, sigma0_sq: float, sigma_sq: float) -> float:
    """Log density of ``data`` under ``N(mu0 1, sigma^2 I + sigma0^2 1 1')``.

    Uses ``det = sigma^{2(n-1)} (sigma^2 + n sigma0^2)`` and the
    Sherman-Morrison inverse.
    """
    if not (sigma0_sq > 0 and sigma_sq > 0):
        raise UsageError("variances must be positive")
    x = np.asarray(data, dtype=float).ravel() - mu0
    n = x.size
    s = x.sum()
    logdet = (n - 1) * math.log(sigma_sq) + math.log(sigma_sq + n * sigma0_sq)
    quad = (x @ x) / sigma_sq - sigma0_sq * s ** 2 / (sigma_sq * (sigma_sq + n * sigma0_sq))
    return float(-0.5 * (n * LOG_2PI + logdet + quad))


def normal_known_variance_logliks(data, mu0, sigma0_sq, sigma_sq, samples, seed=0):
    """Prior draws of the log-likelihood for the known-variance normal model."""
    x = np.asarray(data, dtype=float).ravel()
    rng = np.random.default_rng(seed)
    mu = rng.normal(mu0, math.sqrt(sigma0_sq), samples)
    n = x.size
    ss = np.sum((x - x.mean()) ** 2)
    return -0.5 * n * (LOG_2PI + math.log(sigma_sq)) - 0.5 * (ss + n * (x.mean() - mu) ** 2) / sigma_sq


def gmm_single_component_log_evidence(data, prior_sd: float) -> float:
    """Exact evidence of the one-component mixture (a known-variance normal)."""
    return closed_form_evidence_normal_known_variance(data, 0.0, prior_sd ** 2, 1.0)


def sbm_exact_log_evidence(model: SbmModel) -> float:
    return model.exact_log_evidence()


__all__ = ["EvidenceEstimate", "LowEffectiveSampleSize", "mc_evidence", "estimate_from_logliks",
           "sample_logliks", "closed_form_evidence_normal_known_variance",
           "normal_known_variance_logliks", "gmm_single_component_log_evidence",
           "sbm_exact_log_evidence"]
