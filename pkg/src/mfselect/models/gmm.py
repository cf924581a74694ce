"""Equal-weight Gaussian mixture with unit variances and N(0, sigma^2) centres."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from ..core import (LOG_2PI, CategoricalFactor, GaussianFactor, MeanFieldState, NumericError,
                    UsageError, log_sum_exp_rows, normalize_log_probs)
from .base import FisherBundle, Model

ASSIGN = 0


def mixture_loglik(x, centers) -> np.ndarray:
    """``sum_i log sum_k K^{-1} N(x_i; mu_k, 1)`` for centres of shape ``(K,)`` or ``(S, K)``."""
    x = np.asarray(x, dtype=float)
    mu = np.asarray(centers, dtype=float)
    K = mu.shape[-1]
    if mu.ndim == 1:
        comp = -0.5 * (x[:, None] - mu[None, :]) ** 2
        return float(np.sum(log_sum_exp_rows(comp, axis=1)) - x.size * (0.5 * LOG_2PI + np.log(K)))
    comp = -0.5 * (x[None, :, None] - mu[:, None, :]) ** 2
    return np.sum(log_sum_exp_rows(comp, axis=2), axis=1) - x.size * (0.5 * LOG_2PI + np.log(K))


@dataclass(frozen=True, eq=False)
class GmmModel(Model):
    """Mixture ``sum_k K^{-1} N(mu_k, 1)`` with i.i.d. ``N(0, sigma^2)`` centres.

    Block 0 holds all assignment factors ``phi`` (an ``n x K`` categorical)
    and blocks ``1..K`` hold the centre factors ``N(m_k, s_k^2)``.
    """

    data: np.ndarray
    components: int = 2
    prior_sd: float = 1.0

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.data, dtype=float)).ravel()
        if not np.all(np.isfinite(x)):
            raise UsageError("data must be finite")
        if self.components < 1:
            raise UsageError("need at least one component")
        if not self.prior_sd > 0:
            raise UsageError("prior_sd must be positive")
        x.setflags(write=False)
        object.__setattr__(self, "data", x)

    @property
    def n(self) -> int:
        return self.data.size

    @property
    def K(self) -> int:
        return self.components

    @property
    def n_blocks(self) -> int:
        return self.K + 1

    @property
    def latent_blocks(self):
        return (ASSIGN,)

    @property
    def sigma2(self) -> float:
        return self.prior_sd ** 2

    def initial_state(self, seed: Optional[int] = 0, centers=None, jitter: float = 0.01) -> MeanFieldState:
        """Centres at data quantiles (or ``centers``), ``s_k^2 = sigma^2``, jittered uniform ``phi``."""
        K = self.K
        if centers is None:
            if self.n:
                centers = np.quantile(self.data, (np.arange(K) + 0.5) / K)
            else:
                centers = np.zeros(K)
        centers = np.asarray(centers, dtype=float)
        rng = np.random.default_rng(seed)
        phi = normalize_log_probs(jitter * rng.standard_normal((self.n, K)))
        return MeanFieldState(tuple(GaussianFactor(c, self.sigma2) for c in centers),
                              (CategoricalFactor(phi),))

    def get_block(self, state, j):
        if j == ASSIGN:
            return state.latent_factors[0]
        return state.parameter_factors[j - 1]

    def set_blocks(self, state, values: Dict[int, object]):
        params = list(state.parameter_factors)
        latent = list(state.latent_factors)
        for j, v in values.items():
            if j == ASSIGN:
                latent[0] = v
            else:
                params[j - 1] = v
        return MeanFieldState(params, latent)

    def center_moments(self, state):
        m = np.array([float(f.mean) for f in state.parameter_factors])
        s2 = np.array([float(f.variance) for f in state.parameter_factors])
        return m, s2

    def assignment_logits(self, state) -> np.ndarray:
        m, s2 = self.center_moments(state)
        return self.data[:, None] * m[None, :] - 0.5 * (s2 + m ** 2)[None, :]

    def optimum(self, state, j):
        if j == ASSIGN:
            if not self.n:
                return state.latent_factors[0]
            return CategoricalFactor.from_logits(self.assignment_logits(state))
        k = j - 1
        if not 0 <= k < self.K:
            raise UsageError(f"block index {j} out of range")
        phi = state.latent_factors[0].probabilities
        w = phi[:, k].sum() if self.n else 0.0
        s2 = 1.0 / (1.0 / self.sigma2 + w)
        m = (self.data @ phi[:, k] if self.n else 0.0) * s2
        return GaussianFactor(m, s2)

    def blend(self, j, old, new, gamma):
        if j == ASSIGN:
            if not self.n:
                return old
            logits = (1 - gamma) * old.log_probabilities() + gamma * new.log_probabilities()
            return CategoricalFactor.from_logits(logits)
        e1o, e2o = old.natural()
        e1n, e2n = new.natural()
        return GaussianFactor.from_natural((1 - gamma) * e1o + gamma * e1n,
                                           (1 - gamma) * e2o + gamma * e2n)

    # -- ELBO ---------------------------------------------------------------

    def elbo(self, state) -> float:
        """Generic ELBO assembled from expected log densities and entropies."""
        m, s2 = self.center_moments(state)
        x = self.data
        K = self.K
        phi = state.latent_factors[0].probabilities
        # E log N(x_i; mu_k, 1) under q(mu_k)
        e_lik = -0.5 * LOG_2PI - 0.5 * ((x[:, None] - m[None, :]) ** 2 + s2[None, :])
        lik = float(np.sum(phi * e_lik)) if self.n else 0.0
        prior_c = -self.n * np.log(K)
        prior_mu = float(np.sum(-0.5 * np.log(2 * np.pi * self.sigma2) - (m ** 2 + s2) / (2 * self.sigma2)))
        ent_c = float(np.sum(state.latent_factors[0].entropy())) if self.n else 0.0
        ent_mu = float(np.sum(0.5 * (LOG_2PI + 1.0 + np.log(s2))))
        return lik + prior_c + prior_mu + ent_c + ent_mu

    def closed_form_elbo(self, state) -> float:
        return gmm_elbo(self, state)

    def kl_divergence(self, state, other) -> float:
        m1, v1 = self.center_moments(state)
        m2, v2 = self.center_moments(other)
        kl = float(np.sum(0.5 * (v1 / v2 + (m1 - m2) ** 2 / v2 - 1 + np.log(v2 / v1))))
        if self.n:
            p = state.latent_factors[0]
            q = other.latent_factors[0]
            kl += float(np.sum(p.probabilities * (p.log_probabilities() - q.log_probabilities())))
        return kl

    # -- likelihood, prior, information ----------------------------------------

    def loglik(self, centers):
        return mixture_loglik(self.data, centers)

    def log_prior(self, centers) -> float:
        mu = np.asarray(centers, dtype=float)
        return float(np.sum(-0.5 * np.log(2 * np.pi * self.sigma2) - mu ** 2 / (2 * self.sigma2)))

    def sample_prior(self, size: int, rng: np.random.Generator) -> np.ndarray:
        return self.prior_sd * rng.standard_normal((size, self.K))

    @property
    def n_parameters(self) -> int:
        return self.K

    def mle(self, restarts: int = 50, max_iter: int = 500, tol: float = 1e-10, seed: int = 0):
        return gmm_em(self.data, self.K, restarts=restarts, max_iter=max_iter, tol=tol, seed=seed)

    def fisher_bundle(self, theta_star, samples: int = 10 ** 6, seed: int = 0) -> FisherBundle:
        return gmm_fisher_bundle(theta_star, self.prior_sd, samples=samples, seed=seed)


def gmm_update(model: GmmModel, state: MeanFieldState, target) -> MeanFieldState:
    """Update ``"assignments"`` or the centre with integer index ``target``."""
    if target == "assignments":
        j = ASSIGN
    else:
        k = int(target)
        if not 0 <= k < model.K:
            raise UsageError(f"centre {k} out of range")
        j = k + 1
    return model.set_blocks(state, {j: model.optimum(state, j)})


def gmm_elbo(model: GmmModel, state: MeanFieldState) -> float:
    """Printed closed form of the GMM ELBO (0 log 0 taken as 0)."""
    m, s2 = model.center_moments(state)
    x = model.data
    n, K, sig2 = model.n, model.K, model.sigma2
    phi = state.latent_factors[0].probabilities
    plogp = np.where(phi > 0, phi * np.log(np.where(phi > 0, phi, 1.0)), 0.0)
    return float(np.sum(x[:, None] * phi * m[None, :])
                 - 0.5 * np.sum(phi * (m ** 2 + s2)[None, :])
                 - np.sum(plogp)
                 - np.sum(m ** 2 + s2) / (2 * sig2)
                 + 0.5 * np.sum(np.log(s2))
                 - 0.5 * n * LOG_2PI - 0.5 * np.sum(x ** 2) - n * np.log(K)
                 + 0.5 * K * (1 - np.log(sig2)))


def gmm_em(x, K: int, restarts: int = 50, max_iter: int = 500, tol: float = 1e-10, seed: int = 0):
    """EM for equal-weight unit-variance mixtures, all restarts run in lockstep.

    Restart 0 starts at the data quantiles; the others perturb them with
    seeded noise of half the data standard deviation. Returns the sorted
    best centres and their log-likelihood.
    """
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise UsageError("EM needs data")
    rng = np.random.default_rng(seed)
    base = np.quantile(x, (np.arange(K) + 0.5) / K)
    spread = 0.5 * (np.std(x) + 1e-3)
    mu = base[None, :] + spread * rng.standard_normal((restarts, K))
    mu[0] = base
    prev = mixture_loglik(x, mu)
    active = np.ones(restarts, dtype=bool)
    for _ in range(max_iter):
        comp = -0.5 * (x[None, :, None] - mu[:, None, :]) ** 2
        r = np.exp(comp - log_sum_exp_rows(comp, axis=2)[:, :, None])
        w = r.sum(axis=1)
        new = np.where(w > 1e-300, np.einsum("sik,i->sk", r, x) / np.maximum(w, 1e-300), mu)
        mu = np.where(active[:, None], new, mu)
        cur = mixture_loglik(x, mu)
        active &= np.abs(cur - prev) >= tol
        prev = cur
        if not active.any():
            break
    best = int(np.argmax(prev))
    if not np.isfinite(prev[best]):
        raise NumericError(f"EM produced a non-finite log-likelihood (centres {mu[best]})")
    return np.sort(mu[best]), float(prev[best])


def gmm_fisher_bundle(centers, prior_sd: float, samples: int = 10 ** 6, seed: int = 0,
                      batch: int = 100_000) -> FisherBundle:
    """Information matrices of the equal-weight mixture at ``centers``.

    ``V_c = I / K`` is exact. ``V`` is the Monte Carlo mean of the negative
    Hessian of the mixture log density over ``X`` drawn from the mixture;
    ``V_s`` is estimated separately as the mean of the conditional variance of
    the complete-data score given ``X``. ``V_stderr`` holds the standard errors
    of the entries of ``V + V_s``.
    """
    mu = np.atleast_1d(np.asarray(centers, dtype=float))
    K = mu.size
    rng = np.random.default_rng(seed)
    sum_v = np.zeros((K, K))
    sum_s = np.zeros((K, K))
    sum_t = np.zeros((K, K))
    sum_t2 = np.zeros((K, K))
    done = 0
    while done < samples:
        m = min(batch, samples - done)
        comp_idx = rng.integers(K, size=m)
        x = mu[comp_idx] + rng.standard_normal(m)
        u = x[:, None] - mu[None, :]
        logits = -0.5 * u ** 2
        r = np.exp(logits - log_sum_exp_rows(logits, axis=1)[:, None])
        ru = r * u
        outer_ru = ru[:, :, None] * ru[:, None, :]
        diag_r = np.einsum("ik,kl->ikl", r, np.eye(K))
        diag_ru2 = np.einsum("ik,kl->ikl", r * u ** 2, np.eye(K))
        hv = diag_r - diag_ru2 + outer_ru
        # complete-data score is c_k u_k; its conditional covariance given x
        hs = diag_ru2 - outer_ru
        sum_v += hv.sum(axis=0)
        sum_s += hs.sum(axis=0)
        t = hv + hs
        sum_t += t.sum(axis=0)
        sum_t2 += (t ** 2).sum(axis=0)
        done += m
    V = sum_v / samples
    V_s = sum_s / samples
    V_c = np.eye(K) / K
    mean_t = sum_t / samples
    stderr = np.sqrt(np.maximum(sum_t2 / samples - mean_t ** 2, 0.0) / max(samples - 1, 1))
    logp = float(np.sum(-0.5 * np.log(2 * np.pi * prior_sd ** 2) - mu ** 2 / (2 * prior_sd ** 2)))
    return FisherBundle(V, V_s, V_c, mu, logp, source="monte_carlo", samples=samples,
                        seed=seed, V_stderr=stderr)
