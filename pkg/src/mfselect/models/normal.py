"""Location-scale normal model with N(mu0, s0^2) x IG(a, b) prior."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from scipy import special

from ..core import (LOG_2PI, GaussianFactor, InverseGammaFactor, MeanFieldState,
                    UsageError, digamma)
from .base import FisherBundle, Model

MU, SIGMA2 = 0, 1


@dataclass(frozen=True, eq=False)
class NormalModel(Model):
    """i.i.d. ``N(mu, sigma^2)`` data with a normal / inverse-gamma prior.

    The variational family is ``q(mu) q(sigma^2) = N(m, s^2) IG(A, B)`` with
    ``A = a + n/2`` held fixed. Block 0 carries ``(m, s^2)`` and block 1
    carries ``B``.
    """

    data: np.ndarray
    mu0: float = 0.0
    sigma0_sq: float = 1.0
    a: float = 1.0
    b: float = 1.0

    n_blocks = 2
    latent_blocks = ()

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.data, dtype=float)).ravel()
        if not np.all(np.isfinite(x)):
            raise UsageError("data must be finite")
        x.setflags(write=False)
        object.__setattr__(self, "data", x)
        if not (self.sigma0_sq > 0 and self.a > 0 and self.b > 0):
            raise UsageError("sigma0_sq, a and b must be positive")

    @property
    def n(self) -> int:
        return self.data.size

    @property
    def shape_post(self) -> float:
        return self.a + 0.5 * self.n

    def initial_state(self, seed: Optional[int] = None) -> MeanFieldState:
        """Prior initialisation ``(m, s^2, B) = (mu0, sigma0^2, b)``."""
        return MeanFieldState((GaussianFactor(self.mu0, self.sigma0_sq),
                               InverseGammaFactor(self.shape_post, self.b)))

    def get_block(self, state, j):
        return state.parameter_factors[j]

    def set_blocks(self, state, values: Dict[int, object]):
        factors = list(state.parameter_factors)
        for j, v in values.items():
            factors[j] = v
        return MeanFieldState(factors, state.latent_factors)

    def optimum(self, state, j):
        q_mu, q_s = state.parameter_factors
        if j == MU:
            prec = self.n * float(q_s.mean_inverse()) + 1.0 / self.sigma0_sq
            s2 = 1.0 / prec
            m = (self.data.sum() * float(q_s.mean_inverse()) + self.mu0 / self.sigma0_sq) * s2
            return GaussianFactor(m, s2)
        if j == SIGMA2:
            m, s2 = float(q_mu.mean), float(q_mu.variance)
            rate = self.b + 0.5 * (np.sum((self.data - m) ** 2) + self.n * s2)
            return InverseGammaFactor(self.shape_post, rate)
        raise UsageError(f"block index {j} out of range")

    def blend(self, j, old, new, gamma):
        if j == MU:
            e1o, e2o = old.natural()
            e1n, e2n = new.natural()
            return GaussianFactor.from_natural((1 - gamma) * e1o + gamma * e1n,
                                               (1 - gamma) * e2o + gamma * e2n)
        return InverseGammaFactor(old.shape, (1 - gamma) * old.rate + gamma * new.rate)

    # -- ELBO ---------------------------------------------------------------

    def elbo(self, state) -> float:
        """Generic ELBO ``E_q log p(X, mu, sigma^2) - E_q log q``; valid for any state."""
        q_mu, q_s = state.parameter_factors
        m, s2 = float(q_mu.mean), float(q_mu.variance)
        A, B = float(q_s.shape), float(q_s.rate)
        e_inv, e_log = A / B, np.log(B) - digamma(A)
        n = self.n
        lik = (-0.5 * n * LOG_2PI - 0.5 * n * e_log
               - 0.5 * e_inv * (np.sum((self.data - m) ** 2) + n * s2))
        prior_mu = (-0.5 * np.log(2 * np.pi * self.sigma0_sq)
                    - ((m - self.mu0) ** 2 + s2) / (2 * self.sigma0_sq))
        prior_s = (self.a * np.log(self.b) - special.gammaln(self.a)
                   - (self.a + 1) * e_log - self.b * e_inv)
        return float(lik + prior_mu + prior_s + q_mu.entropy() + q_s.entropy())

    def closed_form_elbo(self, state) -> float:
        """Closed-form optimal ELBO; exact whenever ``B`` is at its update."""
        return normal_elbo(self, state)

    def kl_divergence(self, state, other) -> float:
        """KL(state || other) for the product N x IG family."""
        (qm, qs), (pm, ps) = state.parameter_factors, other.parameter_factors
        m, s2, m0, s20 = float(qm.mean), float(qm.variance), float(pm.mean), float(pm.variance)
        kl_n = 0.5 * (s2 / s20 + (m - m0) ** 2 / s20 - 1 + np.log(s20 / s2))
        a, b, a0, b0 = float(qs.shape), float(qs.rate), float(ps.shape), float(ps.rate)
        kl_ig = ((a - a0) * digamma(a) - special.gammaln(a) + special.gammaln(a0)
                 + a0 * (np.log(b) - np.log(b0)) + a * (b0 - b) / b)
        return float(kl_n + kl_ig)

    # -- likelihood, prior, information ----------------------------------------

    def loglik(self, mu, sigma2) -> np.ndarray:
        """Data log-likelihood at (arrays of) ``(mu, sigma2)``."""
        mu = np.asarray(mu, dtype=float)
        sigma2 = np.asarray(sigma2, dtype=float)
        n = self.n
        xbar = self.data.mean() if n else 0.0
        ss = np.sum((self.data - xbar) ** 2)
        return (-0.5 * n * (LOG_2PI + np.log(sigma2))
                - 0.5 * (ss + n * (xbar - mu) ** 2) / sigma2)

    def log_prior(self, mu, sigma2) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        sigma2 = np.asarray(sigma2, dtype=float)
        lp_mu = -0.5 * np.log(2 * np.pi * self.sigma0_sq) - (mu - self.mu0) ** 2 / (2 * self.sigma0_sq)
        lp_s = (self.a * np.log(self.b) - special.gammaln(self.a)
                - (self.a + 1) * np.log(sigma2) - self.b / sigma2)
        return lp_mu + lp_s

    def sample_prior(self, size: int, rng: np.random.Generator):
        mu = rng.normal(self.mu0, np.sqrt(self.sigma0_sq), size)
        g = rng.gamma(self.a, 1.0, size)
        # tiny shapes underflow gamma draws to 0; those draws have sigma^2 = inf
        with np.errstate(divide="ignore", over="ignore"):
            sigma2 = self.b / g
        return mu, sigma2

    @property
    def n_parameters(self) -> int:
        return 2

    def mle(self):
        """Closed-form MLE ``(xbar, mean squared deviation)`` and maximal log-likelihood."""
        if self.n < 2:
            raise UsageError("the normal MLE needs at least two observations")
        mu = self.data.mean()
        s2 = np.mean((self.data - mu) ** 2)
        if s2 <= 0:
            raise UsageError("the normal MLE needs non-constant data")
        return np.array([mu, s2]), float(self.loglik(mu, s2))

    def fisher_bundle(self, theta_star) -> FisherBundle:
        """Analytic per-observation information ``diag(1/sigma^2, 1/(2 sigma^4))``."""
        mu, s2 = np.asarray(theta_star, dtype=float)
        V = np.diag([1.0 / s2, 1.0 / (2.0 * s2 ** 2)])
        zero = np.zeros_like(V)
        return FisherBundle(V, zero, V.copy(), np.array([mu, s2]),
                            float(self.log_prior(mu, s2)), source="analytic",
                            V_stderr=zero)


def normal_update(model: NormalModel, state: MeanFieldState, parallel: bool = False) -> MeanFieldState:
    """One pass of the ``s^2, m, B`` updates.

    Sequentially (the default) ``B`` sees the freshly updated ``(m, s^2)``;
    with ``parallel=True`` both blocks are computed from ``state``.
    """
    new_mu = model.optimum(state, MU)
    if parallel:
        new_s = model.optimum(state, SIGMA2)
        return model.set_blocks(state, {MU: new_mu, SIGMA2: new_s})
    mid = model.set_blocks(state, {MU: new_mu})
    return model.set_blocks(mid, {SIGMA2: model.optimum(mid, SIGMA2)})


def normal_elbo(model: NormalModel, state: MeanFieldState) -> float:
    """Printed closed form of the optimal ELBO for the normal model."""
    q_mu, q_s = state.parameter_factors
    m, s2 = float(q_mu.mean), float(q_mu.variance)
    A, B = float(q_s.shape), float(q_s.rate)
    s0 = model.sigma0_sq
    return float(0.5 - 0.5 * model.n * LOG_2PI + 0.5 * np.log(s2 / s0)
                 - ((m - model.mu0) ** 2 + s2) / (2 * s0)
                 + model.a * np.log(model.b) - A * np.log(B)
                 + special.gammaln(A) - special.gammaln(model.a))
