"""Probit regression with Gaussian prior and truncated-normal data augmentation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from ..core import (GaussianFactor, MeanFieldState, MultivariateGaussianFactor,
                    NumericError, TruncatedGaussianFactor, UsageError, inverse_mills, kl_gaussian,
                    norm_cdf, norm_logcdf, norm_pdf, truncated_normal_mean)
from .base import FisherBundle, Model

BLOCK = "block"
FACTORIZED = "fully_factorized"


def _logdet_pd(m: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(np.linalg.cholesky(m)))))


@dataclass(frozen=True, eq=False)
class ProbitModel(Model):
    """``Y_i | X_i ~ Ber(Phi(X_i' beta))`` with ``beta ~ N(0, Sigma0)``.

    ``factorization="block"`` keeps ``q(beta)`` jointly Gaussian (block 0)
    and puts all ``Z_i`` in block 1. ``"fully_factorized"`` splits ``beta``
    into ``d`` scalar blocks ``0..d-1`` followed by the latent block ``d``.
    """

    design: np.ndarray
    responses: np.ndarray
    prior_covariance: Optional[np.ndarray] = None
    factorization: str = BLOCK

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.design, dtype=float))
        y = np.asarray(self.responses).ravel()
        if X.shape[0] != y.size:
            if y.size == 0 and X.size == 0:
                X = X.reshape(0, X.shape[-1] if X.ndim == 2 else 1)
            else:
                raise UsageError("design and responses have different lengths")
        if not np.all(np.isin(y, (0, 1))):
            raise UsageError("responses must be binary 0/1")
        d = X.shape[1]
        S0 = np.eye(d) if self.prior_covariance is None else np.atleast_2d(
            np.asarray(self.prior_covariance, dtype=float))
        if S0.shape != (d, d) or not np.allclose(S0, S0.T):
            raise UsageError("prior covariance must be a symmetric d x d matrix")
        try:
            np.linalg.cholesky(S0)
        except np.linalg.LinAlgError as exc:
            raise UsageError("prior covariance must be positive definite") from exc
        if self.factorization not in (BLOCK, FACTORIZED):
            raise UsageError(f"unknown factorization {self.factorization!r}")
        P0 = np.linalg.inv(S0)
        A = X.T @ X + P0
        for name, val in (("design", X), ("responses", y.astype(float)), ("prior_covariance", S0),
                          ("_prior_precision", P0), ("_A", A), ("_A_inv", np.linalg.inv(A)),
                          ("_sign", np.where(y == 1, 1.0, -1.0))):
            val = np.array(val)
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    # -- block bookkeeping -----------------------------------------------------

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def d(self) -> int:
        return self.design.shape[1]

    @property
    def n_blocks(self) -> int:
        return 2 if self.factorization == BLOCK else self.d + 1

    @property
    def latent_blocks(self):
        return (self.n_blocks - 1,)

    @property
    def positive(self) -> np.ndarray:
        return self.responses == 1

    def beta_moments(self, state):
        """Mean vector and covariance of ``q(beta)``."""
        if self.factorization == BLOCK:
            f = state.parameter_factors[0]
            return f.mean, f.covariance
        mean = np.array([float(f.mean) for f in state.parameter_factors])
        var = np.array([float(f.variance) for f in state.parameter_factors])
        return mean, np.diag(var)

    def _beta_state(self, mean):
        if self.factorization == BLOCK:
            return (MultivariateGaussianFactor(mean, self._A_inv),)
        v = 1.0 / np.diag(self._A)
        return tuple(GaussianFactor(mean[j], v[j]) for j in range(self.d))

    def initial_state(self, seed: Optional[int] = None, beta=None) -> MeanFieldState:
        """``mu_beta = 0`` (or ``beta``) with ``q(Z)`` from one latent update."""
        mean = np.zeros(self.d) if beta is None else np.asarray(beta, dtype=float)
        z = TruncatedGaussianFactor(self.design @ mean, self.positive)
        return MeanFieldState(self._beta_state(mean), (z,))

    def get_block(self, state, j):
        if j == self.n_blocks - 1:
            return state.latent_factors[0]
        return state.parameter_factors[j]

    def set_blocks(self, state, values: Dict[int, object]):
        params = list(state.parameter_factors)
        latent = list(state.latent_factors)
        for j, v in values.items():
            if j == self.n_blocks - 1:
                latent[0] = v
            else:
                params[j] = v
        return MeanFieldState(params, latent)

    def optimum(self, state, j):
        if j == self.n_blocks - 1:
            mean, _ = self.beta_moments(state)
            return TruncatedGaussianFactor(self.design @ mean, self.positive)
        ez = state.latent_factors[0].mean()
        if self.factorization == BLOCK:
            return MultivariateGaussianFactor(self._A_inv @ (self.design.T @ ez), self._A_inv)
        mean, _ = self.beta_moments(state)
        A = self._A
        resid = self.design[:, j] @ ez - (A[j] @ mean - A[j, j] * mean[j])
        return GaussianFactor(resid / A[j, j], 1.0 / A[j, j])

    def optima(self, state, blocks):
        blocks = list(blocks)
        out = {}
        coords = [j for j in blocks if self.factorization == FACTORIZED and j < self.d]
        if len(coords) > 1:
            # Jacobi update of several coordinates from the same state
            ez = state.latent_factors[0].mean()
            mean, _ = self.beta_moments(state)
            A = self._A
            new = (self.design.T @ ez - A @ mean + np.diag(A) * mean) / np.diag(A)
            for j in coords:
                out[j] = GaussianFactor(new[j], 1.0 / A[j, j])
        for j in blocks:
            if j not in out:
                out[j] = self.optimum(state, j)
        return out

    def blend(self, j, old, new, gamma):
        if j == self.n_blocks - 1:
            loc = (1 - gamma) * old.location + gamma * new.location
            return TruncatedGaussianFactor(loc, old.positive)
        # covariances are fixed, so natural-parameter blending moves the mean linearly
        mean = (1 - gamma) * old.mean + gamma * new.mean
        if self.factorization == BLOCK:
            return MultivariateGaussianFactor(mean, old.covariance)
        return GaussianFactor(mean, old.variance)

    # -- ELBO ---------------------------------------------------------------

    def elbo(self, state) -> float:
        """Generic ELBO, valid for any state of either factorization."""
        mean, cov = self.beta_moments(state)
        qz = state.latent_factors[0]
        loc = qz.location
        ez = qz.mean()
        eta = self.design @ mean
        quad = np.sum((self.design @ cov) * self.design, axis=1)
        latent = np.sum(ez * (eta - loc) - 0.5 * eta ** 2 + 0.5 * loc ** 2
                        - 0.5 * quad + qz.log_normalizer())
        P0 = self._prior_precision
        prior = (-0.5 * np.trace(P0 @ (cov + np.outer(mean, mean)))
                 - 0.5 * _logdet_pd(self.prior_covariance) + 0.5 * _logdet_pd(cov)
                 + 0.5 * self.d)
        return float(latent + prior)

    def closed_form_elbo(self, state) -> float:
        return probit_elbo(self, state)

    def kl_divergence(self, state, other) -> float:
        """KL between the ``q(beta)`` parts of two states."""
        m1, c1 = self.beta_moments(state)
        m2, c2 = self.beta_moments(other)
        return kl_gaussian(MultivariateGaussianFactor(m1, c1), MultivariateGaussianFactor(m2, c2))

    # -- likelihood, prior -----------------------------------------------------

    def loglik(self, beta) -> np.ndarray:
        """Marginal log-likelihood at ``beta`` (shape ``(d,)`` or ``(S, d)``)."""
        beta = np.asarray(beta, dtype=float)
        eta = beta @ self.design.T if beta.ndim == 2 else self.design @ beta
        return np.sum(norm_logcdf(self._sign * eta), axis=-1)

    def log_prior(self, beta) -> float:
        beta = np.asarray(beta, dtype=float)
        sol = np.linalg.solve(self.prior_covariance, beta)
        return float(-0.5 * (self.d * np.log(2 * np.pi) + _logdet_pd(self.prior_covariance) + beta @ sol))

    def sample_prior(self, size: int, rng: np.random.Generator) -> np.ndarray:
        L = np.linalg.cholesky(self.prior_covariance)
        return rng.standard_normal((size, self.d)) @ L.T

    @property
    def n_parameters(self) -> int:
        return self.d

    def mle(self, max_iter: int = 100, tol: float = 1e-10):
        """Newton's method on the marginal probit likelihood."""
        return probit_mle(self.design, self.responses, max_iter=max_iter, tol=tol)

    def fisher_bundle(self, theta_star, feature_cov=None, samples: int = 10 ** 6,
                      seed: int = 0) -> FisherBundle:
        """Monte Carlo bundle; features drawn from ``N(0, feature_cov)``.

        Without ``feature_cov`` the rows of the design are resampled, i.e. the
        expectation is over the empirical feature distribution.
        """
        return probit_fisher_bundle(theta_star, self.prior_covariance, feature_cov=feature_cov,
                                    design=None if feature_cov is not None else self.design,
                                    samples=samples, seed=seed)


def probit_update_block(model: ProbitModel, state: MeanFieldState) -> MeanFieldState:
    """``mu_beta`` from the current ``mu_Z``, then every ``mu_Z`` via the Mills ratio."""
    if model.factorization != BLOCK:
        raise UsageError("probit_update_block needs a block-factorized model")
    mid = model.set_blocks(state, {0: model.optimum(state, 0)})
    return model.set_blocks(mid, {1: model.optimum(mid, 1)})


def probit_update_factorized(model: ProbitModel, state: MeanFieldState, j: int) -> MeanFieldState:
    """Update the single coordinate ``beta_j`` of a fully factorized model."""
    if model.factorization != FACTORIZED:
        raise UsageError("probit_update_factorized needs a fully factorized model")
    if not 0 <= j < model.d:
        raise UsageError(f"coordinate {j} out of range")
    return model.set_blocks(state, {j: model.optimum(state, j)})


def probit_elbo(model: ProbitModel, state: MeanFieldState) -> float:
    """Printed closed form of the optimal ELBO for the state's factorization."""
    mean, _ = model.beta_moments(state)
    eta = model.design @ mean
    fit = np.sum(norm_logcdf(model._sign * eta))
    penalty = -0.5 * mean @ model._prior_precision @ mean
    if model.factorization == BLOCK:
        M = model.prior_covariance @ model.design.T @ model.design + np.eye(model.d)
        sign, logdet = np.linalg.slogdet(M)
        return float(fit + penalty - 0.5 * logdet)
    return float(fit + penalty - 0.5 * _logdet_pd(model.prior_covariance)
                 - 0.5 * np.sum(np.log(np.diag(model._A))))


def probit_mle(X, y, max_iter: int = 100, tol: float = 1e-10, beta0=None):
    """Newton iterations with step halving; returns ``(beta_hat, loglik)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    s = np.where(np.asarray(y).ravel() == 1, 1.0, -1.0)
    beta = np.zeros(X.shape[1]) if beta0 is None else np.asarray(beta0, dtype=float).copy()

    def ll(b):
        return float(np.sum(norm_logcdf(s * (X @ b))))

    cur = ll(beta)
    for it in range(max_iter):
        eta = X @ beta
        lam = inverse_mills(s * eta)
        grad = X.T @ (s * lam)
        w = lam * (lam + s * eta)
        H = (X * w[:, None]).T @ X
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"probit Newton: singular Hessian at iteration {it}, beta={beta}") from exc
        t = 1.0
        while True:
            cand = beta + t * step
            new = ll(cand)
            if new >= cur - 1e-12 or t < 1e-10:
                break
            t *= 0.5
        beta, prev, cur = cand, cur, new
        if abs(cur - prev) < tol and np.max(np.abs(t * step)) < 1e-8:
            return beta, cur
    raise NumericError(f"probit Newton did not converge in {max_iter} iterations "
                       f"(beta={beta}, loglik={cur}); the data may be separable")


def probit_information_weight(eta):
    """``phi(eta)^2 / (Phi(eta)(1-Phi(eta)))``, stable in both tails."""
    eta = np.asarray(eta, dtype=float)
    # phi^2/(Phi Phi(-eta)) = lam(eta) * lam(-eta) with lam = phi / Phi
    return inverse_mills(eta) * inverse_mills(-eta)


def probit_fisher_bundle(beta_star, prior_covariance, feature_cov=None, design=None,
                         samples: int = 10 ** 6, seed: int = 0,
                         batch: int = 200_000) -> FisherBundle:
    """Observed, missing and complete information of the probit model at ``beta_star``.

    ``V = E[w(X'b) X X']`` and, independently, ``V_s = E[Var(Z | X, Y) X X']``
    with ``Y`` drawn from the model; ``V_c = E[X X']`` is exact when
    ``feature_cov`` is given. ``V_stderr`` holds the standard errors of the
    entries of ``V + V_s``, the Monte Carlo part of ``V_c - V - V_s``.
    """
    beta_star = np.atleast_1d(np.asarray(beta_star, dtype=float))
    d = beta_star.size
    rng = np.random.default_rng(seed)
    if feature_cov is not None:
        feature_cov = np.atleast_2d(np.asarray(feature_cov, dtype=float))
        L = np.linalg.cholesky(feature_cov)
    elif design is None:
        raise UsageError("either feature_cov or design is needed")
    sum_v = np.zeros((d, d))
    sum_s = np.zeros((d, d))
    sum_xx = np.zeros((d, d))
    sum_t = np.zeros((d, d))
    sum_t2 = np.zeros((d, d))
    done = 0
    while done < samples:
        m = min(batch, samples - done)
        if feature_cov is not None:
            X = rng.standard_normal((m, d)) @ L.T
        else:
            X = design[rng.integers(design.shape[0], size=m)]
        eta = X @ beta_star
        w = probit_information_weight(eta)
        y_pos = rng.random(m) < norm_cdf(eta)
        s = np.where(y_pos, 1.0, -1.0)
        lam = inverse_mills(s * eta)
        var_z = 1.0 - lam * (lam + s * eta)
        sum_v += (X * w[:, None]).T @ X
        sum_s += (X * var_z[:, None]).T @ X
        sum_xx += X.T @ X
        t = w + var_z
        outer = X[:, :, None] * X[:, None, :] * t[:, None, None]
        sum_t += outer.sum(axis=0)
        sum_t2 += (outer ** 2).sum(axis=0)
        done += m
    V = sum_v / samples
    V_s = sum_s / samples
    V_c = feature_cov if feature_cov is not None else sum_xx / samples
    mean_t = sum_t / samples
    var_t = np.maximum(sum_t2 / samples - mean_t ** 2, 0.0)
    stderr = np.sqrt(var_t / max(samples - 1, 1))
    P = np.atleast_2d(np.asarray(prior_covariance, dtype=float))
    logp = float(-0.5 * (d * np.log(2 * np.pi) + _logdet_pd(P)
                         + beta_star @ np.linalg.solve(P, beta_star)))
    return FisherBundle(V, V_s, V_c, beta_star, logp, source="monte_carlo",
                        samples=samples, seed=seed, V_stderr=stderr)


def probit_projection(beta, feature_cov, keep) -> np.ndarray:
    """KL projection of a probit truth onto the submodel using features ``keep``.

    With ``X ~ N(0, Sigma)`` the dropped part ``X_2' b_2`` given ``X_1`` is
    ``N(X_1' A, tau^2)`` with ``A = Sigma_11^{-1} Sigma_12 b_2`` and ``tau^2``
    the conditional variance, so ``Y | X_1`` is again probit with
    coefficients ``(b_1 + A) / sqrt(1 + tau^2)``.
    """
    beta = np.asarray(beta, dtype=float).ravel()
    cov = np.atleast_2d(np.asarray(feature_cov, dtype=float))
    keep = np.asarray(keep, dtype=int).ravel()
    if cov.shape != (beta.size, beta.size):
        raise UsageError("feature covariance must be p x p for p coefficients")
    if keep.size == 0 or len(set(keep.tolist())) != keep.size or keep.min() < 0 or keep.max() >= beta.size:
        raise UsageError("keep must list distinct feature indices")
    drop = np.setdiff1d(np.arange(beta.size), keep)
    if drop.size == 0:
        return beta[keep].copy()
    S11 = cov[np.ix_(keep, keep)]
    S12 = cov[np.ix_(keep, drop)]
    S22 = cov[np.ix_(drop, drop)]
    b2 = beta[drop]
    shift = np.linalg.solve(S11, S12 @ b2)
    tau2 = float(b2 @ (S22 - S12.T @ np.linalg.solve(S11, S12)) @ b2)
    return (beta[keep] + shift) / np.sqrt(1.0 + max(tau2, 0.0))
