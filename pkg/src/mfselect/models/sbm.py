"""Stochastic block model with Beta connectivity priors and categorical labels."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from scipy import cluster, special

from ..core import (BetaFactor, CategoricalFactor, MeanFieldState, UsageError, digamma,
                    kl_beta, log_sum_exp, normalize_log_probs)
from .base import Model

BETA_BLOCK = 0


def _symmetric(value, K, name):
    m = np.broadcast_to(np.asarray(value, dtype=float), (K, K)).copy()
    if not np.allclose(m, m.T) or np.any(m <= 0):
        raise UsageError(f"{name} must be a positive symmetric K x K array")
    return m


@dataclass(frozen=True, eq=False)
class SbmModel(Model):
    """Undirected SBM ``A_ij ~ Ber(B_{Z_i Z_j})`` for ``i < j``.

    ``B_ab ~ Beta(alpha0_ab, beta0_ab)`` for ``a <= b`` and
    ``Z_i ~ Categorical(pi_prior_i)``. Block 0 holds the ``K x K`` symmetric
    Beta factor arrays; block ``i + 1`` holds row ``i`` of the label
    probabilities.
    """

    adjacency: np.ndarray
    communities: int = 2
    alpha0: object = 1.0
    beta0: object = 1.0
    pi_prior: Optional[np.ndarray] = None

    def __post_init__(self):
        A = np.asarray(self.adjacency, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise UsageError("adjacency must be square")
        if not np.array_equal(A, A.T) or np.any(np.diag(A) != 0) or not np.all(np.isin(A, (0, 1))):
            raise UsageError("adjacency must be symmetric binary with zero diagonal")
        K = self.communities
        if K < 1:
            raise UsageError("need at least one community")
        n = A.shape[0]
        pri = np.full((n, K), 1.0 / K) if self.pi_prior is None else np.broadcast_to(
            np.asarray(self.pi_prior, dtype=float), (n, K)).copy()
        if np.any(pri <= 0) or not np.allclose(pri.sum(axis=1), 1.0, atol=1e-12):
            raise UsageError("prior label probabilities must be positive with rows summing to 1")
        for name, val in (("adjacency", A), ("alpha0", _symmetric(self.alpha0, K, "alpha0")),
                          ("beta0", _symmetric(self.beta0, K, "beta0")), ("pi_prior", pri)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def K(self) -> int:
        return self.communities

    @property
    def n_blocks(self) -> int:
        return self.n + 1

    @property
    def latent_blocks(self):
        return tuple(range(1, self.n + 1))

    @property
    def n_parameters(self) -> int:
        return self.K * (self.K + 1) // 2

    def initial_state(self, seed: Optional[int] = 0, jitter: float = 0.5,
                      method: str = "random") -> MeanFieldState:
        """Seeded starting state with the Beta factors at their optimum given the labels.

        ``method="random"`` perturbs the prior label probabilities with
        Gaussian logit jitter. ``method="spectral"`` clusters the leading
        eigenvectors of the adjacency matrix and puts most of each row's mass
        on its cluster; the random start tends to fall into the saddle where
        every label row equals the prior, the spectral one does not.
        Fitting ``B`` to the labels keeps the start asymmetric under every
        schedule, including a parallel sweep that refreshes labels first.
        """
        rng = np.random.default_rng(seed)
        logits = np.log(self.pi_prior) + jitter * rng.standard_normal((self.n, self.K))
        if method == "spectral":
            logits = logits + 3.0 * np.eye(self.K)[self.spectral_labels(seed)]
        elif method != "random":
            raise UsageError(f"unknown initialization {method!r}")
        state = MeanFieldState((BetaFactor(self.alpha0, self.beta0),),
                               (CategoricalFactor(normalize_log_probs(logits)),))
        return self.set_blocks(state, {BETA_BLOCK: self.optimum(state, BETA_BLOCK)})

    def spectral_labels(self, seed: Optional[int] = 0) -> np.ndarray:
        """Hard labels from k-means on the ``K`` largest-magnitude adjacency eigenvectors."""
        if self.K == 1 or self.n <= self.K:
            return np.arange(self.n) % self.K
        w, U = np.linalg.eigh(self.adjacency)
        X = U[:, np.argsort(-np.abs(w))[:self.K]]
        _, labels = cluster.vq.kmeans2(X, self.K, minit="++", seed=np.random.default_rng(seed))
        return labels

    def get_block(self, state, j):
        if j == BETA_BLOCK:
            return state.parameter_factors[0]
        return state.latent_factors[0].probabilities[j - 1]

    def set_blocks(self, state, values: Dict[int, object]):
        params = list(state.parameter_factors)
        if BETA_BLOCK in values:
            params[0] = values[BETA_BLOCK]
        rows = {j - 1: v for j, v in values.items() if j != BETA_BLOCK}
        latent = state.latent_factors
        if rows:
            pi = np.array(state.latent_factors[0].probabilities)
            for i, v in rows.items():
                pi[i] = v
            latent = (CategoricalFactor(pi),)
        return MeanFieldState(params, latent)

    # -- expected counts -------------------------------------------------------

    def _pair_counts(self, pi):
        """Expected edge and non-edge counts between labels, ``a <= b`` convention."""
        A = self.adjacency
        edges = pi.T @ A @ pi
        col = pi.sum(axis=0)
        pairs = np.outer(col, col) - pi.T @ pi
        non_edges = pairs - edges
        half = np.where(np.eye(self.K, dtype=bool), 0.5, 1.0)
        return edges * half, non_edges * half

    def _label_logits(self, state, rows=None) -> np.ndarray:
        q = state.parameter_factors[0]
        elog, elog1m = q.mean_log(), q.mean_log1m()
        pi = state.latent_factors[0].probabilities
        A = self.adjacency if rows is None else self.adjacency[rows]
        pri = self.pi_prior if rows is None else self.pi_prior[rows]
        own = pi if rows is None else pi[rows]
        m1 = A @ pi
        m0 = pi.sum(axis=0)[None, :] - own - m1
        return np.log(pri) + m1 @ elog.T + m0 @ elog1m.T

    def optimum(self, state, j):
        if j == BETA_BLOCK:
            e, ne = self._pair_counts(state.latent_factors[0].probabilities)
            return BetaFactor(self.alpha0 + e, self.beta0 + ne)
        i = j - 1
        if not 0 <= i < self.n:
            raise UsageError(f"block index {j} out of range")
        return normalize_log_probs(self._label_logits(state, rows=[i])[0])

    def optima(self, state, blocks):
        blocks = list(blocks)
        nodes = [j for j in blocks if j != BETA_BLOCK]
        out = {}
        if len(nodes) > 1:
            rows = np.array(nodes) - 1
            new = normalize_log_probs(self._label_logits(state, rows=rows))
            out.update({j: new[k] for k, j in enumerate(nodes)})
        elif nodes:
            out[nodes[0]] = self.optimum(state, nodes[0])
        if BETA_BLOCK in blocks:
            out[BETA_BLOCK] = self.optimum(state, BETA_BLOCK)
        return out

    def blend(self, j, old, new, gamma):
        if j == BETA_BLOCK:
            return BetaFactor((1 - gamma) * old.alpha + gamma * new.alpha,
                              (1 - gamma) * old.beta + gamma * new.beta)
        lo = np.log(np.maximum(old, 1e-300))
        ln = np.log(np.maximum(new, 1e-300))
        return normalize_log_probs((1 - gamma) * lo + gamma * ln)

    # -- ELBO ---------------------------------------------------------------

    def elbo(self, state) -> float:
        return sbm_elbo(self, state)

    closed_form_elbo = elbo

    def kl_divergence(self, state, other) -> float:
        iu = np.triu_indices(self.K)
        p, q = state.parameter_factors[0], other.parameter_factors[0]
        kl = float(np.sum(kl_beta(p.alpha[iu], p.beta[iu], q.alpha[iu], q.beta[iu])))
        a, b = state.latent_factors[0], other.latent_factors[0]
        return kl + float(np.sum(a.probabilities * (a.log_probabilities() - b.log_probabilities())))

    # -- plug-in likelihood and exact evidence ---------------------------------

    def plugin_loglik(self, state) -> float:
        """``sum_{i<j} log sum_ab pi_ia pi_jb Ber(A_ij; B_ab)`` at the variational mean of ``B``."""
        B = state.parameter_factors[0].mean()
        pi = state.latent_factors[0].probabilities
        P = pi @ B @ pi.T
        P = np.clip(P, 1e-300, 1 - 1e-16)
        iu = np.triu_indices(self.n, 1)
        a = self.adjacency[iu]
        p = P[iu]
        return float(np.sum(np.where(a == 1, np.log(p), np.log1p(-p))))

    def label_configurations(self, max_configs: int = 3 ** 12):
        """All ``K^n`` labellings with their prior log-probabilities."""
        n, K = self.n, self.K
        if K ** n > max_configs:
            raise UsageError(f"exact enumeration needs K^n <= {max_configs}")
        Z = np.array(list(itertools.product(range(K), repeat=n)), dtype=int).reshape(-1, n)
        logp = np.log(self.pi_prior)[np.arange(n)[None, :], Z].sum(axis=1)
        return Z, logp

    def block_counts(self, Z):
        """Edge and pair counts per ``a <= b`` for each labelling row of ``Z``."""
        K = self.K
        onehot = np.eye(K)[Z]
        edges = np.einsum("cia,ij,cjb->cab", onehot, self.adjacency, onehot)
        sizes = onehot.sum(axis=1)
        pairs = sizes[:, :, None] * sizes[:, None, :] - np.eye(K)[None] * sizes[:, :, None]
        half = np.where(np.eye(K, dtype=bool), 0.5, 1.0)
        iu = np.triu_indices(K)
        return (edges * half)[:, iu[0], iu[1]], (pairs * half)[:, iu[0], iu[1]]

    def exact_log_evidence(self) -> float:
        """``log p(A)`` by summing over labellings and integrating ``B`` in closed form."""
        Z, logp = self.label_configurations()
        e, pairs = self.block_counts(Z)
        iu = np.triu_indices(self.K)
        a0, b0 = self.alpha0[iu], self.beta0[iu]
        terms = np.sum(special.betaln(a0 + e, b0 + pairs - e) - special.betaln(a0, b0), axis=1)
        return log_sum_exp(logp + terms)

    def sample_prior(self, size: int, rng: np.random.Generator) -> np.ndarray:
        iu = np.triu_indices(self.K)
        return rng.beta(self.alpha0[iu], self.beta0[iu], size=(size, iu[0].size))


def sbm_update(model: SbmModel, state: MeanFieldState, target) -> MeanFieldState:
    """Update ``"edges"`` (all Beta factors) or the labels of node ``target``."""
    if target == "edges":
        j = BETA_BLOCK
    else:
        i = int(target)
        if not 0 <= i < model.n:
            raise UsageError(f"node {i} out of range")
        j = i + 1
    return model.set_blocks(state, {j: model.optimum(state, j)})


def sbm_elbo(model: SbmModel, state: MeanFieldState) -> float:
    """Closed-form SBM ELBO; valid for any state.

    The pair term uses ``E log(1 - B_ab) = psi(beta_ab) - psi(alpha_ab + beta_ab)``.
    """
    q = state.parameter_factors[0]
    iu = np.triu_indices(model.K)
    kl = np.sum(kl_beta(q.alpha[iu], q.beta[iu], model.alpha0[iu], model.beta0[iu]))
    cat = state.latent_factors[0]
    pi = cat.probabilities
    label = np.sum(pi * (np.log(model.pi_prior) - cat.log_probabilities()))
    e, ne = model._pair_counts(pi)
    d_ab = digamma(q.alpha + q.beta)
    pair = np.sum((e * (digamma(q.alpha) - d_ab) + ne * (digamma(q.beta) - d_ab))[iu])
    return float(-kl + label + pair)
