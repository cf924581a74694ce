"""Mean-field approximation of a fixed multivariate normal target."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from ..core import GaussianFactor, MeanFieldState, MultivariateGaussianFactor, UsageError, kl_gaussian
from .base import Model


@dataclass(frozen=True, eq=False)
class GaussianTarget(Model):
    """Target ``N(theta_hat, (n V)^{-1})`` approximated by ``prod_j N(m_j, v_j)``.

    Each coordinate is one block and the ELBO is ``-KL(q || target)``, so
    the CAVI mean iterates follow the bias recursion exactly.
    """

    V: np.ndarray
    theta_hat: Optional[np.ndarray] = None
    scale: float = 1.0

    def __post_init__(self):
        V = np.atleast_2d(np.asarray(self.V, dtype=float))
        if V.shape[0] != V.shape[1] or not np.allclose(V, V.T):
            raise UsageError("V must be symmetric and square")
        try:
            np.linalg.cholesky(V)
        except np.linalg.LinAlgError as exc:
            raise UsageError("V must be positive definite") from exc
        th = np.zeros(V.shape[0]) if self.theta_hat is None else np.asarray(self.theta_hat, dtype=float)
        for name, val in (("V", V), ("theta_hat", th)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def d(self) -> int:
        return self.V.shape[0]

    @property
    def n(self) -> int:
        return max(int(round(self.scale)), 1)

    @property
    def n_blocks(self) -> int:
        return self.d

    @property
    def precision(self) -> np.ndarray:
        return self.scale * self.V

    def state_from_bias(self, bias) -> MeanFieldState:
        """State with means ``theta_hat + bias`` and optimal variances."""
        m = self.theta_hat + np.asarray(bias, dtype=float)
        v = 1.0 / np.diag(self.precision)
        return MeanFieldState(tuple(GaussianFactor(m[j], v[j]) for j in range(self.d)))

    def initial_state(self, seed: Optional[int] = None, bias=None) -> MeanFieldState:
        return self.state_from_bias(np.ones(self.d) if bias is None else bias)

    def means(self, state) -> np.ndarray:
        return np.array([float(f.mean) for f in state.parameter_factors])

    def bias(self, state) -> np.ndarray:
        return self.means(state) - self.theta_hat

    def get_block(self, state, j):
        return state.parameter_factors[j]

    def set_blocks(self, state, values: Dict[int, object]):
        f = list(state.parameter_factors)
        for j, v in values.items():
            f[j] = v
        return MeanFieldState(f)

    def optimum(self, state, j):
        P = self.precision
        b = self.bias(state)
        shift = (P[j] @ b - P[j, j] * b[j]) / P[j, j]
        return GaussianFactor(self.theta_hat[j] - shift, 1.0 / P[j, j])

    def optima(self, state, blocks):
        P = self.precision
        b = self.bias(state)
        diag = np.diag(P)
        new = self.theta_hat - (P @ b - diag * b) / diag
        return {j: GaussianFactor(new[j], 1.0 / diag[j]) for j in blocks}

    def blend(self, j, old, new, gamma):
        e1o, e2o = old.natural()
        e1n, e2n = new.natural()
        return GaussianFactor.from_natural((1 - gamma) * e1o + gamma * e1n,
                                           (1 - gamma) * e2o + gamma * e2n)

    def _as_mvn(self, state):
        m = self.means(state)
        v = np.array([float(f.variance) for f in state.parameter_factors])
        return MultivariateGaussianFactor(m, np.diag(v))

    def elbo(self, state) -> float:
        target = MultivariateGaussianFactor(self.theta_hat, np.linalg.inv(self.precision))
        return -kl_gaussian(self._as_mvn(state), target)

    def kl_divergence(self, state, other) -> float:
        return kl_gaussian(self._as_mvn(state), self._as_mvn(other))

    def optimal_elbo(self) -> float:
        """``-(1/2) log det(diag V) / det V``, the ELBO at the mean-field optimum."""
        _, logdet = np.linalg.slogdet(self.V)
        return -0.5 * (np.sum(np.log(np.diag(self.V))) - logdet)
