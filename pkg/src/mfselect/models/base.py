"""Shared model interface and the Fisher information bundle."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from ..core import MeanFieldState, NumericError


class Model:
    """Base class for a model family instance with closed-form CAVI updates.

    A model exposes its variational coordinates as ``n_blocks`` blocks. Each
    block has a *value* (the variational parameters of that block) that can
    be read with :meth:`get_block`, recomputed at its coordinate optimum with
    :meth:`optimum`, blended with a step size with :meth:`blend`, and written
    back with :meth:`set_blocks`. ``latent_blocks`` lists the blocks that
    hold local latent-variable factors.
    """

    n_blocks: int = 0
    latent_blocks: Tuple[int, ...] = ()
    #: number of observations, used for budgets and BIC
    n: int = 0

    def initial_state(self, seed: Optional[int] = None) -> MeanFieldState:
        raise NotImplementedError

    def get_block(self, state: MeanFieldState, j: int):
        raise NotImplementedError

    def set_blocks(self, state: MeanFieldState, values: Dict[int, object]) -> MeanFieldState:
        raise NotImplementedError

    def optimum(self, state: MeanFieldState, j: int):
        raise NotImplementedError

    def optima(self, state: MeanFieldState, blocks: Iterable[int]) -> Dict[int, object]:
        """Optimum of several blocks, each computed from the same ``state``."""
        return {j: self.optimum(state, j) for j in blocks}

    def blend(self, j: int, old, new, gamma: float):
        """Weighted geometric average ``new**gamma * old**(1-gamma)``."""
        raise NotImplementedError

    def blends(self, blocks: Iterable[int], old: Dict[int, object],
               new: Dict[int, object], gamma: float) -> Dict[int, object]:
        return {j: self.blend(j, old[j], new[j], gamma) for j in blocks}

    def elbo(self, state: MeanFieldState) -> float:
        raise NotImplementedError

    def kl_divergence(self, state: MeanFieldState, other: MeanFieldState) -> float:
        raise NotImplementedError(f"{type(self).__name__} has no closed-form state KL")

    @property
    def parameter_blocks(self) -> Tuple[int, ...]:
        return tuple(j for j in range(self.n_blocks) if j not in self.latent_blocks)


@dataclass(frozen=True)
class FisherBundle:
    """Information matrices at ``theta_star``.

    ``V`` is the observed-data information, ``V_s`` the missing-data
    information and ``V_c = V + V_s`` the complete-data information, all per
    observation.
    """

    V: np.ndarray
    V_s: np.ndarray
    V_c: np.ndarray
    theta_star: np.ndarray
    prior_log_density_at_theta_star: float
    source: str = "analytic"
    samples: Optional[int] = None
    seed: Optional[int] = None
    #: Monte Carlo standard errors of the entries of ``V`` (zeros when analytic)
    V_stderr: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        for name in ("V", "V_s", "V_c"):
            m = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            object.__setattr__(self, name, 0.5 * (m + m.T))
        object.__setattr__(self, "theta_star", np.atleast_1d(np.asarray(self.theta_star, dtype=float)))
        try:
            np.linalg.cholesky(self.V)
        except np.linalg.LinAlgError as exc:
            hint = " (increase the Monte Carlo sample size)" if self.source != "analytic" else ""
            raise NumericError("information matrix V is not positive definite" + hint) from exc

    @property
    def S(self) -> np.ndarray:
        return np.diag(np.diag(self.V))

    @property
    def S_c(self) -> np.ndarray:
        return np.diag(np.diag(self.V_c))

    @property
    def dim(self) -> int:
        return self.V.shape[0]

    @property
    def has_latent(self) -> bool:
        return bool(np.any(self.V_s != 0))
