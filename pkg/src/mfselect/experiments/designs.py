"""Seeded synthetic data generators for the four model families."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np
from scipy import linalg

from ..core import UsageError

FAMILIES = ("normal", "gmm", "probit", "sbm")

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "normal": {"n": 10, "mu": 100.0, "sd": 100.0},
    "gmm": {"n": 100, "K": 3, "delta": 3.0, "sigma": 10.0, "balanced": True},
    "probit": {"n": 1000, "p": 10, "r": 0.0, "q": 0.8, "nonzero": 5, "signal": "sparse"},
    "sbm": {"n": 100, "K": 5, "within": 0.6, "between_max": 0.4},
}

_SIGNALS = ("sparse", "decay", "constant")


@dataclass(frozen=True)
class SyntheticDesign:
    """A data-generating recipe.

    ``parameters`` overrides the per-family defaults in :data:`DEFAULTS`.
    ``sigma`` of the gmm design is the prior scale used by the fitted
    model, not a data parameter; it rides along so one record describes an
    experiment.
    """

    family: str
    parameters: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise UsageError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        unknown = set(self.parameters) - set(DEFAULTS[self.family])
        if unknown:
            raise UsageError(f"unknown {self.family} parameters: {sorted(unknown)}")
        merged = dict(DEFAULTS[self.family])
        merged.update(self.parameters)
        object.__setattr__(self, "parameters", merged)
        p = merged
        for key in ("n", "K", "p", "nonzero"):
            if key in p and (int(p[key]) != p[key] or p[key] < 1):
                raise UsageError(f"{key} must be an integer >= 1")
        if self.family == "probit":
            if not 0.0 <= p["r"] < 1.0:
                raise UsageError("r must lie in [0, 1)")
            if not 0.0 < p["q"] <= 1.0:
                raise UsageError("q must lie in (0, 1]")
            if p["signal"] not in _SIGNALS:
                raise UsageError(f"signal must be one of {_SIGNALS}")
        if self.family == "normal" and not p["sd"] > 0:
            raise UsageError("sd must be positive")
        if self.family == "gmm" and not p["sigma"] > 0:
            raise UsageError("sigma must be positive")
        if self.family == "sbm":
            if p["K"] > p["n"]:
                raise UsageError("more communities than nodes")
            if not (0 <= p["within"] <= 1 and 0 <= p["between_max"] <= 1):
                raise UsageError("edge probabilities must lie in [0, 1]")

    def __getitem__(self, key):
        return self.parameters[key]


@dataclass
class Dataset:
    """Generated data with the ground truth that produced it."""

    family: str
    X: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None
    truth: Dict[str, Any] = field(default_factory=dict)


def ar1_covariance(p: int, r: float) -> np.ndarray:
    """``Sigma_ij = r^|i-j|``."""
    idx = np.arange(p)
    return r ** np.abs(idx[:, None] - idx[None, :]).astype(float)


def equicorrelated_covariance(p: int, rho: float) -> np.ndarray:
    """``Sigma_ij = rho + (1 - rho) 1(i = j)``."""
    return np.full((p, p), rho) + (1.0 - rho) * np.eye(p)


def probit_coefficients(p: int, q: float, nonzero: int = 5, signal: str = "sparse") -> np.ndarray:
    """Sparse ``q^{j-1} 1(j <= nonzero)``, decaying ``q^j`` or constant ``q``."""
    j = np.arange(1, p + 1)
    if signal == "sparse":
        return np.where(j <= nonzero, q ** (j - 1.0), 0.0)
    if signal == "decay":
        return q ** j.astype(float)
    if signal == "constant":
        return np.full(p, float(q))
    raise UsageError(f"unknown signal {signal!r}")


def gmm_centers(K: int, delta: float) -> np.ndarray:
    """``delta`` times the centred integer grid; ``(-1, 0, 1) delta`` for three components."""
    return delta * (np.arange(K) - (K - 1) / 2.0)


def sample_gaussian_features(n: int, cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    L = linalg.cholesky(cov, lower=True)
    return rng.standard_normal((n, cov.shape[0])) @ L.T


def generate(design: SyntheticDesign) -> Dataset:
    """Draw a dataset from ``design`` with ``numpy.random.default_rng(design.seed)``."""
    rng = np.random.default_rng(design.seed)
    p = design.parameters
    if design.family == "normal":
        x = rng.normal(p["mu"], p["sd"], int(p["n"]))
        return Dataset("normal", X=x, truth={"mu": p["mu"], "sigma2": p["sd"] ** 2})
    if design.family == "gmm":
        K, n = int(p["K"]), int(p["n"])
        centers = gmm_centers(K, p["delta"])
        # balanced labels match the fixed equal mixing weights exactly
        z = rng.permutation(np.arange(n) % K) if p["balanced"] else rng.integers(0, K, n)
        x = centers[z] + rng.standard_normal(n)
        return Dataset("gmm", X=x, truth={"centers": centers, "labels": z})
    if design.family == "probit":
        n, d = int(p["n"]), int(p["p"])
        cov = ar1_covariance(d, p["r"])
        X = sample_gaussian_features(n, cov, rng)
        beta = probit_coefficients(d, p["q"], int(p["nonzero"]), p["signal"])
        y = (X @ beta + rng.standard_normal(n) > 0).astype(float)
        return Dataset("probit", X=X, y=y, truth={"beta": beta, "covariance": cov})
    n, K = int(p["n"]), int(p["K"])
    B = np.triu(rng.uniform(0.0, p["between_max"], (K, K)), 1)
    B = B + B.T + p["within"] * np.eye(K)
    z = np.repeat(np.arange(K), -(-n // K))[:n]
    P = B[z[:, None], z[None, :]]
    upper = np.triu(rng.random((n, n)) < P, 1)
    A = (upper | upper.T).astype(float)
    return Dataset("sbm", X=A, truth={"B": B, "labels": z})


def probit_feature_covariance(design: SyntheticDesign) -> np.ndarray:
    if design.family != "probit":
        raise UsageError("feature covariance is defined only for probit designs")
    return ar1_covariance(int(design["p"]), design["r"])
