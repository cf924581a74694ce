"""Coordinate ascent (CAVI) driver, schedules, traces and bias dynamics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from .core import MeanFieldState, NumericError, UsageError
from .models.base import Model

PARALLEL = "parallel"
SEQUENTIAL_RANDOMIZED = "sequential_randomized"
SEQUENTIAL_SYSTEMATIC = "sequential_systematic"
SCHEDULE_KINDS = (PARALLEL, SEQUENTIAL_RANDOMIZED, SEQUENTIAL_SYSTEMATIC)

DIVERGENCE_FACTOR = 1e6


@dataclass(frozen=True)
class Schedule:
    kind: str = SEQUENTIAL_SYSTEMATIC
    step_size: float = 1.0
    #: parallel only: refresh latent factors before the parameter blocks
    latents_first: bool = True

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise UsageError(f"unknown schedule kind {self.kind!r}")
        if not 0.0 < self.step_size <= 1.0:
            raise UsageError("step size must lie in (0, 1]")

    @property
    def sequential(self) -> bool:
        return self.kind != PARALLEL


@dataclass(frozen=True)
class StoppingRule:
    max_iterations: int = 1000
    elbo_abs_tolerance: float = 1e-10
    patience: int = 3

    def __post_init__(self):
        if self.max_iterations < 1:
            raise UsageError("max_iterations must be >= 1")
        if self.elbo_abs_tolerance < 0:
            raise UsageError("elbo_abs_tolerance must be >= 0")
        if self.patience < 1:
            raise UsageError("patience must be >= 1")


@dataclass
class ConvergenceTrace:
    """ELBO history of a fit.

    ``iterations`` holds the iteration count at which each ELBO value was
    recorded; iteration 0 is the initial state. One iteration is a single
    block update for sequential schedules and one full sweep for the
    parallel schedule.
    """

    elbo_per_iteration: List[float] = field(default_factory=list)
    iterations: List[int] = field(default_factory=list)
    regret_per_iteration: Optional[List[float]] = None
    kl_to_reference: Optional[List[float]] = None
    iterations_run: int = 0
    converged: bool = False
    diverged: bool = False

    def regret(self, reference_elbo: float) -> np.ndarray:
        return reference_elbo - np.asarray(self.elbo_per_iteration)


class DivergenceError(NumericError):
    """The ELBO became non-finite; carries the trace and last finite state."""

    def __init__(self, message: str, trace: ConvergenceTrace, state: MeanFieldState):
        super().__init__(message)
        self.trace = trace
        self.state = state


def default_budget(n: int, d: int, c: float = 10.0, kind: str = SEQUENTIAL_SYSTEMATIC) -> int:
    """Iteration budget ``c d log(n d)`` (sequential) or ``c log(n d)`` (parallel).

    Never below 10.
    """
    if n < 1 or d < 1:
        raise UsageError("n and d must be >= 1")
    if c <= 0:
        raise UsageError("c must be positive")
    scale = d if kind != PARALLEL else 1
    return max(10, int(math.ceil(c * scale * math.log(n * d))))


# ---------------------------------------------------------------------------
# single steps
# ---------------------------------------------------------------------------

def _check_gamma(gamma: float) -> None:
    if not 0.0 < gamma <= 1.0:
        raise UsageError("step size must lie in (0, 1]")


def _updated(model: Model, state: MeanFieldState, blocks, gamma: float):
    new = model.optima(state, blocks)
    if gamma == 1.0:
        return new
    old = {j: model.get_block(state, j) for j in blocks}
    return model.blends(blocks, old, new, gamma)


def step_sequential(model: Model, state: MeanFieldState, index: int, gamma: float = 1.0) -> MeanFieldState:
    """Update one block using the current values of all others."""
    _check_gamma(gamma)
    if not 0 <= index < model.n_blocks:
        raise UsageError(f"block index {index} out of range")
    return model.set_blocks(state, _updated(model, state, [index], gamma))


def step_parallel(model: Model, state: MeanFieldState, gamma: float = 1.0,
                  latents_first: bool = True) -> MeanFieldState:
    """Jacobi sweep: all parameter blocks are recomputed from the previous state.

    With ``latents_first`` (the default) the latent factors are first set to
    their full-step optimum given the previous parameter factors, and the
    parameter blocks are then updated simultaneously, with step ``gamma``,
    against the refreshed latents. Otherwise every block, latent or not, is
    recomputed from the previous state and damped by ``gamma``.
    """
    _check_gamma(gamma)
    latent = list(model.latent_blocks)
    params = list(model.parameter_blocks)
    if latents_first and latent:
        state_mid = model.set_blocks(state, _updated(model, state, latent, 1.0))
        return model.set_blocks(state_mid, _updated(model, state_mid, params, gamma))
    return model.set_blocks(state, _updated(model, state, latent + params, gamma))


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def run_cavi(model: Model, init: MeanFieldState, schedule: Schedule = Schedule(),
             stop: Optional[StoppingRule] = None, seed: int = 0,
             reference_elbo: Optional[float] = None,
             reference_state: Optional[MeanFieldState] = None,
             record_every: Optional[int] = None) -> Tuple[MeanFieldState, ConvergenceTrace]:
    """Run CAVI until the stopping rule fires or the budget is exhausted.

    ``record_every`` controls how often the ELBO is evaluated and checked for
    convergence; it defaults to one sweep (``model.n_blocks`` updates) for
    sequential schedules and 1 for the parallel schedule. Non-finite ELBO
    raises :class:`DivergenceError`; a regret blow-up by more than
    ``DIVERGENCE_FACTOR`` stops the run and flags ``trace.diverged``.
    """
    if stop is None:
        stop = StoppingRule(max_iterations=default_budget(max(model.n, 1), model.n_blocks,
                                                         kind=schedule.kind))
    if record_every is None:
        record_every = model.n_blocks if schedule.sequential else 1
    rng = np.random.default_rng(seed)
    gamma = schedule.step_size

    trace = ConvergenceTrace()
    if reference_elbo is not None:
        trace.regret_per_iteration = []
    if reference_state is not None:
        trace.kl_to_reference = []

    def record(state, it):
        value = model.elbo(state)
        trace.elbo_per_iteration.append(value)
        trace.iterations.append(it)
        if reference_elbo is not None:
            trace.regret_per_iteration.append(reference_elbo - value)
        if reference_state is not None:
            trace.kl_to_reference.append(model.kl_divergence(state, reference_state))
        return value

    state = init
    first = record(state, 0)
    best = first
    calm = 0
    last = first
    cursor = 0
    visited = set()
    for it in range(1, stop.max_iterations + 1):
        if schedule.kind == PARALLEL:
            new_state = step_parallel(model, state, gamma, schedule.latents_first)
        elif schedule.kind == SEQUENTIAL_RANDOMIZED:
            j = int(rng.integers(model.n_blocks))
            visited.add(j)
            new_state = step_sequential(model, state, j, gamma)
        else:
            new_state = step_sequential(model, state, cursor, gamma)
            cursor = (cursor + 1) % model.n_blocks
        trace.iterations_run = it
        if it % record_every and it != stop.max_iterations:
            state = new_state
            continue
        value = record(new_state, it)
        if not np.isfinite(value):
            trace.diverged = True
            raise DivergenceError(f"ELBO became non-finite at iteration {it}", trace, state)
        state = new_state
        if best - value > DIVERGENCE_FACTOR * max(1.0, abs(best - first)):
            trace.diverged = True
            return state, trace
        best = max(best, value)
        # a randomized window that missed some block says nothing about convergence
        covered = len(visited) == model.n_blocks or schedule.kind != SEQUENTIAL_RANDOMIZED
        if abs(value - last) >= stop.elbo_abs_tolerance:
            calm = 0
        elif covered:
            calm += 1
            if calm >= stop.patience:
                trace.converged = True
                return state, trace
        else:
            continue
        visited.clear()
        last = value
    return state, trace


def reference_optimum(model: Model, init: MeanFieldState, multiplier: int = 100,
                      tolerance: float = 0.0) -> Tuple[MeanFieldState, float]:
    """Approximate the CAVI optimum by a long sequential systematic run."""
    budget = multiplier * default_budget(max(model.n, 1), model.n_blocks)
    stop = StoppingRule(max_iterations=budget, elbo_abs_tolerance=tolerance, patience=3)
    state, trace = run_cavi(model, init, Schedule(SEQUENTIAL_SYSTEMATIC, 1.0), stop)
    return state, trace.elbo_per_iteration[-1]


# ---------------------------------------------------------------------------
# exact Gaussian bias dynamics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianDynamics:
    """Bias ``b = theta - theta_hat`` of mean-field CAVI on a Gaussian target.

    ``S_c`` (the diagonal of the complete-data information) replaces ``S`` in
    the updates when latent variables are present.
    """

    V: np.ndarray
    bias: np.ndarray
    S_c: Optional[np.ndarray] = None

    def __post_init__(self):
        V = np.asarray(self.V, dtype=float)
        if V.ndim != 2 or V.shape[0] != V.shape[1] or not np.allclose(V, V.T):
            raise UsageError("V must be a symmetric square matrix")
        np.linalg.cholesky(V)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=float))
        if self.S_c is not None:
            sc = np.asarray(self.S_c, dtype=float)
            sc = np.diag(sc) if sc.ndim == 2 else sc
            if np.any(sc <= 0):
                raise UsageError("S_c must be a positive diagonal")
            object.__setattr__(self, "S_c", sc)

    @property
    def S(self) -> np.ndarray:
        return np.diag(self.V).copy()

    @property
    def scaling(self) -> np.ndarray:
        """Diagonal used in the updates (``S_c`` if present, else ``S``)."""
        return self.S_c if self.S_c is not None else self.S

    def iteration_matrix(self, gamma: float) -> np.ndarray:
        """``A_gamma = I - gamma diag^{-1} V`` of the parallel scheme."""
        return np.eye(len(self.V)) - gamma * self.V / self.scaling[:, None]

    def regret(self, n: float = 1.0) -> float:
        """Quadratic regret ``(n/2) b' V b``."""
        return 0.5 * n * float(self.bias @ self.V @ self.bias)

    def with_bias(self, bias) -> "GaussianDynamics":
        return replace(self, bias=np.asarray(bias, dtype=float))


def gaussian_bias_step(dyn: GaussianDynamics, schedule: Schedule, seed: int = 0,
                       index: Optional[int] = None) -> GaussianDynamics:
    """One parallel sweep or one coordinate update of the bias recursion.

    For sequential schedules the coordinate is drawn uniformly from ``seed``
    unless ``index`` is given.
    """
    gamma = schedule.step_size
    b = dyn.bias
    if schedule.kind == PARALLEL:
        return dyn.with_bias(b - gamma * (dyn.V @ b) / dyn.scaling)
    if index is None:
        index = int(np.random.default_rng(seed).integers(len(b)))
    new = b.copy()
    new[index] = b[index] - gamma * float(dyn.V[index] @ b) / dyn.scaling[index]
    return dyn.with_bias(new)


def gaussian_bias_paths(V, b0, steps: int, runs: int, gamma: float = 1.0, seed: int = 0,
                        S_c=None) -> np.ndarray:
    """Regret ``(1/2) b' V b`` along many randomized sequential runs.

    Returns an array of shape ``(runs, steps + 1)``; each run draws its
    coordinates from its own stream split from ``seed``.
    """
    V = np.asarray(V, dtype=float)
    d = V.shape[0]
    scale = np.diag(V) if S_c is None else np.asarray(S_c, dtype=float)
    B = np.tile(np.asarray(b0, dtype=float), (runs, 1))
    rng = np.random.default_rng(seed)
    coords = rng.integers(d, size=(steps, runs))
    out = np.empty((runs, steps + 1))
    out[:, 0] = 0.5 * np.einsum("ri,ij,rj->r", B, V, B)
    rows = np.arange(runs)
    for t in range(steps):
        idx = coords[t]
        resid = np.einsum("ri,ri->r", V[idx], B)
        B[rows, idx] -= gamma * resid / scale[idx]
        out[:, t + 1] = 0.5 * np.einsum("ri,ij,rj->r", B, V, B)
    return out
