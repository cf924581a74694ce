"""Experiment runners producing deterministic tables (lists of row dicts).

Every runner derives an independent seed per task from the design seed and
the task keys, so rows do not depend on the number of worker threads.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from ..core import NumericError, UsageError, norm_cdf
from ..engine import (PARALLEL, SEQUENTIAL_SYSTEMATIC, DivergenceError, Schedule, StoppingRule,
                      reference_optimum, run_cavi)
from ..evidence import SBM_MAX_COMMUNITIES, SBM_MAX_NODES, mc_evidence
from ..models import (BLOCK, GmmModel, NormalModel, ProbitModel, SbmModel, probit_fisher_bundle,
                      probit_projection)
from ..selection import CriterionValue, aic, bic, gap_constants, penalized_criteria, select
from .designs import Dataset, SyntheticDesign, generate

CRITERIA = ("elbo", "bic", "aic", "penalized_elbo", "extended_bic", "evidence")
PREDICTION_CRITERIA = ("elbo", "aic", "bic")
PROB_CLAMP = 1e-12

NORMAL_PRIOR = {"mu0": 0.0, "sigma0_sq": 100.0 ** 2, "a": 0.01, "b": 0.01}


def task_seed(base: int, *keys: int) -> int:
    """Independent 32-bit seed for the task identified by ``keys``."""
    return int(np.random.SeedSequence([int(base) & 0xFFFFFFFF, *[int(k) for k in keys]]).generate_state(1)[0])


def parallel_map(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """``[fn(x) for x in items]`` on a thread pool, results in input order."""
    if threads < 1:
        raise UsageError("threads must be >= 1")
    if threads == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# model construction and fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitOptions:
    """Model hyperparameters and CAVI settings shared by the runners.

    ``prior_scale`` is the prior standard deviation of the GMM centres or the
    probit coefficients; for the normal model it sets ``mu ~ N(0, s^2)`` and
    ``sigma^2 ~ IG(1/s, 1/s)``. ``None`` means the family default.
    """

    prior_scale: Optional[float] = None
    factorization: str = BLOCK
    schedule: str = SEQUENTIAL_SYSTEMATIC
    step_size: float = 1.0
    max_iterations: int = 20_000
    tolerance: float = 1e-9
    em_restarts: int = 20
    #: SBM only: seeded label initialisations; the fit with the largest ELBO is kept
    sbm_restarts: int = 5


def normal_prior(scale: Optional[float]) -> Dict[str, float]:
    if scale is None:
        return dict(NORMAL_PRIOR)
    if not scale > 0:
        raise UsageError("prior scale must be positive")
    return {"mu0": 0.0, "sigma0_sq": scale ** 2, "a": 1.0 / scale, "b": 1.0 / scale}


def build_model(dataset: Dataset, candidate: Optional[int] = None, options: FitOptions = FitOptions(),
                design: Optional[SyntheticDesign] = None):
    """Zoo model for ``dataset``; ``candidate`` is K (gmm, sbm) or the number of leading features (probit)."""
    fam = dataset.family
    if fam == "normal":
        return NormalModel(dataset.X, **normal_prior(options.prior_scale))
    if fam == "gmm":
        K = candidate if candidate is not None else (design["K"] if design else 2)
        sd = options.prior_scale if options.prior_scale is not None else (design["sigma"] if design else 10.0)
        return GmmModel(dataset.X, int(K), float(sd))
    if fam == "probit":
        X = np.atleast_2d(dataset.X)
        k = X.shape[1] if candidate is None else int(candidate)
        if not 1 <= k <= X.shape[1]:
            raise UsageError(f"model size {k} outside 1..{X.shape[1]}")
        sd = 10.0 if options.prior_scale is None else options.prior_scale
        return ProbitModel(X[:, :k], dataset.y, sd ** 2 * np.eye(k), factorization=options.factorization)
    if fam == "sbm":
        K = candidate if candidate is not None else (design["K"] if design else 2)
        return SbmModel(dataset.X, int(K))
    raise UsageError(f"unknown family {fam!r}")


def initial_state(model, seed: int = 0, centers=None, method: str = "random"):
    if isinstance(model, GmmModel):
        return model.initial_state(seed, centers=centers)
    if isinstance(model, SbmModel):
        return model.initial_state(seed, method=method)
    return model.initial_state()


@dataclass
class Fit:
    model: object
    state: object
    elbo: float
    iterations: int
    converged: bool
    loglik_max: float
    theta_hat: np.ndarray
    d_M: int
    n_bic: int


def fit(model, options: FitOptions = FitOptions(), seed: int = 0) -> Fit:
    """CAVI fit plus the maximum likelihood needed for BIC and AIC.

    GMM fits start CAVI at the EM centres. SBM fits use the parallel full-step
    scheme from one spectral and several random seeded starts, and the
    plug-in likelihood at the variational mean.
    """
    centers = None
    if isinstance(model, GmmModel):
        centers, ll = model.mle(restarts=options.em_restarts, seed=seed)
    schedule = Schedule(PARALLEL, 1.0) if isinstance(model, SbmModel) else Schedule(
        options.schedule, options.step_size)
    stop = StoppingRule(options.max_iterations, options.tolerance)
    starts = [seed]
    if isinstance(model, SbmModel):
        starts = [task_seed(seed, r) for r in range(max(1, options.sbm_restarts))]
    best = None
    for r, s0 in enumerate(starts):
        # the first SBM start is spectral, the rest are random restarts
        init = initial_state(model, s0, centers, "spectral" if r == 0 else "random")
        state, trace = run_cavi(model, init, schedule, stop, seed=s0)
        if best is None or trace.elbo_per_iteration[-1] > best[1].elbo_per_iteration[-1]:
            best = (state, trace)
    state, trace = best
    if trace.diverged:
        raise NumericError("CAVI diverged; lower the step size or use a sequential schedule")
    if isinstance(model, SbmModel):
        theta, ll = state.parameter_factors[0].mean(), model.plugin_loglik(state)
        # BIC counts the n(n-1)/2 observed edge indicators as the sample size
        d_M, n_bic = model.n_parameters, model.n * (model.n - 1) // 2
    elif isinstance(model, GmmModel):
        theta, d_M, n_bic = centers, model.K, model.n
    else:
        theta, ll = model.mle()
        d_M = 2 if isinstance(model, NormalModel) else model.d
        n_bic = model.n
    return Fit(model, state, float(trace.elbo_per_iteration[-1]), trace.iterations_run,
               trace.converged, float(ll), np.asarray(theta), int(d_M), int(n_bic))


def evidence_available(model) -> bool:
    if isinstance(model, SbmModel):
        return model.n <= SBM_MAX_NODES and model.K <= SBM_MAX_COMMUNITIES
    return True


# ---------------------------------------------------------------------------
# convergence curves
# ---------------------------------------------------------------------------

CONVERGENCE_COLUMNS = ("family", "schedule", "step_size", "iteration", "elbo", "regret",
                       "kl_to_reference", "converged", "diverged")


def run_convergence(design: SyntheticDesign, grid: Sequence[Tuple[str, float]],
                    options: FitOptions = FitOptions(), iterations: int = 200, seed: int = 0,
                    threads: int = 1, timing: bool = False, model_factory=None) -> List[dict]:
    """ELBO regret and KL to a reference optimum per sweep for each ``(schedule, gamma)``.

    Iterations count full sweeps for every schedule. ``timing`` adds a
    cumulative ``wall_time`` column; it is off by default because timings
    break byte-identical reruns.
    """
    if not grid:
        raise UsageError("the schedule grid is empty")
    data = generate(design)
    model = model_factory(data) if model_factory else build_model(data, None, options, design)
    init = initial_state(model, seed)
    ref_state, ref_elbo = reference_optimum(model, init)

    def one(cfg):
        kind, gamma = cfg
        schedule = Schedule(kind, float(gamma))
        per = model.n_blocks if schedule.sequential else 1
        stop = StoppingRule(max_iterations=iterations * per, elbo_abs_tolerance=0.0)
        t0 = time.perf_counter()
        try:
            _, trace = run_cavi(model, init, schedule, stop, seed=task_seed(seed, len(kind), int(gamma * 1e6)),
                                reference_elbo=ref_elbo, reference_state=ref_state, record_every=per)
        except DivergenceError as err:
            trace = err.trace
        wall = time.perf_counter() - t0
        rows = []
        count = len(trace.elbo_per_iteration)
        for i in range(count):
            kl = trace.kl_to_reference[i] if i < len(trace.kl_to_reference) else float("nan")
            row = {"family": design.family, "schedule": kind, "step_size": float(gamma),
                   "iteration": trace.iterations[i] // per, "elbo": trace.elbo_per_iteration[i],
                   "regret": trace.regret_per_iteration[i], "kl_to_reference": kl,
                   "converged": int(trace.converged), "diverged": int(trace.diverged)}
            if timing:
                row["wall_time"] = wall * (i + 1) / count
            rows.append(row)
        return rows

    return [r for rows in parallel_map(one, list(grid), threads) for r in rows]


# ---------------------------------------------------------------------------
# gaps between evidence, ELBO and BIC
# ---------------------------------------------------------------------------

GAP_COLUMNS = ("family", "grid", "value", "n", "prior_scale", "model_size", "elbo", "loglik_max",
               "bic", "neg_half_bic", "bic_elbo_gap", "log_evidence", "evidence_stderr",
               "rel_error_elbo", "rel_error_bic", "c_star", "c_bic_star", "c_tilde_star",
               "c_block_star", "c_tilde_block_star")


def _theory(design: SyntheticDesign, model, options: FitOptions, fisher_samples: int, seed: int):
    """Gap constants at the KL projection for the fitted model, or ``None``."""
    fam = design.family
    if fam == "normal":
        bundle = model.fisher_bundle((design["mu"], design["sd"] ** 2))
        return gap_constants(bundle)
    if fam == "gmm":
        from .designs import gmm_centers
        if model.K != design["K"]:
            return None
        bundle = model.fisher_bundle(gmm_centers(design["K"], design["delta"]), samples=fisher_samples,
                                     seed=seed)
        return gap_constants(bundle)
    if fam == "probit":
        from .designs import ar1_covariance, probit_coefficients
        p = int(design["p"])
        cov = ar1_covariance(p, design["r"])
        beta = probit_coefficients(p, design["q"], int(design["nonzero"]), design["signal"])
        k = model.d
        theta = probit_projection(beta, cov, np.arange(k))
        bundle = probit_fisher_bundle(theta, model.prior_covariance, feature_cov=cov[:k, :k],
                                      samples=fisher_samples, seed=seed)
        return gap_constants(bundle, block_sizes=[k])
    return None


def run_gaps(design: SyntheticDesign, grid: str, values: Sequence[float],
             options: FitOptions = FitOptions(), model_size: Optional[int] = None,
             evidence_samples: int = 10 ** 5, fisher_samples: int = 10 ** 5, seed: int = 0,
             threads: int = 1) -> List[dict]:
    """ELBO, BIC, Monte Carlo evidence and theoretical constants over an ``n`` or prior grid.

    ``grid="n"`` regenerates the data at each sample size; ``grid="prior"``
    keeps the data and varies the prior scale (see :class:`FitOptions`).
    ``evidence_samples=0`` skips the evidence.
    """
    if grid not in ("n", "prior"):
        raise UsageError("grid must be 'n' or 'prior'")
    if not values:
        raise UsageError("the grid is empty")
    bundle_cache: Dict[Tuple, object] = {}

    def one(item):
        idx, v = item
        des, opts = design, options
        if grid == "n":
            n = int(v)
            if n < 1:
                raise UsageError("sample sizes must be >= 1")
            des = SyntheticDesign(design.family, {**design.parameters, "n": n}, design.seed)
        else:
            opts = replace(options, prior_scale=float(v))
            if design.family == "gmm" and opts.prior_scale is not None:
                des = SyntheticDesign("gmm", {**design.parameters, "sigma": float(v)}, design.seed)
        data = generate(des)
        model = build_model(data, model_size, opts, des)
        f = fit(model, opts, seed=task_seed(seed, idx))
        b = bic(f.loglik_max, f.d_M, f.n_bic)
        if evidence_samples > 0 and evidence_available(model):
            ev = mc_evidence(model, evidence_samples, task_seed(seed, idx, 1), warn=False)
            log_ev, se = ev.log_evidence, ev.stderr_log
        else:
            log_ev = se = float("nan")
        key = (opts.prior_scale, model_size)
        if key not in bundle_cache:
            bundle_cache[key] = _theory(des, model, opts, fisher_samples, seed)
        g = bundle_cache[key]
        scale = opts.prior_scale
        if scale is None:
            scale = {"normal": 100.0, "gmm": des.parameters.get("sigma"), "probit": 10.0}.get(des.family,
                                                                                       float("nan"))
        row = {"family": des.family, "grid": grid, "value": float(v), "n": f.n_bic,
               "prior_scale": scale, "model_size": f.d_M, "elbo": f.elbo, "loglik_max": f.loglik_max,
               "bic": b, "neg_half_bic": -b / 2, "bic_elbo_gap": -b / 2 - f.elbo,
               "log_evidence": log_ev, "evidence_stderr": se,
               "rel_error_elbo": (f.elbo - log_ev) / abs(log_ev),
               "rel_error_bic": (-b / 2 - log_ev) / abs(log_ev)}
        for name in ("c_star", "c_bic_star", "c_tilde_star", "c_block_star", "c_tilde_block_star"):
            val = getattr(g, name) if g is not None else None
            row[name] = float("nan") if val is None else val
        return row

    # theory constants are cached per prior scale; compute serially to keep the cache deterministic
    items = list(enumerate(values))
    if threads > 1:
        first = one(items[0])
        return [first] + parallel_map(one, items[1:], threads)
    return [one(x) for x in items]


# ---------------------------------------------------------------------------
# model selection
# ---------------------------------------------------------------------------

SELECTION_COLUMNS = ("family", "seed", "candidate", "d_M", "n", "elbo", "loglik_max", "bic", "aic",
                     "penalized_elbo", "extended_bic", "log_evidence", "evidence_stderr",
                     "converged") + tuple(f"selected_{c}" for c in CRITERIA)


@dataclass
class SelectionReport:
    """Per-candidate criterion values and the winner under each criterion."""

    values: List[CriterionValue]
    selected: Dict[str, object] = field(default_factory=dict)
    converged: Dict[object, bool] = field(default_factory=dict)


def log_model_prior(family: str, candidate: int, total: int) -> float:
    """Uniform over sizes for mixtures and SBMs; ``-log C(p, k)`` for variable selection."""
    if family == "probit":
        return -float(special.gammaln(total + 1) - special.gammaln(candidate + 1)
                      - special.gammaln(total - candidate + 1))
    return 0.0


def select_models(data: Dataset, candidates: Sequence[int], options: FitOptions = FitOptions(),
                  evidence_samples: int = 0, seed: int = 0, design: Optional[SyntheticDesign] = None
                  ) -> SelectionReport:
    if not candidates:
        raise UsageError("no candidates")
    if data.family == "normal":
        raise UsageError("the normal family has a single model; nothing to select")
    values = []
    conv = {}
    total = np.atleast_2d(data.X).shape[1] if data.family == "probit" else 0
    for c in candidates:
        model = build_model(data, int(c), options, design)
        f = fit(model, options, seed=seed)
        b = bic(f.loglik_max, f.d_M, f.n_bic)
        pe, eb = penalized_criteria(f.elbo, b, log_model_prior(data.family, int(c), total))
        ev = None
        if evidence_samples > 0 and evidence_available(model):
            est = mc_evidence(model, evidence_samples, task_seed(seed, int(c)), warn=False)
            ev = (est.log_evidence, est.stderr_log)
        values.append(CriterionValue(int(c), f.elbo, b, aic(f.loglik_max, f.d_M), f.d_M, f.n_bic,
                                     penalized_elbo=pe, extended_bic=eb, mc_evidence=ev))
        conv[int(c)] = f.converged
    selected = {}
    for crit in CRITERIA:
        if crit == "evidence" and any(v.mc_evidence is None for v in values):
            continue
        selected[crit] = select(values, crit)
    return SelectionReport(values, selected, conv)


def run_selection(designs: Sequence[SyntheticDesign], candidates: Sequence[int],
                  options: FitOptions = FitOptions(), evidence_samples: int = 0, seed: int = 0,
                  threads: int = 1) -> List[dict]:
    """All criteria per candidate and the selected candidate per criterion, for each design."""
    def one(des):
        data = generate(des)
        rep = select_models(data, candidates, options, evidence_samples, task_seed(seed, des.seed), des)
        rows = []
        for v in rep.values:
            row = {"family": des.family, "seed": des.seed, "candidate": v.model_id, "d_M": v.d_M,
                   "n": v.n, "elbo": v.elbo, "loglik_max": (v.aic - 2 * v.d_M) / -2.0, "bic": v.bic,
                   "aic": v.aic, "penalized_elbo": v.penalized_elbo, "extended_bic": v.extended_bic,
                   "log_evidence": v.mc_evidence[0] if v.mc_evidence else float("nan"),
                   "evidence_stderr": v.mc_evidence[1] if v.mc_evidence else float("nan"),
                   "converged": int(rep.converged[v.model_id])}
            for crit in CRITERIA:
                row[f"selected_{crit}"] = int(rep.selected.get(crit) == v.model_id) if crit in rep.selected else ""
            rows.append(row)
        return rows

    return [r for rows in parallel_map(one, list(designs), threads) for r in rows]


# ---------------------------------------------------------------------------
# prediction study
# ---------------------------------------------------------------------------

PREDICTION_COLUMNS = ("kind", "criterion", "replicate", "classification_error", "classification_error_sd",
                      "logistic_loss", "model_size", "model_size_sd")


@dataclass(frozen=True)
class PredictionReport:
    classification_error: float
    logistic_loss: float
    model_size: int
    criterion: str
    replicate: int

    def __post_init__(self):
        if not 0.0 <= self.classification_error <= 1.0:
            raise NumericError("classification error outside [0, 1]")
        if not math.isfinite(self.logistic_loss):
            raise NumericError("non-finite logistic loss")


def feature_order(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Features ranked by absolute correlation with the response (stable on ties)."""
    Xc = X - X.mean(axis=0)
    yc = y - y.mean()
    denom = np.sqrt(np.sum(Xc ** 2, axis=0) * np.sum(yc ** 2))
    corr = np.divide(np.abs(Xc.T @ yc), denom, out=np.zeros(X.shape[1]), where=denom > 0)
    return np.argsort(-corr, kind="stable")


def prediction_scores(X_test: np.ndarray, y_test: np.ndarray, beta: np.ndarray) -> Tuple[float, float]:
    """Classification error at 1/2 and logistic loss with clamped probabilities."""
    p = np.clip(norm_cdf(X_test @ beta), PROB_CLAMP, 1.0 - PROB_CLAMP)
    err = float(np.mean((p > 0.5) != (y_test == 1)))
    loss = float(-np.mean(y_test * np.log(p) + (1 - y_test) * np.log1p(-p)))
    return err, loss


def predict_replicate(X: np.ndarray, y: np.ndarray, train_size: int, replicate: int, seed: int,
                      max_size: int, options: FitOptions, rank_features: bool) -> List[PredictionReport]:
    rng = np.random.default_rng(task_seed(seed, replicate))
    perm = rng.permutation(X.shape[0])
    tr, te = perm[:train_size], perm[train_size:]
    Xtr, ytr = X[tr], y[tr]
    order = feature_order(Xtr, ytr) if rank_features else np.arange(X.shape[1])
    Xtr = Xtr[:, order[:max_size]]
    Xte = X[te][:, order[:max_size]]
    data = Dataset("probit", X=Xtr, y=ytr)
    fits = {}
    values = []
    for k in range(1, max_size + 1):
        f = fit(build_model(data, k, options), options)
        fits[k] = f
        values.append(CriterionValue(k, f.elbo, bic(f.loglik_max, k, train_size), aic(f.loglik_max, k),
                                     k, train_size))
    out = []
    for crit in PREDICTION_CRITERIA:
        k = select(values, crit)
        err, loss = prediction_scores(Xte[:, :k], y[te], fits[k].theta_hat)
        out.append(PredictionReport(err, loss, k, crit, replicate))
    return out


def prediction_summary(reports: Sequence[PredictionReport]) -> List[dict]:
    rows = []
    for crit in PREDICTION_CRITERIA:
        sel = [r for r in reports if r.criterion == crit]
        if not sel:
            continue
        err = np.array([r.classification_error for r in sel])
        size = np.array([r.model_size for r in sel], dtype=float)
        rows.append({"kind": "summary", "criterion": crit, "replicate": "",
                     "classification_error": float(err.mean()),
                     "classification_error_sd": float(err.std(ddof=1)) if err.size > 1 else 0.0,
                     "logistic_loss": float(np.median([r.logistic_loss for r in sel])),
                     "model_size": float(size.mean()),
                     "model_size_sd": float(size.std(ddof=1)) if size.size > 1 else 0.0})
    return rows


def run_prediction(source, train_size: int, replicates: int = 20, max_size: int = 30,
                   options: FitOptions = FitOptions(prior_scale=1.0), seed: int = 0, threads: int = 1,
                   rank_features: Optional[bool] = None) -> Tuple[List[dict], List[PredictionReport]]:
    """Prediction comparison of ELBO, AIC and BIC along a nested feature path.

    ``source`` is a probit :class:`SyntheticDesign` (the pool is generated
    once) or an ``(X, y)`` pair. Synthetic designs keep the given feature
    order; datasets rank features by training-set absolute correlation
    unless ``rank_features`` says otherwise. The selected model is refit by
    maximum likelihood on the training split and scored on the rest.
    """
    if isinstance(source, SyntheticDesign):
        if source.family != "probit":
            raise UsageError("the prediction study needs a probit design")
        ds = generate(source)
        X, y = ds.X, ds.y
        rank = False if rank_features is None else rank_features
    else:
        X, y = source
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        rank = True if rank_features is None else rank_features
    if not 1 <= train_size < X.shape[0]:
        raise UsageError(f"train_size must lie in [1, {X.shape[0]}) for a dataset of {X.shape[0]} rows")
    if replicates < 1:
        raise UsageError("replicates must be >= 1")
    max_size = min(int(max_size), X.shape[1])
    if max_size < 1:
        raise UsageError("max_size must be >= 1")
    reports = [r for reps in parallel_map(
        lambda i: predict_replicate(X, y, train_size, i, seed, max_size, options, rank),
        list(range(replicates)), threads) for r in reps]
    rows = [{"kind": "replicate", "criterion": r.criterion, "replicate": r.replicate,
             "classification_error": r.classification_error, "classification_error_sd": "",
             "logistic_loss": r.logistic_loss, "model_size": r.model_size, "model_size_sd": ""}
            for r in reports]
    return rows + prediction_summary(reports), reports
