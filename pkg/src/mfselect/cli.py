"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 numeric or divergence error,
3 I/O error (including malformed input files).
"""
from __future__ import annotations

import argparse
import math
import sys
from dataclasses import replace
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .core import NumericError, UsageError
from .engine import SCHEDULE_KINDS
from .evidence import mc_evidence
from .experiments import designs as D
from .experiments import io as dio
from .experiments import runners as R
from .models import BLOCK, FACTORIZED

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# argument helpers
# ---------------------------------------------------------------------------

def _floats(text: str) -> List[float]:
    """Comma list ``1,2,3`` or ``start:stop:step`` (inclusive of stop within 1e-9)."""
    try:
        if ":" in text:
            a, b, c = (float(t) for t in text.split(":"))
            if c <= 0:
                raise ValueError
            count = int(math.floor((b - a) / c + 1e-9)) + 1
            return [round(a + i * c, 12) for i in range(max(count, 0))]
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"cannot parse number list {text!r}") from None


def _ints(text: str) -> List[int]:
    vals = _floats(text)
    if any(v != int(v) for v in vals):
        raise UsageError(f"expected integers in {text!r}")
    return [int(v) for v in vals]


def _n_grid(args) -> List[int]:
    """Sample sizes from ``--values`` or ``floor(exp(m))`` over ``--m-grid``."""
    if args.m_grid:
        return [int(math.floor(math.exp(m))) for m in _floats(args.m_grid)]
    return _ints(args.values)


def _add_design(p: argparse.ArgumentParser, family_required: bool = True):
    p.add_argument("--family", choices=D.FAMILIES, required=family_required)
    p.add_argument("--n", type=int, help="sample size (nodes for sbm)")
    p.add_argument("--design-seed", type=int, default=None, help="data seed (defaults to --seed)")
    g = p.add_argument_group("design parameters")
    g.add_argument("--mu", type=float, help="normal: data mean")
    g.add_argument("--sd", type=float, help="normal: data standard deviation")
    g.add_argument("--K", type=int, help="gmm/sbm: true number of components")
    g.add_argument("--delta", type=float, help="gmm: centre spacing")
    g.add_argument("--sigma", type=float, help="gmm: prior sd of the centres")
    g.add_argument("--random-labels", action="store_true",
                   help="gmm: draw labels i.i.d. instead of equal component counts")
    g.add_argument("--p", type=int, help="probit: number of features")
    g.add_argument("--r", type=float, help="probit: AR(1) feature correlation")
    g.add_argument("--q", type=float, help="probit: coefficient decay")
    g.add_argument("--nonzero", type=int, help="probit: nonzero coefficients (sparse signal)")
    g.add_argument("--signal", choices=("sparse", "decay", "constant"), help="probit: coefficient pattern")
    g.add_argument("--within", type=float, help="sbm: within-community edge probability")
    g.add_argument("--between-max", type=float, help="sbm: upper bound of between-community probabilities")


def _add_fit(p: argparse.ArgumentParser):
    g = p.add_argument_group("model and CAVI options")
    g.add_argument("--prior-scale", type=float, default=None,
                   help="gmm/probit prior sd; normal: mu ~ N(0,s^2), sigma^2 ~ IG(1/s,1/s)")
    g.add_argument("--factorization", choices=(BLOCK, FACTORIZED), default=BLOCK)
    g.add_argument("--schedule", choices=SCHEDULE_KINDS, default="sequential_systematic")
    g.add_argument("--step-size", type=float, default=1.0)
    g.add_argument("--max-iter", type=int, default=20_000, help="budget in block updates")
    g.add_argument("--tol", type=float, default=1e-9)


_DESIGN_KEYS = {"normal": ("n", "mu", "sd"), "gmm": ("n", "K", "delta", "sigma"),
                "probit": ("n", "p", "r", "q", "nonzero", "signal"),
                "sbm": ("n", "K", "within", "between_max")}


def _design(args, seed: Optional[int] = None) -> D.SyntheticDesign:
    params = {}
    for key in _DESIGN_KEYS[args.family]:
        val = getattr(args, key, None)
        if val is not None:
            params[key] = val
    if args.family == "gmm" and getattr(args, "random_labels", False):
        params["balanced"] = False
    s = seed if seed is not None else (args.design_seed if args.design_seed is not None else args.seed)
    return D.SyntheticDesign(args.family, params, s)


def _options(args) -> R.FitOptions:
    return R.FitOptions(prior_scale=args.prior_scale, factorization=args.factorization,
                        schedule=args.schedule, step_size=args.step_size, max_iterations=args.max_iter,
                        tolerance=args.tol)


def _load_dataset(path: str, family: str) -> D.Dataset:
    """Read data written by ``gen`` (CSV/JSON) or a LibSVM file for probit."""
    if path.endswith((".libsvm", ".svm", ".txt")):
        if family != "probit":
            raise UsageError("LibSVM input is only meaningful for the probit family")
        X, y = dio.read_libsvm(path)
        return D.Dataset("probit", X=X, y=y)
    rows, columns = _read_rows(path)
    if not rows:
        raise UsageError(f"{path} holds no data rows")
    try:
        if family in ("normal", "gmm"):
            return D.Dataset(family, X=np.array([float(r["x"]) for r in rows]))
        if family == "probit":
            feats = [c for c in columns if c != "y"]
            X = np.array([[float(r[c]) for c in feats] for r in rows])
            return D.Dataset("probit", X=X, y=np.array([float(r["y"]) for r in rows]))
        return D.Dataset("sbm", X=np.array([[float(r[c]) for c in columns] for r in rows]))
    except (KeyError, ValueError) as exc:
        raise UsageError(f"{path} does not look like a {family} dataset: {exc}") from None


def _read_rows(path: str):
    if path.endswith(".json"):
        import json
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise dio.DataParseError(exc.lineno, f"invalid JSON: {exc.msg}") from None
        return [{k: str(v) for k, v in r.items()} for r in doc["rows"]], doc["columns"]
    rows = dio.read_table(path)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    return rows, header


def _dataset_rows(ds: D.Dataset):
    if ds.family in ("normal", "gmm"):
        return [{"x": v} for v in ds.X], ["x"]
    if ds.family == "probit":
        cols = ["y"] + [f"x{j + 1}" for j in range(ds.X.shape[1])]
        return [dict(zip(cols, [yy, *row])) for yy, row in zip(ds.y, ds.X)], cols
    cols = [f"a{j}" for j in range(ds.X.shape[0])]
    return [{c: int(v) for c, v in zip(cols, row)} for row in ds.X], cols


def _emit(rows, columns, args):
    text = dio.write_table(rows, columns, args.out, args.format)
    if args.out is None or args.out == "-":
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args):
    ds = D.generate(_design(args))
    if args.libsvm:
        if ds.family != "probit":
            raise UsageError("--libsvm is only available for the probit family")
        if args.out in (None, "-"):
            sys.stdout.write(dio.format_libsvm(ds.X, ds.y))
        else:
            dio.write_libsvm(args.out, ds.X, ds.y)
        return
    rows, cols = _dataset_rows(ds)
    _emit(rows, cols, args)


def _data_for(args):
    if args.data:
        return _load_dataset(args.data, args.family), None
    des = _design(args)
    return D.generate(des), des


FIT_COLUMNS = ("family", "candidate", "elbo", "loglik_max", "bic", "aic", "d_M", "n", "iterations",
               "converged", "parameter", "mean", "variance")


def cmd_fit(args):
    data, des = _data_for(args)
    opts = _options(args)
    model = R.build_model(data, args.candidate, opts, des)
    f = R.fit(model, opts, seed=args.seed)
    b = R.bic(f.loglik_max, f.d_M, f.n_bic)
    base = {"family": data.family, "candidate": args.candidate if args.candidate is not None else "",
            "elbo": f.elbo, "loglik_max": f.loglik_max, "bic": b, "aic": R.aic(f.loglik_max, f.d_M),
            "d_M": f.d_M, "n": f.n_bic, "iterations": f.iterations, "converged": int(f.converged)}
    rows = [dict(base, parameter=name, mean=m, variance=v) for name, m, v in _summaries(model, f.state)]
    _emit(rows, FIT_COLUMNS, args)


def _summaries(model, state):
    from .models import GmmModel, NormalModel, ProbitModel
    if isinstance(model, NormalModel):
        q_mu, q_s = state.parameter_factors
        return [("mu", float(q_mu.mean), float(q_mu.variance)),
                ("sigma2", float(q_s.mean()), float(q_s.variance()))]
    if isinstance(model, ProbitModel):
        mean, cov = model.beta_moments(state)
        return [(f"beta{j + 1}", float(mean[j]), float(cov[j, j])) for j in range(model.d)]
    if isinstance(model, GmmModel):
        m, s2 = model.center_moments(state)
        return [(f"mu{k + 1}", float(m[k]), float(s2[k])) for k in range(model.K)]
    q = state.parameter_factors[0]
    mean, var = q.mean(), q.variance()
    iu = np.triu_indices(model.K)
    return [(f"B{a + 1}{b + 1}", float(mean[a, b]), float(var[a, b])) for a, b in zip(*iu)]


def cmd_select(args):
    opts = _options(args)
    cands = _ints(args.candidates)
    if args.data:
        data = _load_dataset(args.data, args.family)
        rep = R.select_models(data, cands, opts, args.evidence_samples, args.seed)
        rows = []
        for v in rep.values:
            row = {"family": data.family, "seed": args.seed, "candidate": v.model_id, "d_M": v.d_M, "n": v.n,
                   "elbo": v.elbo, "loglik_max": (2 * v.d_M - v.aic) / 2.0, "bic": v.bic, "aic": v.aic,
                   "penalized_elbo": v.penalized_elbo, "extended_bic": v.extended_bic,
                   "log_evidence": v.mc_evidence[0] if v.mc_evidence else float("nan"),
                   "evidence_stderr": v.mc_evidence[1] if v.mc_evidence else float("nan"),
                   "converged": int(rep.converged[v.model_id])}
            for c in R.CRITERIA:
                row[f"selected_{c}"] = int(rep.selected[c] == v.model_id) if c in rep.selected else ""
            rows.append(row)
    else:
        base = args.design_seed if args.design_seed is not None else args.seed
        designs = [_design(args, base + i) for i in range(args.replicates)]
        rows = R.run_selection(designs, cands, opts, args.evidence_samples, args.seed, args.threads)
    _emit(rows, R.SELECTION_COLUMNS, args)


EVIDENCE_COLUMNS = ("family", "log_evidence", "stderr_log", "samples", "seed", "ess", "elbo")


def cmd_evidence(args):
    data, des = _data_for(args)
    opts = _options(args)
    model = R.build_model(data, args.candidate, opts, des)
    if not R.evidence_available(model):
        raise UsageError("Monte Carlo evidence is unavailable for this model size")
    est = mc_evidence(model, args.samples, args.seed, warn=True)
    row = {"family": data.family, "log_evidence": est.log_evidence, "stderr_log": est.stderr_log,
           "samples": est.samples, "seed": est.seed, "ess": est.ess, "elbo": float("nan")}
    if args.with_elbo:
        row["elbo"] = R.fit(model, opts, seed=args.seed).elbo
    _emit([row], EVIDENCE_COLUMNS, args)


def cmd_gaps(args):
    des = _design(args)
    values = _n_grid(args) if args.grid == "n" else _floats(args.values)
    if args.grid == "prior" and args.m_grid:
        values = [math.exp(m) for m in _floats(args.m_grid)]
    if not values:
        raise UsageError("give --values or --m-grid")
    rows = R.run_gaps(des, args.grid, values, _options(args), args.candidate, args.evidence_samples,
                      args.fisher_samples, args.seed, args.threads)
    _emit(rows, R.GAP_COLUMNS, args)


def cmd_convergence(args):
    grid = []
    for item in args.schedules.split(","):
        kind, _, gamma = item.partition(":")
        if kind not in SCHEDULE_KINDS:
            raise UsageError(f"unknown schedule {kind!r}")
        grid.append((kind, _floats(gamma)[0] if gamma else 1.0))
    des = _design(args)
    rows = R.run_convergence(des, grid, _options(args), args.iterations, args.seed, args.threads,
                             timing=args.timing)
    cols = R.CONVERGENCE_COLUMNS + (("wall_time",) if args.timing else ())
    _emit(rows, cols, args)


def cmd_predict(args):
    opts = _options(args)
    if args.prior_scale is None:
        opts = replace(opts, prior_scale=1.0)
    if args.data:
        data = _load_dataset(args.data, "probit")
        source = (data.X, data.y)
    else:
        if args.family != "probit":
            raise UsageError("predict needs --family probit or --data")
        source = _design(args)
    rows, _ = R.run_prediction(source, args.train_size, args.replicates, args.max_size, opts, args.seed,
                               args.threads)
    _emit(rows, R.PREDICTION_COLUMNS, args)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="run seed (CAVI, Monte Carlo, splits)")
    common.add_argument("--out", default=None, help="output file; stdout when omitted or '-'")
    common.add_argument("--threads", type=int, default=1, help="worker threads for replicates and grid points")
    common.add_argument("--format", choices=("csv", "json"), default="csv")

    parser = _Parser(prog="mfselect", description="Mean-field variational model selection experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    _add_design(p)
    p.add_argument("--libsvm", action="store_true", help="probit only: write LibSVM text")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("fit", parents=[common], help="run CAVI on one model")
    _add_design(p)
    _add_fit(p)
    p.add_argument("--data", help="dataset file (CSV/JSON from gen, or LibSVM for probit)")
    p.add_argument("--candidate", type=int, help="K (gmm, sbm) or number of leading features (probit)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", parents=[common], help="compare candidate models under all criteria")
    _add_design(p)
    _add_fit(p)
    p.add_argument("--data")
    p.add_argument("--candidates", required=True, help="list such as 1,2,3 or 1:6:1")
    p.add_argument("--replicates", type=int, default=1, help="designs with seeds design-seed + i")
    p.add_argument("--evidence-samples", type=int, default=0)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("evidence", parents=[common], help="Monte Carlo log evidence")
    _add_design(p)
    _add_fit(p)
    p.add_argument("--data")
    p.add_argument("--candidate", type=int)
    p.add_argument("--samples", type=int, default=10 ** 5)
    p.add_argument("--with-elbo", action="store_true", help="also fit CAVI and report the ELBO")
    p.set_defaults(func=cmd_evidence)

    p = sub.add_parser("gaps", parents=[common], help="ELBO/BIC/evidence gaps over a grid")
    _add_design(p)
    _add_fit(p)
    p.add_argument("--grid", choices=("n", "prior"), default="n")
    p.add_argument("--values", default="", help="explicit grid values")
    p.add_argument("--m-grid", default="", help="start:stop:step of m; n = floor(e^m) or s = e^m")
    p.add_argument("--candidate", type=int)
    p.add_argument("--evidence-samples", type=int, default=10 ** 5)
    p.add_argument("--fisher-samples", type=int, default=10 ** 5)
    p.set_defaults(func=cmd_gaps)

    p = sub.add_parser("convergence", parents=[common], help="ELBO regret curves per schedule")
    _add_design(p)
    _add_fit(p)
    p.add_argument("--schedules", default="sequential_systematic:1,parallel:1",
                   help="comma list of kind:step_size")
    p.add_argument("--iterations", type=int, default=200, help="sweeps per run")
    p.add_argument("--timing", action="store_true", help="add a wall_time column (not reproducible)")
    p.set_defaults(func=cmd_convergence)

    p = sub.add_parser("predict", parents=[common], help="probit prediction study")
    _add_design(p, family_required=False)
    _add_fit(p)
    p.add_argument("--data", help="LibSVM or CSV probit dataset")
    p.add_argument("--train-size", type=int, required=True)
    p.add_argument("--replicates", type=int, default=20)
    p.add_argument("--max-size", type=int, default=30)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be >= 1")
        args.func(args)
        return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, dio.DataParseError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
