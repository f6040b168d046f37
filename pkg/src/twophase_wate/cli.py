"""Command-line entry point: ``twophase-wate <subcommand> ...``.

Exit codes: 0 success, 2 invalid input or arguments, 1 computational failure.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import math
import platform
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .dataset import ColumnRoles, DataError, build_strata, load_observations, strata_from_keys
from .design import (
    DesignError,
    DesignInput,
    allocation_objective,
    ipsw_allocation,
    neyman_allocation,
    normalize_to_budget,
    simple_design_probability,
)
from .estimand import Estimand
from .estimators import EstimationError, Estimator, estimate
from .inference import InferenceError, default_variance_method, estimate_variance
from .jackknife import DEFAULT_GROUPS, JackknifeError, jackknife_correct, partition_stratified
from .nuisance import NuisanceFitError, fit_nuisances
from .simstudy import (
    SimulationError,
    load_config,
    markdown_table,
    metrics_frame,
    reference_summary,
    run_scenario,
    with_overrides,
    write_metrics_csv,
    write_plot_data,
)
from .twophase import (
    SamplingError,
    equal_allocation,
    poisson_sample,
    reference_probabilities,
    srswor_sample,
)

log = logging.getLogger("twophase_wate")

USER_ERRORS = (DataError, DesignError, SamplingError, ValueError, KeyError, FileNotFoundError,
               IsADirectoryError, PermissionError, UnicodeDecodeError)
RUNTIME_ERRORS = (NuisanceFitError, EstimationError, InferenceError, JackknifeError,
                  SimulationError, np.linalg.LinAlgError, ArithmeticError, RuntimeError)


class UsageError(Exception):
    """Argument combination rejected after parsing."""


def _names(text: str | None) -> tuple[str, ...]:
    if not text:
        return ()
    return tuple(c.strip() for c in text.split(",") if c.strip())


def _num(x):
    """JSON-safe float: shortest round-trip repr; NaN/inf become null."""
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# --- estimate ------------------------------------------------------------------------


def cmd_estimate(args) -> int:
    roles = ColumnRoles(delta=args.delta_col, q=args.q_col, treatment=args.treatment,
                        outcome=args.outcome, v=_names(args.v), w=_names(args.w))
    table = load_observations(args.input, roles)
    estimator = Estimator.parse(args.estimator)
    estimand = Estimand.parse(args.estimand)
    strata_cols = _names(args.strata) or (roles.treatment, *roles.v)
    unknown = set(strata_cols) - {roles.treatment, roles.outcome, *roles.v}
    if unknown:
        raise UsageError(f"stratum columns must be phase-1 variables, got {sorted(unknown)}")
    if args.jackknife and args.seed is None:
        raise UsageError("--jackknife needs --seed")
    ps_cols = _names(args.ps_covariates) or None
    out_cols = _names(args.outcome_covariates) or None
    bundle = fit_nuisances(table, ps_cols, out_cols, outcome_models=estimator.doubly_robust)
    strata = build_strata(table, strata_cols)
    result = estimate(table, estimator, estimand, bundle, strata)
    method = default_variance_method(estimator) if args.var_method == "auto" else args.var_method
    report = estimate_variance(table, bundle, result, strata, method, args.level)

    payload = {
        "estimator": estimator.label,
        "estimand": estimand.value.upper(),
        "tau_hat": _num(result.tau_hat),
        "se": _num(report.se),
        "ci_lo": _num(report.ci[0]),
        "ci_hi": _num(report.ci[1]),
        "level": args.level,
        "var_method": report.method,
        "diagnostics": {
            "n": table.n,
            "m": int(table.delta.sum()),
            "strata": strata.K,
            "stratum_columns": list(strata_cols),
            "clamped_propensities": result.rows.clamped,
            "ps_iterations": bundle.ps.iterations,
        },
    }
    if args.jackknife:
        plan = partition_stratified(table.n, table.delta, args.jackknife, args.seed)

        def refit(t):
            b = fit_nuisances(t, ps_cols, out_cols, outcome_models=estimator.doubly_robust)
            return estimate(t, estimator, estimand, b, build_strata(t, strata_cols)).tau_hat

        corrected, reps = jackknife_correct(refit, table, plan, full_estimate=result.tau_hat)
        payload["jackknife"] = {"D": args.jackknife, "seed": args.seed,
                                "tau_corrected": _num(corrected)}
    if args.influence_out:
        frame = pd.DataFrame({"row": np.arange(table.n), "influence": report.influence.values})
        frame.to_csv(args.influence_out, index=False, float_format="%.17g", lineterminator="\n")

    if args.format == "md":
        lines = ["| quantity | value |", "|---|---|"]
        lines += [f"| {k} | {payload[k]} |" for k in ("estimator", "estimand", "tau_hat", "se",
                                                       "ci_lo", "ci_hi", "var_method")]
        _emit("\n".join(lines) + "\n", args.out)
    else:
        _emit(json.dumps(payload, indent=2) + "\n", args.out)
    return 0


# --- design --------------------------------------------------------------------------


def cmd_design(args) -> int:
    frame = pd.read_csv(args.strata)
    required = {"k", "p"} | ({"e"} if args.rule == "simple" else {"sigma"})
    missing = required - set(frame.columns)
    if missing:
        raise UsageError(f"stratum file lacks columns {sorted(missing)}")
    p = frame["p"].to_numpy(float)
    if args.rule == "simple":
        if not args.estimand:
            raise UsageError("--rule simple needs --estimand")
        scores = simple_design_probability(args.estimand, frame["e"].to_numpy(float))
        q = normalize_to_budget(scores, p, args.qbar)
        summary = {"rule": "simple", "feasible": bool(q.max() <= 1.0), "max_q": float(q.max())}
    else:
        xi = frame["xi"].to_numpy(float) if "xi" in frame.columns else None
        inp = DesignInput(p=p, sigma=frame["sigma"].to_numpy(float), xi=xi, qbar=args.qbar,
                          c_w=args.c_w)
        out = ipsw_allocation(inp) if args.rule == "ipsw" else neyman_allocation(inp)
        q = out.q
        c = inp.sigma**2 + (inp.xi**2 if args.rule == "ipsw" else 0.0)
        summary = {"rule": args.rule, "objective": out.objective,
                   "objective_cw_free": out.objective_cw_free, "feasible": out.feasible,
                   "max_q": out.max_q,
                   "proportional_objective": allocation_objective(p, c, np.full_like(p, args.qbar))}
    result = pd.DataFrame({"k": frame["k"], "p": p, "q": q})
    buf = io.StringIO()
    result.to_csv(buf, index=False, float_format="%.17g", lineterminator="\n")
    _emit(buf.getvalue(), args.out)
    sys.stderr.write(json.dumps(summary) + "\n")
    if not summary["feasible"]:
        log.warning("allocation infeasible: max q = %.6g > 1", summary["max_q"])
    return 0


# --- sample --------------------------------------------------------------------------


def cmd_sample(args) -> int:
    frame = pd.read_csv(args.input)
    keys = _names(args.strata)
    missing = set(keys) - set(frame.columns)
    if missing:
        raise UsageError(f"stratum columns not in input: {sorted(missing)}")
    strata = strata_from_keys(frame[list(keys)].to_numpy(float), keys,
                              delta=np.ones(len(frame), dtype=bool))
    if args.scheme == "poisson":
        q_k = reference_probabilities(strata, args.m, strata.n)
        delta, q = poisson_sample(strata, q_k, args.seed)
    else:
        delta, q = srswor_sample(strata, equal_allocation(strata, args.m), args.seed)
    out = frame.copy()
    for col in _names(args.mask):
        if col not in out.columns:
            raise UsageError(f"mask column {col!r} not in input")
        out[col] = out[col].astype(float).where(delta)
    out[args.delta_col] = delta.astype(int)
    out[args.q_col] = q
    buf = io.StringIO()
    out.to_csv(buf, index=False, float_format="%.17g", lineterminator="\n")
    _emit(buf.getvalue(), args.out)
    return 0


# --- truth / simulate ----------------------------------------------------------------


def cmd_truth(args) -> int:
    ref = reference_summary(args.reference_n, args.seed)
    payload = {"reference_n": args.reference_n, "seed": args.seed,
               "prevalence": ref.prevalence,
               **{est.value: val for est, val in ref.truths.items()}}
    _emit(json.dumps(payload, indent=2) + "\n", args.out)
    return 0


def cmd_simulate(args) -> int:
    configs = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.replications is not None:
        changes["replications"] = args.replications
    if args.reference_n is not None:
        changes["reference_n"] = args.reference_n
    configs = [with_overrides(c, **changes) for c in configs]
    references = {}
    results = []
    for cfg in configs:
        key = (cfg.reference_n, cfg.reference_seed)
        if key not in references:
            references[key] = reference_summary(*key)
        log.info("running %s (%d replications)", cfg.label(), cfg.replications)
        results.append(run_scenario(cfg, references[key], threads=args.threads))
    metrics = metrics_frame(results)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(metrics, out / "metrics.csv")
    write_plot_data(metrics, out)
    if args.format == "md" or args.tables:
        (out / "tables.md").write_text(markdown_table(metrics, "rel_emp_se") + "\n"
                                       + markdown_table(metrics, "rel_rmse") + "\n")
    if args.records:
        frames = []
        for res in results:
            df = res.records.copy()
            df.insert(0, "scenario", res.config.label())
            frames.append(df)
        pd.concat(frames).to_csv(out / "records.csv", index=False, float_format="%.17g",
                                 lineterminator="\n")
    return 0


# --- parser --------------------------------------------------------------------------


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _level(text: str) -> float:
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError("must lie in (0, 1)")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twophase-wate",
                                     description="Weighted ATE estimation under two-phase sampling.")
    parser.add_argument("--version", action="version",
                        version=f"twophase-wate {__version__} (python {platform.python_version()}, "
                                f"numpy {np.__version__})")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="estimate a WATE from a two-phase CSV")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--estimator", required=True, choices=[e.value for e in Estimator])
    p.add_argument("--estimand", required=True, choices=[e.value for e in Estimand])
    p.add_argument("--v", help="comma-separated phase-1 covariates")
    p.add_argument("--w", help="comma-separated phase-2 covariates")
    p.add_argument("--treatment", default="A")
    p.add_argument("--outcome", default="Y")
    p.add_argument("--delta-col", default="delta")
    p.add_argument("--q-col", default="q")
    p.add_argument("--strata", help="stratum columns (default: treatment plus --v columns)")
    p.add_argument("--ps-covariates")
    p.add_argument("--outcome-covariates")
    p.add_argument("--var-method", default="auto", choices=["auto", "eif", "sandwich"])
    p.add_argument("--level", type=_level, default=0.95)
    p.add_argument("--jackknife", type=_positive_int, nargs="?", const=DEFAULT_GROUPS)
    p.add_argument("--seed", type=int)
    p.add_argument("--influence-out")
    p.add_argument("--format", default="json", choices=["json", "md"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("design", help="phase-2 allocation from stratum moments")
    p.add_argument("--strata", required=True, help="CSV with k, p and sigma[, xi] or e")
    p.add_argument("--qbar", type=_level, required=True)
    p.add_argument("--rule", default="neyman", choices=["neyman", "ipsw", "simple"])
    p.add_argument("--estimand", choices=[e.value for e in Estimand])
    p.add_argument("--c-w", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("sample", help="draw a phase-2 subsample")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--strata", required=True)
    p.add_argument("--scheme", default="poisson", choices=["poisson", "srswor"])
    p.add_argument("--m", type=_positive_int, required=True, help="target phase-2 size")
    p.add_argument("--mask", help="columns to blank out where not sampled")
    p.add_argument("--delta-col", default="delta")
    p.add_argument("--q-col", default="q")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("truth", help="true WATEs of the simulation model")
    p.add_argument("--reference-n", type=_positive_int, default=10_000_000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_truth)

    p = sub.add_parser("simulate", help="run simulation scenarios from a TOML/JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the configured base seed")
    p.add_argument("--replications", type=_positive_int)
    p.add_argument("--reference-n", type=_positive_int)
    p.add_argument("--threads", type=_positive_int)
    p.add_argument("--format", default="csv", choices=["csv", "md"])
    p.add_argument("--tables", action="store_true", help="also write markdown tables")
    p.add_argument("--records", action="store_true", help="also write per-replication records")
    p.set_defaults(func=cmd_simulate)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, *USER_ERRORS) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except RUNTIME_ERRORS as exc:
        sys.stderr.write(f"computation failed: {type(exc).__name__}: {exc}\n")
        return 1


def main() -> None:
    sys.exit(run())
