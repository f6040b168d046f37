"""Monte Carlo study of the four estimators under two-phase designs.

The data-generating process has eight binary low-cost covariates, one
continuous high-cost covariate ``W``, a binary treatment and binary
potential outcomes. A scenario fixes the phase-2 size, the phase-1 size,
the sampling scheme, whether the outcome is a stratification variable and
which ``V_j`` is observed at phase 1.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from .dataset import ColumnRoles, ObservationTable, build_strata
from .estimand import ALL_ESTIMANDS, Estimand, weight_and_derivative
from .estimators import EstimationError, Estimator, estimate
from .inference import InferenceError, estimate_variance, z_critical
from .jackknife import JackknifeError, jackknife_correct, partition_stratified
from .nuisance import NuisanceFitError, fit_nuisances
from .twophase import (
    SamplingError,
    apply_phase2,
    equal_allocation,
    poisson_sample,
    probabilities_from_shares,
    srswor_sample,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

V_NAMES = tuple(f"V{j}" for j in range(1, 9))
COVARIATES = (*V_NAMES, "W")
STUDY_GRID = {
    "m": (200, 500, 1000, 2000),
    "n_multiplier": (4, 10),
    "scheme": ("poisson", "srswor"),
    "ods": (True, False),
    "v_obs": tuple(range(1, 9)),
}
MAX_FAILURE_RATE = 0.01
ORACLE = "ORACLE"


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class DGPParameters:
    """Coefficients of the generating model; ``null_effect`` sets Y1 = Y0."""

    w_intercept: float = -1.0
    w_coef: float = 0.5
    w_sd: float = 0.25
    a_intercept: float = -2.10
    a_coef: float = 0.5
    a_w: float = 1.0
    y1_intercept: float = -0.59
    y1_coef: float = 0.5
    y1_w: float = 1.5
    y0_intercept: float = -1.41
    y0_w: float = 1.0
    null_effect: bool = False


# 0-based indices into V1..V8 entering each equation
_W_TERMS = [0, 2, 3, 6]
_A_TERMS = [0, 1, 3, 5]
_Y1_TERMS = [0, 1, 2, 4]


@dataclass(frozen=True, eq=False)
class Population:
    v: np.ndarray
    w: np.ndarray
    e: np.ndarray
    a: np.ndarray
    y1: np.ndarray
    y0: np.ndarray
    mu1: np.ndarray
    mu0: np.ndarray

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def y(self) -> np.ndarray:
        return np.where(self.a == 1, self.y1, self.y0)

    def frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.v, columns=list(V_NAMES))
        df["W"] = self.w
        df["A"] = self.a
        df["Y1"] = self.y1
        df["Y0"] = self.y0
        df["Y"] = self.y
        return df


def generate_population(n: int, seed, params: DGPParameters = DGPParameters()) -> Population:
    """Draw ``n`` iid units. ``seed`` may be an int, SeedSequence or Generator."""
    if n < 1:
        raise ValueError("population size must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    v = rng.integers(0, 2, size=(n, 8), dtype=np.int8)
    vf = v.astype(float)
    w = (params.w_intercept + params.w_coef * vf[:, _W_TERMS].sum(axis=1)
         + rng.normal(0.0, params.w_sd, size=n))
    e = expit(params.a_intercept + params.a_coef * vf[:, _A_TERMS].sum(axis=1) + params.a_w * w)
    a = (rng.random(n) < e).astype(np.int8)
    p1 = expit(params.y1_intercept + params.y1_coef * vf[:, _Y1_TERMS].sum(axis=1) + params.y1_w * w)
    p0 = expit(params.y0_intercept + params.y0_w * w)
    y1 = (rng.random(n) < p1).astype(np.int8)
    y0 = (rng.random(n) < p0).astype(np.int8)
    if params.null_effect:
        y1, p1 = y0.copy(), p0
    return Population(v=v, w=w, e=e, a=a, y1=y1, y0=y0, mu1=p1, mu0=p0)


def oracle_estimates(pop: Population, estimands: Iterable = ALL_ESTIMANDS) -> dict[Estimand, float]:
    """Full-data EIF solution with true e, Y1 and Y0 plugged in.

    The outcome residuals vanish, so the solution is
    ``sum D_i (Y1_i - Y0_i) / sum D_i`` with ``D = w + w'(A - e)``.
    """
    out = {}
    diff = pop.y1.astype(float) - pop.y0
    for est in estimands:
        est = Estimand.parse(est)
        w, wdot = weight_and_derivative(est, pop.e)
        d = w + wdot * (pop.a - pop.e)
        out[est] = float(d @ diff / d.sum())
    return out


@dataclass(frozen=True, eq=False)
class ReferenceSummary:
    """Large-sample truths and stratum counts of (A, V_j, Y) for every j."""

    n: int
    seed: int
    truths: dict
    prevalence: float
    counts: np.ndarray  # shape (8, 2, 2, 2): V_j index, A, V_j, Y

    def shares(self, v_obs: int, ods: bool) -> dict[tuple, float]:
        """Stratum shares keyed like :func:`build_strata` keys for (A, V_j[, Y])."""
        c = self.counts[v_obs - 1]
        if not ods:
            c = c.sum(axis=2)
        total = c.sum()
        return {tuple(float(x) for x in idx): float(c[idx]) / total for idx in np.ndindex(c.shape)}


def reference_summary(reference_n: int = 10_000_000, seed: int = 20240101,
                      params: DGPParameters = DGPParameters(),
                      chunk: int = 1_000_000) -> ReferenceSummary:
    """Stream the reference sample in chunks to bound memory."""
    num = np.zeros(len(ALL_ESTIMANDS))
    den = np.zeros(len(ALL_ESTIMANDS))
    treated = 0
    counts = np.zeros((8, 2, 2, 2), dtype=np.int64)
    done = 0
    for i in itertools.count():
        size = min(chunk, reference_n - done)
        if size <= 0:
            break
        pop = generate_population(size, np.random.default_rng([seed, i]), params)
        diff = pop.y1.astype(float) - pop.y0
        for j, est in enumerate(ALL_ESTIMANDS):
            w, _ = weight_and_derivative(est, pop.e)
            num[j] += w @ diff
            den[j] += w.sum()
        treated += int(pop.a.sum())
        y = pop.y
        for j in range(8):
            cell = pop.a * 4 + pop.v[:, j] * 2 + y
            counts[j] += np.bincount(cell, minlength=8).reshape(2, 2, 2)
        done += size
    truths = {est: float(num[j] / den[j]) for j, est in enumerate(ALL_ESTIMANDS)}
    return ReferenceSummary(n=reference_n, seed=seed, truths=truths,
                            prevalence=treated / reference_n, counts=counts)


def true_values(reference_n: int = 10_000_000, seed: int = 20240101,
                params: DGPParameters = DGPParameters()) -> dict[Estimand, float]:
    return reference_summary(reference_n, seed, params).truths


@dataclass(frozen=True)
class ScenarioConfig:
    m: int
    n_multiplier: int = 10
    scheme: str = "poisson"
    ods: bool = True
    v_obs: int = 1
    estimands: tuple = ("ate", "att", "atc", "ato")
    estimators: tuple = ("siw", "eiw", "sdr", "edr")
    replications: int = 1000
    seed: int = 1
    jackknife: int | None = None
    reference_n: int = 10_000_000
    reference_seed: int = 20240101
    ps_columns: tuple | None = None
    outcome_columns: tuple | None = None
    variance: bool = True
    level: float = 0.95

    def __post_init__(self):
        if self.scheme not in ("poisson", "srswor"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not 1 <= self.v_obs <= 8:
            raise ValueError("v_obs must be between 1 and 8")
        if self.m < 1 or self.n_multiplier < 1 or self.replications < 1:
            raise ValueError("m, n_multiplier and replications must be positive")
        object.__setattr__(self, "estimands",
                           tuple(Estimand.parse(e).value for e in self.estimands))
        object.__setattr__(self, "estimators",
                           tuple(Estimator.parse(e).value for e in self.estimators))
        for name in ("ps_columns", "outcome_columns"):
            cols = getattr(self, name)
            if cols is not None:
                object.__setattr__(self, name, tuple(cols))
                unknown = set(cols) - set(COVARIATES)
                if unknown:
                    raise ValueError(f"unknown covariates in {name}: {sorted(unknown)}")

    @property
    def n(self) -> int:
        return self.m * self.n_multiplier

    @property
    def extended(self) -> bool:
        return any(getattr(self, k) not in vals for k, vals in STUDY_GRID.items())

    @property
    def key_columns(self) -> tuple[str, ...]:
        v = f"V{self.v_obs}"
        return ("A", v, "Y") if self.ods else ("A", v)

    def label(self) -> str:
        s = "ods" if self.ods else "nonods"
        return f"m{self.m}_n{self.n}_{self.scheme}_{s}_V{self.v_obs}"


def _roles(config: ScenarioConfig) -> ColumnRoles:
    vo = f"V{config.v_obs}"
    return ColumnRoles(v=(vo,), w=tuple(c for c in COVARIATES if c != vo))


def _phase1_table(pop: Population, config: ScenarioConfig) -> ObservationTable:
    roles = _roles(config)
    frame = {name: pop.v[:, j] for j, name in enumerate(V_NAMES)}
    frame["W"] = pop.w
    return ObservationTable(
        a=pop.a, y=pop.y.astype(float),
        v=np.column_stack([frame[c] for c in roles.v]),
        w=np.column_stack([frame[c] for c in roles.w]),
        delta=np.ones(pop.n, dtype=bool), q=np.ones(pop.n), roles=roles,
    )


def draw_phase2(pop: Population, config: ScenarioConfig, shares: dict | None,
                seed: int) -> ObservationTable:
    """Phase-1 table of ``pop`` with the configured phase-2 subsample attached."""
    full = _phase1_table(pop, config)
    strata = build_strata(full, config.key_columns)
    if config.scheme == "poisson":
        if shares is None:
            raise SimulationError("Poisson sampling needs reference stratum shares")
        keys = sorted(shares)
        q = probabilities_from_shares([shares[k] for k in keys], config.m, config.n)
        delta, q_row = poisson_sample(strata, dict(zip(keys, q)), seed)
    else:
        delta, q_row = srswor_sample(strata, equal_allocation(strata, config.m), seed)
    return apply_phase2(full, delta, q_row, mask_outcome=not config.ods)


def _estimate_all(table: ObservationTable, config: ScenarioConfig, with_variance: bool):
    """Point estimates (and SEs) for every estimand x estimator in the config."""
    ps_cols = config.ps_columns or COVARIATES
    out_cols = config.outcome_columns or COVARIATES
    need_outcome = any(Estimator(e).doubly_robust for e in config.estimators)
    bundle = fit_nuisances(table, ps_cols, out_cols, outcome_models=need_outcome)
    strata = build_strata(table, config.key_columns)
    shape = (len(config.estimands), len(config.estimators))
    tau = np.empty(shape)
    se = np.full(shape, np.nan)
    for i, est in enumerate(config.estimands):
        for j, name in enumerate(config.estimators):
            res = estimate(table, name, est, bundle, strata)
            tau[i, j] = res.tau_hat
            if with_variance:
                se[i, j] = estimate_variance(table, bundle, res, strata, level=config.level).se
    return tau, se


_EXPECTED_FAILURES = (NuisanceFitError, EstimationError, SamplingError, InferenceError,
                      JackknifeError, np.linalg.LinAlgError)


def replicate_seeds(base_seed: int, rep: int) -> tuple[np.random.SeedSequence, int, int]:
    """(population seed, sampling seed, jackknife seed) for one replication."""
    pop_ss, samp_ss, jk_ss = np.random.SeedSequence([base_seed, rep]).spawn(3)
    return pop_ss, int(samp_ss.generate_state(1)[0]), int(jk_ss.generate_state(1)[0])


def run_replication(config: ScenarioConfig, rep: int, shares: dict | None,
                    params: DGPParameters = DGPParameters()) -> list[tuple]:
    """One replication's records: (rep, estimand, estimator, corrected, tau, se, lo, hi)."""
    pop_ss, samp_seed, jk_seed = replicate_seeds(config.seed, rep)
    pop = generate_population(config.n, np.random.default_rng(pop_ss), params)
    table = draw_phase2(pop, config, shares, samp_seed)
    tau, se = _estimate_all(table, config, config.variance)
    z = z_critical(config.level)
    records = []
    for i, est in enumerate(config.estimands):
        for j, name in enumerate(config.estimators):
            t, s = tau[i, j], se[i, j]
            records.append((rep, est, name.upper(), False, t, s, t - z * s, t + z * s))
    if config.jackknife:
        plan = partition_stratified(table.n, table.delta, config.jackknife, jk_seed)
        corrected, _ = jackknife_correct(lambda t: _estimate_all(t, config, False)[0],
                                         table, plan, full_estimate=tau)
        for i, est in enumerate(config.estimands):
            for j, name in enumerate(config.estimators):
                t, s = corrected[i, j], se[i, j]
                records.append((rep, est, name.upper(), True, t, s, t - z * s, t + z * s))
    for est, value in oracle_estimates(pop, config.estimands).items():
        records.append((rep, est.value, ORACLE, False, value, np.nan, np.nan, np.nan))
    return records


RECORD_COLUMNS = ["rep", "estimand", "estimator", "corrected", "tau_hat", "se", "ci_lo", "ci_hi"]


def _run_block(config: ScenarioConfig, reps: Sequence[int], shares, params):
    records, failures = [], []
    for rep in reps:
        try:
            records.extend(run_replication(config, rep, shares, params))
        except _EXPECTED_FAILURES as exc:
            failures.append((rep, f"{type(exc).__name__}: {exc}"))
    return records, failures


@dataclass(eq=False)
class ScenarioResult:
    config: ScenarioConfig
    records: pd.DataFrame
    failures: list = field(default_factory=list)
    truths: dict = field(default_factory=dict)

    def metrics(self) -> pd.DataFrame:
        return summarize(self.records, self.truths, alpha=1 - self.config.level)


def default_threads() -> int:
    value = os.environ.get("TWOPHASE_WATE_THREADS")
    return max(1, int(value)) if value else 1


def run_scenario(config: ScenarioConfig, reference: ReferenceSummary | None = None,
                 threads: int | None = None, params: DGPParameters = DGPParameters()) -> ScenarioResult:
    """Run all replications; results do not depend on the number of workers."""
    if reference is None:
        reference = reference_summary(config.reference_n, config.reference_seed, params)
    shares = reference.shares(config.v_obs, config.ods) if config.scheme == "poisson" else None
    threads = default_threads() if threads is None else max(1, threads)
    reps = list(range(config.replications))
    if threads == 1:
        blocks = [_run_block(config, reps, shares, params)]
    else:
        chunks = [reps[i::threads] for i in range(threads)]
        # spawn: forking a process that has loaded multithreaded libraries can deadlock
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=threads, mp_context=ctx) as pool:
            blocks = list(pool.map(_run_block, [config] * threads, chunks,
                                   [shares] * threads, [params] * threads))
    records = [r for b in blocks for r in b[0]]
    failures = sorted(f for b in blocks for f in b[1])
    if len(failures) > MAX_FAILURE_RATE * config.replications:
        raise SimulationError(
            f"{len(failures)} of {config.replications} replications failed; first: {failures[0][1]}")
    for rep, msg in failures:
        log.warning("replication %d dropped: %s", rep, msg)
    df = pd.DataFrame.from_records(records, columns=RECORD_COLUMNS)
    df = df.sort_values(["rep", "corrected", "estimand", "estimator"], kind="stable")
    truths = {est.value: v for est, v in reference.truths.items()}
    return ScenarioResult(config=config, records=df.reset_index(drop=True),
                          failures=failures, truths=truths)


# --- metrics -----------------------------------------------------------------------

_GAIN_PAIRS = {"EIW": "SIW", "EDR": "SDR"}


def summarize(records: pd.DataFrame, truths: dict, alpha: float = 0.05) -> pd.DataFrame:
    """One row per (estimand, estimator, corrected) with bias, SEs, RMSE and coverage.

    ``alpha`` is carried for reporting; coverage uses the interval stored with
    each record.
    """
    if records.empty:
        raise SimulationError("no replication records to summarize")
    rows = []
    for (est, name, corr), g in records.groupby(["estimand", "estimator", "corrected"], sort=True):
        if len(g) < 2:
            raise SimulationError(f"cell ({est}, {name}, corrected={corr}) has fewer than 2 records")
        truth = truths[Estimand.parse(est).value]
        t = g["tau_hat"].to_numpy(float)
        err = t - truth
        covered = (g["ci_lo"] <= truth) & (truth <= g["ci_hi"])
        rows.append({
            "estimand": est, "estimator": name, "corrected": bool(corr), "R": len(g),
            "truth": truth, "mean": float(t.mean()), "bias": float(err.mean()),
            "emp_se": float(t.std(ddof=1)), "rmse": float(np.sqrt(np.mean(err**2))),
            "mean_se": float(g["se"].mean()) if g["se"].notna().any() else math.nan,
            "coverage": float(covered.mean()) if g["se"].notna().any() else math.nan,
            "alpha": alpha,
        })
    out = pd.DataFrame(rows)
    oracle = out[out.estimator == ORACLE].set_index("estimand")
    out["rel_emp_se"] = out.apply(
        lambda r: r.emp_se / oracle.emp_se[r.estimand] if r.estimand in oracle.index else math.nan, axis=1)
    out["rel_rmse"] = out.apply(
        lambda r: r.rmse / oracle.rmse[r.estimand] if r.estimand in oracle.index else math.nan, axis=1)
    idx = out.set_index(["estimand", "estimator", "corrected"])

    def gain(r):
        base = _GAIN_PAIRS.get(r.estimator)
        key = (r.estimand, base, r.corrected)
        if base is None or key not in idx.index:
            return math.nan
        ref = idx.loc[key, "emp_se"]
        return 100.0 * (ref - r.emp_se) / ref if ref > 0 else 0.0

    out["pct_gain"] = out.apply(gain, axis=1)
    return out


# --- configuration and output ---------------------------------------------------------

_CONFIG_FIELDS = {f.name for f in fields(ScenarioConfig)}


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def scenarios_from_mapping(data: dict) -> list[ScenarioConfig]:
    """Expand ``defaults`` + ``grid`` (cartesian product) + explicit ``scenario`` entries."""
    defaults = dict(data.get("defaults", {}))
    grid = data.get("grid") or {}
    entries = list(data.get("scenario", []))
    unknown = set(defaults) | set(grid)
    for entry in entries:
        unknown |= set(entry)
    unknown -= _CONFIG_FIELDS
    if unknown:
        raise ValueError(f"unknown scenario settings: {sorted(unknown)}")
    out = []
    if grid:
        keys = list(grid)
        for combo in itertools.product(*(_as_list(grid[k]) for k in keys)):
            out.append(ScenarioConfig(**{**defaults, **dict(zip(keys, combo))}))
    for entry in entries:
        out.append(ScenarioConfig(**{**defaults, **entry}))
    if not out:
        raise ValueError("configuration defines no scenarios")
    return out


def load_config(path) -> list[ScenarioConfig]:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() == ".json":
        data = json.loads(raw)
    else:
        data = tomllib.loads(raw.decode("utf-8"))
    return scenarios_from_mapping(data)


def _scenario_columns(config: ScenarioConfig) -> dict:
    return {"scenario": config.label(), "m": config.m, "n": config.n, "scheme": config.scheme,
            "ods": config.ods, "v_obs": config.v_obs, "extended": config.extended}


def metrics_frame(results: Sequence[ScenarioResult]) -> pd.DataFrame:
    frames = []
    for res in results:
        df = res.metrics()
        for k, v in reversed(_scenario_columns(res.config).items()):
            df.insert(0, k, v)
        df["failures"] = len(res.failures)
        frames.append(df)
    return pd.concat(frames, ignore_index=True)


def write_metrics_csv(metrics: pd.DataFrame, path) -> None:
    metrics.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


_PLOTS = {
    "bias": ["bias"],
    "relative_rmse": ["rel_rmse", "rel_emp_se"],
    "pct_gain": ["pct_gain"],
    "coverage": ["coverage", "mean_se", "emp_se"],
}


def write_plot_data(metrics: pd.DataFrame, directory) -> list[Path]:
    """One long-format CSV per plotted quantity."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    keys = ["scenario", "m", "n", "scheme", "ods", "v_obs", "estimand", "estimator", "corrected"]
    paths = []
    for name, cols in _PLOTS.items():
        sub = metrics[keys + cols]
        if name == "pct_gain":
            sub = sub[sub.pct_gain.notna()]
        path = directory / f"plot_{name}.csv"
        sub.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        paths.append(path)
    return paths


def markdown_table(metrics: pd.DataFrame, value: str = "rel_emp_se", digits: int = 2) -> str:
    """Estimators down the rows, estimands across, one block per scenario."""
    lines = []
    estimands = [e.value for e in ALL_ESTIMANDS if e.value in set(metrics.estimand)]
    for scen, g in metrics.groupby("scenario", sort=False):
        lines.append(f"### {scen} ({value})")
        lines.append("")
        lines.append("| estimator | " + " | ".join(e.upper() for e in estimands) + " |")
        lines.append("|---|" + "---|" * len(estimands))
        for (name, corr), h in g.groupby(["estimator", "corrected"], sort=True):
            label = f"{name} (jackknife)" if corr else name
            cells = []
            for e in estimands:
                vals = h.loc[h.estimand == e, value]
                cells.append(f"{vals.iloc[0]:.{digits}f}" if len(vals) else "")
            lines.append(f"| {label} | " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


def config_dict(config: ScenarioConfig) -> dict:
    d = asdict(config)
    d["extended"] = config.extended
    return d


def with_overrides(config: ScenarioConfig, **changes) -> ScenarioConfig:
    return replace(config, **changes)
