"""Closed-form IPSW and enriched estimators of the WATE.

All four estimators are ratio forms. The IPSW versions weight phase-2
contributions by ``delta/q``; the enriched versions add
``(1 - delta/q) * g(S)`` where ``g`` is the phase-2 mean of the same
contribution within the row's stratum of phase-1 variables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .dataset import ObservationTable, StratumIndex
from .estimand import Estimand, weight_and_derivative
from .nuisance import FittedGLM, NuisanceBundle, clamp_propensity, predict_probability


class EstimationError(RuntimeError):
    pass


class EmptyStratumError(EstimationError):
    pass


class Estimator(str, Enum):
    SIW = "siw"
    EIW = "eiw"
    SDR = "sdr"
    EDR = "edr"

    @classmethod
    def parse(cls, value) -> "Estimator":
        if isinstance(value, Estimator):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown estimator {value!r}") from None

    @property
    def enriched(self) -> bool:
        return self in (Estimator.EIW, Estimator.EDR)

    @property
    def doubly_robust(self) -> bool:
        return self in (Estimator.SDR, Estimator.EDR)

    @property
    def label(self) -> str:
        return self.name


ALL_ESTIMATORS = (Estimator.SIW, Estimator.EIW, Estimator.SDR, Estimator.EDR)


@dataclass(frozen=True, eq=False)
class RowQuantities:
    """Fitted per-row quantities on phase-2 rows (``index`` into the table)."""

    index: np.ndarray
    e: np.ndarray
    w: np.ndarray
    wdot: np.ndarray
    mu1: np.ndarray | None = None
    mu0: np.ndarray | None = None
    clamped: int = 0

    @property
    def tau(self) -> np.ndarray | None:
        if self.mu1 is None:
            return None
        return self.mu1 - self.mu0


@dataclass(frozen=True, eq=False)
class EstimateResult:
    estimand: Estimand
    estimator: Estimator
    tau_hat: float
    mu1_hat: float | None
    mu0_hat: float | None
    rows: RowQuantities
    stratum_means: dict[str, np.ndarray] | None = None
    diagnostics: dict = field(default_factory=dict)


def row_quantities(table: ObservationTable, ps: FittedGLM, estimand,
                   bundle: NuisanceBundle | None = None) -> RowQuantities:
    idx = np.flatnonzero(table.delta)
    e_raw = predict_probability(ps, table.covariates(ps.design_columns)[idx])
    e, clamped = clamp_propensity(e_raw)
    w, wdot = weight_and_derivative(estimand, e)
    mu1 = mu0 = None
    if bundle is not None and bundle.has_outcome_models:
        x1 = table.covariates(bundle.out1.design_columns)[idx]
        x0 = table.covariates(bundle.out0.design_columns)[idx]
        mu1 = predict_probability(bundle.out1, x1)
        mu0 = predict_probability(bundle.out0, x0)
    return RowQuantities(index=idx, e=e, w=np.asarray(w), wdot=np.asarray(wdot),
                         mu1=mu1, mu0=mu0, clamped=clamped)


def stratum_conditional_means(values, strata: StratumIndex, table: ObservationTable) -> np.ndarray:
    """Per-stratum mean of ``values`` over phase-2 rows.

    ``values`` is either a length-n array (entries at delta=0 rows are ignored)
    or an array aligned with the table's phase-2 rows.
    """
    values = np.asarray(values, dtype=float)
    phase2 = table.delta
    if values.shape[0] == table.n:
        values = values[phase2]
    elif values.shape[0] != int(phase2.sum()):
        raise ValueError("values must have one entry per row or per phase-2 row")
    labels = strata.labels[phase2]
    empty = np.flatnonzero((strata.counts > 0) & (strata.phase2_counts == 0))
    if empty.size:
        raise EmptyStratumError(
            f"cannot enrich: empty phase-2 stratum {strata.keys[int(empty[0])]}")
    tail = values.shape[1:]
    flat = values.reshape(values.shape[0], -1)
    sums = np.stack([np.bincount(labels, weights=col, minlength=strata.K) for col in flat.T],
                    axis=1)
    means = sums / strata.phase2_counts[:, None]
    return means.reshape((strata.K, *tail))


def _augmentation_weights(table: ObservationTable, strata: StratumIndex) -> np.ndarray:
    """Per-stratum sum over phase-1 rows of (1 - delta/q)."""
    r = np.where(table.delta, 1.0 / table.q, 0.0)
    return strata.counts - np.bincount(strata.labels, weights=r, minlength=strata.K)


def _weighted_totals(table, rows: RowQuantities, contributions: np.ndarray,
                     strata: StratumIndex | None):
    """sum_i delta_i/q_i c_i, plus the enrichment term when strata are given.

    ``contributions`` has one row per phase-2 unit and any number of columns.
    """
    inv_q = 1.0 / table.q[rows.index]
    total = inv_q @ contributions
    if strata is None:
        return total, None
    g = stratum_conditional_means(contributions, strata, table)
    total = total + _augmentation_weights(table, strata) @ g
    return total, g


def _check_strata(table: ObservationTable, strata: StratumIndex) -> None:
    if strata.n != table.n or strata.labels.shape[0] != table.n:
        raise ValueError("strata were built on a different table")


def _iw(table, rows, estimand, estimator, strata):
    a = table.a[rows.index]
    y = table.y[rows.index]
    h1 = (a == 1) * rows.w / rows.e
    h0 = (a == 0) * rows.w / (1.0 - rows.e)
    contrib = np.column_stack([h1, h1 * y, h0, h0 * y])
    totals, g = _weighted_totals(table, rows, contrib, strata)
    if totals[0] == 0 or totals[2] == 0:
        raise EstimationError("zero denominator: an arm has no phase-2 units")
    mu1 = totals[1] / totals[0]
    mu0 = totals[3] / totals[2]
    means = None if g is None else {"h1": g[:, 0], "h1y": g[:, 1], "h0": g[:, 2], "h0y": g[:, 3]}
    return EstimateResult(
        estimand=estimand, estimator=estimator, tau_hat=float(mu1 - mu0),
        mu1_hat=float(mu1), mu0_hat=float(mu0), rows=rows, stratum_means=means,
        diagnostics={"clamped": rows.clamped},
    )


def dr_components(table: ObservationTable, rows: RowQuantities):
    """Numerator and denominator integrands of the doubly robust ratio."""
    a = table.a[rows.index]
    y = table.y[rows.index]
    resid = (a == 1) / rows.e * (y - rows.mu1) - (a == 0) / (1.0 - rows.e) * (y - rows.mu0)
    denom = rows.w + rows.wdot * (a - rows.e)
    numer = rows.w * resid + denom * rows.tau
    return numer, denom


def _dr(table, rows, estimand, estimator, strata):
    if rows.mu1 is None:
        raise ValueError("doubly robust estimators need fitted outcome models")
    numer, denom = dr_components(table, rows)
    totals, g = _weighted_totals(table, rows, np.column_stack([numer, denom]), strata)
    if totals[1] == 0:
        raise EstimationError("zero denominator in doubly robust ratio")
    means = None if g is None else {"numerator": g[:, 0], "denominator": g[:, 1]}
    return EstimateResult(
        estimand=estimand, estimator=estimator, tau_hat=float(totals[0] / totals[1]),
        mu1_hat=None, mu0_hat=None, rows=rows, stratum_means=means,
        diagnostics={"clamped": rows.clamped},
    )


def estimate_siw(table: ObservationTable, ps: FittedGLM, estimand) -> EstimateResult:
    estimand = Estimand.parse(estimand)
    return _iw(table, row_quantities(table, ps, estimand), estimand, Estimator.SIW, None)


def estimate_eiw(table: ObservationTable, ps: FittedGLM, estimand,
                 strata: StratumIndex) -> EstimateResult:
    estimand = Estimand.parse(estimand)
    _check_strata(table, strata)
    return _iw(table, row_quantities(table, ps, estimand), estimand, Estimator.EIW, strata)


def estimate_sdr(table: ObservationTable, bundle: NuisanceBundle, estimand) -> EstimateResult:
    estimand = Estimand.parse(estimand)
    rows = row_quantities(table, bundle.ps, estimand, bundle)
    return _dr(table, rows, estimand, Estimator.SDR, None)


def estimate_edr(table: ObservationTable, bundle: NuisanceBundle, estimand,
                 strata: StratumIndex) -> EstimateResult:
    estimand = Estimand.parse(estimand)
    _check_strata(table, strata)
    rows = row_quantities(table, bundle.ps, estimand, bundle)
    return _dr(table, rows, estimand, Estimator.EDR, strata)


def estimate(table: ObservationTable, estimator, estimand, bundle: NuisanceBundle,
             strata: StratumIndex | None = None, rows: RowQuantities | None = None) -> EstimateResult:
    """Dispatch to one of the four estimators, optionally reusing row quantities."""
    estimator = Estimator.parse(estimator)
    estimand = Estimand.parse(estimand)
    if estimator.enriched:
        if strata is None:
            raise ValueError(f"{estimator.label} needs a stratum index")
        _check_strata(table, strata)
    else:
        strata = None
    if rows is None:
        rows = row_quantities(table, bundle.ps, estimand,
                              bundle if estimator.doubly_robust else None)
    if estimator.doubly_robust:
        return _dr(table, rows, estimand, estimator, strata)
    return _iw(table, rows, estimand, estimator, strata)
