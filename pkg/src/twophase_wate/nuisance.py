"""Sampling-weighted logistic working models for the nuisance functions."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .dataset import ObservationTable

log = logging.getLogger(__name__)

SCORE_TOL = 1e-8
MAX_ITER = 100
MAX_HALVINGS = 30
RIDGE = 1e-8
COND_LIMIT = 1e12
DIVERGENCE_NORM = 1e6
PROPENSITY_CLAMP = 1e-6
STEP_TOL = 1e-10


class NuisanceFitError(RuntimeError):
    """A working model could not be fitted."""


class SeparationError(NuisanceFitError):
    pass


class SingularHessianError(NuisanceFitError):
    pass


@dataclass(frozen=True, eq=False)
class FittedGLM:
    coefficients: np.ndarray
    design_columns: tuple[str, ...]
    converged: bool
    iterations: int
    final_score_norm: float
    weights_used: np.ndarray

    def predict(self, x: np.ndarray) -> np.ndarray:
        return predict_probability(self, x)


def weighted_log_likelihood(beta, x, y, weights) -> float:
    eta = x @ beta
    return float(np.sum(weights * (y * eta - np.logaddexp(0.0, eta))))


def _score_hessian(beta, x, y, weights):
    p = expit(x @ beta)
    score = x.T @ (weights * (y - p))
    hess = -(x * (weights * p * (1.0 - p))[:, None]).T @ x
    return score, hess


def fit_weighted_logistic(x, y, weights, row_mask=None, design_columns: Sequence[str] = (),
                          tol: float = SCORE_TOL, max_iter: int = MAX_ITER) -> FittedGLM:
    """Solve ``sum_i weights_i x_i (y_i - expit(x_i' b)) = 0`` by damped Newton.

    Rows outside ``row_mask`` get zero weight. The returned model carries the
    per-row weights that were actually used.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    weights = np.asarray(weights, dtype=float)
    n, p = x.shape
    if row_mask is None:
        row_mask = np.ones(n, dtype=bool)
    row_mask = np.asarray(row_mask, dtype=bool)
    if np.any(weights[row_mask] < 0):
        raise ValueError("fitting weights must be nonnegative")
    used = np.where(row_mask, weights, 0.0)
    active = used > 0
    xa, ya, wa = x[active], y[active], used[active]
    if not (np.all(np.isfinite(xa)) and np.all(np.isfinite(ya))):
        raise ValueError("design matrix or response has missing values among fitted rows")
    if not (np.any(ya == 0) and np.any(ya == 1)):
        raise SeparationError("response is constant among rows with positive weight")

    beta = np.zeros(p)
    ll = weighted_log_likelihood(beta, xa, ya, wa)
    score, hess = _score_hessian(beta, xa, ya, wa)
    it = 0
    last_step = np.inf
    # one extra Newton step after the score test passes polishes the solution
    while (np.max(np.abs(score)) >= tol or last_step > STEP_TOL) and it < max_iter:
        it += 1
        info = -hess
        if np.linalg.cond(info) > COND_LIMIT:
            info = info + RIDGE * np.eye(p)
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError as exc:
            raise SingularHessianError(str(exc)) from None
        if not np.all(np.isfinite(step)):
            raise SingularHessianError("non-finite Newton step")
        t = 1.0
        for _ in range(MAX_HALVINGS):
            cand = beta + t * step
            ll_new = weighted_log_likelihood(cand, xa, ya, wa)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            break
        last_step = float(np.max(np.abs(cand - beta)))
        beta, ll = cand, ll_new
        if np.linalg.norm(beta) > DIVERGENCE_NORM:
            raise SeparationError(f"coefficients diverged (norm {np.linalg.norm(beta):.3g})")
        score, hess = _score_hessian(beta, xa, ya, wa)

    norm = float(np.max(np.abs(score)))
    converged = norm < tol
    eta = xa @ beta
    if eta[ya == 1].min() > eta[ya == 0].max():
        raise SeparationError("the fitted linear predictor separates the two response classes")
    if not converged:
        log.warning("logistic fit did not converge: max|score|=%.3g after %d iterations", norm, it)
    return FittedGLM(
        coefficients=beta,
        design_columns=tuple(design_columns),
        converged=converged,
        iterations=it,
        final_score_norm=norm,
        weights_used=used,
    )


def predict_probability(model: FittedGLM, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != model.coefficients.shape[0]:
        raise ValueError(
            f"design has {x.shape[1]} columns, model has {model.coefficients.shape[0]} coefficients"
        )
    return expit(x @ model.coefficients)


def score_and_hessian(model: FittedGLM, x, y, weights):
    """Weighted logistic score and Hessian at the model's coefficients."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != model.coefficients.shape[0]:
        raise ValueError("dimension mismatch between design and coefficients")
    return _score_hessian(model.coefficients, x, np.asarray(y, float), np.asarray(weights, float))


def clamp_propensity(e, eps: float = PROPENSITY_CLAMP):
    """Clip to ``[eps, 1 - eps]``; returns the clipped values and how many moved."""
    e = np.asarray(e, dtype=float)
    clipped = np.clip(e, eps, 1.0 - eps)
    count = int(np.count_nonzero(clipped != e))
    if count:
        warnings.warn(f"{count} propensity predictions clamped to [{eps}, {1 - eps}]",
                      RuntimeWarning, stacklevel=2)
    return clipped, count


@dataclass(frozen=True, eq=False)
class NuisanceBundle:
    """Propensity model and per-arm outcome models fitted on one table."""

    ps: FittedGLM
    out1: FittedGLM | None = None
    out0: FittedGLM | None = None

    @property
    def has_outcome_models(self) -> bool:
        return self.out1 is not None and self.out0 is not None


def fit_nuisances(table: ObservationTable, ps_columns: Sequence[str] | None = None,
                  outcome_columns: Sequence[str] | None = None, outcome_models: bool = True,
                  require_converged: bool = True) -> NuisanceBundle:
    """Fit e(x; alpha) and mu_a(x; beta^a) on phase-2 rows with weights delta/q.

    Column lists default to every low- and high-cost covariate.
    """
    default = (*table.roles.v, *table.roles.w)
    ps_columns = tuple(default if ps_columns is None else ps_columns)
    outcome_columns = tuple(default if outcome_columns is None else outcome_columns)
    phase2 = table.delta
    weights = np.where(phase2, 1.0 / table.q, 0.0)
    a = table.a.astype(float)

    x_ps = table.covariates(ps_columns)
    ps = fit_weighted_logistic(x_ps, np.where(phase2, a, 0.0), weights, phase2,
                               design_columns=ps_columns)
    models = [ps]
    out1 = out0 = None
    if outcome_models:
        x_out = table.covariates(outcome_columns)
        y = np.where(phase2, table.y, 0.0)
        out1 = fit_weighted_logistic(x_out, y, weights, phase2 & (table.a == 1),
                                     design_columns=outcome_columns)
        out0 = fit_weighted_logistic(x_out, y, weights, phase2 & (table.a == 0),
                                     design_columns=outcome_columns)
        models += [out1, out0]
    if require_converged and not all(m.converged for m in models):
        raise NuisanceFitError("a nuisance model failed to converge")
    return NuisanceBundle(ps=ps, out1=out1, out0=out0)
