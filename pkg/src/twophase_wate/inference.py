"""Influence functions, variance estimates and Wald intervals.

Two routes are provided. The EIF route uses the full-data efficient
influence function (projected onto the observed data for the enriched DR
estimator); it is appropriate when the working models are believed to be
correct. The sandwich route composes the influence function of the whole
stacked system (target equations plus the three weighted score equations)
and stays valid under working-model misspecification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import expit

from .dataset import ObservationTable, StratumIndex
from .estimand import Estimand, weight_and_derivative, weight_second_derivative
from .estimators import (
    EstimateResult,
    Estimator,
    dr_components,
    stratum_conditional_means,
)
from .nuisance import PROPENSITY_CLAMP, NuisanceBundle

CENTER_TOL = 1e-8


class InferenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class InfluenceVector:
    """Per-row influence values.

    ``kind`` is ``"full_data"`` (defined on phase-2 rows only, NaN elsewhere),
    ``"ipsw"`` (delta/q times the full-data EIF), ``"observed"`` (projection
    onto the observed data) or ``"stacked_sandwich"``.
    """

    values: np.ndarray
    kind: str
    centered: bool


@dataclass(frozen=True, eq=False)
class VarianceReport:
    estimate: float
    variance_of_if: float
    se: float
    ci: tuple[float, float]
    level: float
    method: str
    influence: InfluenceVector | None = None


def z_critical(level: float) -> float:
    if not 0 < level < 1:
        raise ValueError("confidence level must lie in (0, 1)")
    return float(stats.norm.ppf(0.5 + level / 2.0))


def weighted_c_w(table: ObservationTable, result: EstimateResult) -> float:
    """delta/q-weighted mean of the estimand weight over phase-2 rows."""
    r = 1.0 / table.q[result.rows.index]
    return float(r @ result.rows.w / r.sum())


def eif_full(result: EstimateResult, table: ObservationTable, tau_hat: float | None = None,
             c_w: float | None = None) -> InfluenceVector:
    """Plug-in full-data EIF of the WATE on phase-2 rows (NaN at delta=0)."""
    rows = result.rows
    if rows.mu1 is None:
        raise InferenceError("the full-data EIF needs fitted outcome models")
    tau_hat = result.tau_hat if tau_hat is None else tau_hat
    c_w = weighted_c_w(table, result) if c_w is None else c_w
    numer, denom = dr_components(table, rows)
    # numer - denom * tau == w * residual + (w + wdot (A - e)) (tau_i - tau)
    phi = (numer - denom * tau_hat) / c_w
    values = np.full(table.n, np.nan)
    values[rows.index] = phi
    r = 1.0 / table.q[rows.index]
    centered = abs(float(r @ phi) / table.n) <= CENTER_TOL
    return InfluenceVector(values=values, kind="full_data", centered=centered)


def eif_observed(phi_full: InfluenceVector, strata: StratumIndex,
                 table: ObservationTable) -> InfluenceVector:
    """E[phi|S] + delta (phi - E[phi|S]) / q, with E[phi|S] the stratum mean."""
    g = stratum_conditional_means(phi_full.values, strata, table)[strata.labels]
    phi = np.where(table.delta, phi_full.values, 0.0)
    values = g + table.delta * (phi - g) / table.q
    return InfluenceVector(values=values, kind="observed",
                           centered=abs(values.mean()) <= CENTER_TOL)


def ipsw_influence(phi_full: InfluenceVector, table: ObservationTable) -> InfluenceVector:
    values = np.where(table.delta, phi_full.values / table.q, 0.0)
    return InfluenceVector(values=values, kind="ipsw", centered=abs(values.mean()) <= CENTER_TOL)


def variance_eif(phi: InfluenceVector, estimate: float, level: float = 0.95,
                 n: int | None = None) -> VarianceReport:
    """Sample variance (divisor n-1) of the influence values; se = sqrt(var/n)."""
    values = np.asarray(phi.values, dtype=float)
    if n is None:
        n = values.shape[0]
    elif n != values.shape[0]:
        raise ValueError("influence vector length does not match n")
    if n < 2:
        raise InferenceError("need at least two rows for a variance estimate")
    if np.any(np.isnan(values)):
        raise InferenceError("influence values must cover all phase-1 rows")
    var = float(np.var(values, ddof=1))
    se = float(np.sqrt(var / n))
    half = z_critical(level) * se
    return VarianceReport(estimate=float(estimate), variance_of_if=var, se=se,
                          ci=(estimate - half, estimate + half), level=level, method="eif",
                          influence=phi)


def eif_influence(result: EstimateResult, table: ObservationTable,
                  strata: StratumIndex | None = None) -> InfluenceVector:
    """EIF-route influence vector for SDR (IPSW-weighted) or EDR (observed-data EIF)."""
    phi = eif_full(result, table)
    if result.estimator is Estimator.EDR:
        if strata is None:
            raise ValueError("EDR influence needs the stratum index")
        return eif_observed(phi, strata, table)
    if result.estimator is Estimator.SDR:
        return ipsw_influence(phi, table)
    raise InferenceError(f"no EIF route for {result.estimator.label}; use the sandwich")


# --- stacked estimating equations -------------------------------------------------


@dataclass(frozen=True, eq=False)
class _Stack:
    """Everything needed to evaluate the stacked equations on phase-2 rows."""

    n: int
    idx: np.ndarray
    r: np.ndarray
    a: np.ndarray
    y: np.ndarray
    x_ps: np.ndarray
    x_out: np.ndarray | None
    estimand: Estimand
    doubly_robust: bool


def _build_stack(table, bundle, result) -> _Stack:
    idx = result.rows.index
    x_out = None
    if result.estimator.doubly_robust:
        if bundle.out1.design_columns != bundle.out0.design_columns:
            raise InferenceError("outcome models must share covariates for the sandwich")
        x_out = table.covariates(bundle.out1.design_columns)[idx]
    return _Stack(
        n=table.n, idx=idx, r=1.0 / table.q[idx], a=table.a[idx].astype(float),
        y=table.y[idx], x_ps=table.covariates(bundle.ps.design_columns)[idx], x_out=x_out,
        estimand=result.estimand, doubly_robust=result.estimator.doubly_robust,
    )


def _theta(result: EstimateResult) -> np.ndarray:
    if result.estimator.doubly_robust:
        return np.array([result.tau_hat])
    return np.array([result.tau_hat, result.mu0_hat, result.mu1_hat])


def _split(st: _Stack, params):
    k = 1 if st.doubly_robust else 3
    p_ps = st.x_ps.shape[1]
    theta, alpha = params[:k], params[k:k + p_ps]
    if not st.doubly_robust:
        return theta, alpha, None, None
    p_out = st.x_out.shape[1]
    beta1 = params[k + p_ps:k + p_ps + p_out]
    beta0 = params[k + p_ps + p_out:]
    return theta, alpha, beta1, beta0


def _fitted(st: _Stack, alpha, beta1, beta0):
    e_raw = expit(st.x_ps @ alpha)
    e = np.clip(e_raw, PROPENSITY_CLAMP, 1.0 - PROPENSITY_CLAMP)
    free = e == e_raw
    mu1 = mu0 = None
    if beta1 is not None:
        mu1 = expit(st.x_out @ beta1)
        mu0 = expit(st.x_out @ beta0)
    return e_raw, e, free, mu1, mu0


def _psi(st: _Stack, theta, e, mu1, mu0) -> np.ndarray:
    """Full-data target estimating function per phase-2 row, shape (m, k)."""
    a, y = st.a, st.y
    w, wdot = weight_and_derivative(st.estimand, e)
    if st.doubly_robust:
        resid = a / e * (y - mu1) - (1 - a) / (1 - e) * (y - mu0)
        denom = w + wdot * (a - e)
        return (w * resid + denom * (mu1 - mu0 - theta[0]))[:, None]
    tau, mu0_w, mu1_w = theta
    return np.column_stack([
        np.full_like(e, mu1_w - mu0_w - tau),
        (1 - a) * w * (y - mu0_w) / (1 - e),
        a * w * (y - mu1_w) / e,
    ])


def _scores(st: _Stack, e_raw, mu1, mu0):
    """delta/q-weighted score contributions per phase-2 row."""
    out = [st.r[:, None] * st.x_ps * (st.a - e_raw)[:, None]]
    if st.doubly_robust:
        out.append((st.r * st.a * (st.y - mu1))[:, None] * st.x_out)
        out.append((st.r * (1 - st.a) * (st.y - mu0))[:, None] * st.x_out)
    return out


def stacked_mean(st: _Stack, params) -> np.ndarray:
    """E_n of the stacked (target, score...) system; zero at the solution."""
    theta, alpha, beta1, beta0 = _split(st, params)
    e_raw, e, _, mu1, mu0 = _fitted(st, alpha, beta1, beta0)
    parts = [st.r @ _psi(st, theta, e, mu1, mu0)]
    parts += [s.sum(axis=0) for s in _scores(st, e_raw, mu1, mu0)]
    return np.concatenate(parts) / st.n


def _analytic_blocks(st: _Stack, theta, alpha, beta1, beta0):
    e_raw, e, free, mu1, mu0 = _fitted(st, alpha, beta1, beta0)
    a, y, r, n = st.a, st.y, st.r, st.n
    w, wdot = weight_and_derivative(st.estimand, e)
    wddot = weight_second_derivative(st.estimand, e)
    de_dalpha = (free * e * (1 - e))[:, None] * st.x_ps
    blocks = {}
    if st.doubly_robust:
        tau = theta[0]
        resid = a / e * (y - mu1) - (1 - a) / (1 - e) * (y - mu0)
        denom = w + wdot * (a - e)
        blocks["J11"] = np.array([[-(r @ denom) / n]])
        dpsi_de = (wdot * resid
                   + w * (-a * (y - mu1) / e**2 - (1 - a) * (y - mu0) / (1 - e) ** 2)
                   + wddot * (a - e) * (mu1 - mu0 - tau))
        blocks["J12"] = ((r * dpsi_de) @ de_dalpha / n)[None, :]
        dpsi_dmu1 = denom - w * a / e
        dpsi_dmu0 = w * (1 - a) / (1 - e) - denom
        blocks["J13"] = ((r * dpsi_dmu1 * mu1 * (1 - mu1)) @ st.x_out / n)[None, :]
        blocks["J14"] = ((r * dpsi_dmu0 * mu0 * (1 - mu0)) @ st.x_out / n)[None, :]
        blocks["J33"] = -(st.x_out * (r * a * mu1 * (1 - mu1))[:, None]).T @ st.x_out / n
        blocks["J44"] = -(st.x_out * (r * (1 - a) * mu0 * (1 - mu0))[:, None]).T @ st.x_out / n
    else:
        _, mu0_w, mu1_w = theta
        rsum = r.sum() / n
        blocks["J11"] = np.array([
            [-rsum, -rsum, rsum],
            [0.0, -(r @ ((1 - a) * w / (1 - e))) / n, 0.0],
            [0.0, 0.0, -(r @ (a * w / e)) / n],
        ])
        d0 = (1 - a) * (y - mu0_w) * (wdot / (1 - e) + w / (1 - e) ** 2)
        d1 = a * (y - mu1_w) * (wdot / e - w / e**2)
        blocks["J12"] = np.vstack([
            np.zeros(st.x_ps.shape[1]),
            (r * d0) @ de_dalpha / n,
            (r * d1) @ de_dalpha / n,
        ])
    p = e_raw * (1 - e_raw)
    blocks["J22"] = -(st.x_ps * (r * p)[:, None]).T @ st.x_ps / n
    return blocks


def _numeric_blocks(st: _Stack, params):
    params = np.asarray(params, dtype=float)
    k = 1 if st.doubly_robust else 3
    p_ps = st.x_ps.shape[1]
    jac = np.empty((params.size, params.size))
    for j in range(params.size):
        h = 1e-6 * (1.0 + abs(params[j]))
        up, dn = params.copy(), params.copy()
        up[j] += h
        dn[j] -= h
        jac[:, j] = (stacked_mean(st, up) - stacked_mean(st, dn)) / (2 * h)
    if not np.all(np.isfinite(jac)):
        raise InferenceError("non-finite finite-difference Jacobian entries")
    blocks = {"J11": jac[:k, :k], "J12": jac[:k, k:k + p_ps], "J22": jac[k:k + p_ps, k:k + p_ps]}
    if st.doubly_robust:
        p_out = st.x_out.shape[1]
        s1 = slice(k + p_ps, k + p_ps + p_out)
        s0 = slice(k + p_ps + p_out, None)
        blocks.update(J13=jac[:k, s1], J14=jac[:k, s0], J33=jac[s1, s1], J44=jac[s0, s0])
    return blocks


def jacobian_blocks(table: ObservationTable, bundle: NuisanceBundle, result: EstimateResult,
                    method: str = "analytic") -> dict[str, np.ndarray]:
    """Blocks J11..J44 of the stacked system's Jacobian at the fitted values."""
    st = _build_stack(table, bundle, result)
    params = [_theta(result), bundle.ps.coefficients]
    if st.doubly_robust:
        params += [bundle.out1.coefficients, bundle.out0.coefficients]
    params = np.concatenate(params)
    if method == "analytic":
        return _analytic_blocks(st, *_split(st, params))
    if method == "numeric":
        return _numeric_blocks(st, params)
    raise ValueError(f"unknown Jacobian method {method!r}")


def sandwich_influence(table: ObservationTable, bundle: NuisanceBundle, result: EstimateResult,
                       strata: StratumIndex | None = None, account_for_nuisance: bool = True,
                       jacobian: str = "analytic") -> InfluenceVector:
    """Influence function of tau from the stacked IPSW or enriched system."""
    if result.estimator.enriched and strata is None:
        raise ValueError(f"{result.estimator.label} sandwich needs the stratum index")
    st = _build_stack(table, bundle, result)
    theta = _theta(result)
    beta1 = bundle.out1.coefficients if st.doubly_robust else None
    beta0 = bundle.out0.coefficients if st.doubly_robust else None
    alpha = bundle.ps.coefficients
    e_raw, e, _, mu1, mu0 = _fitted(st, alpha, beta1, beta0)
    blocks = jacobian_blocks(table, bundle, result, jacobian)

    psi = _psi(st, theta, e, mu1, mu0)
    k = psi.shape[1]
    main = np.zeros((table.n, k))
    main[st.idx] = st.r[:, None] * psi
    if result.estimator.enriched:
        g = stratum_conditional_means(psi, strata, table)
        aug = 1.0 - np.where(table.delta, 1.0 / table.q, 0.0)
        main += aug[:, None] * g[strata.labels]

    if account_for_nuisance:
        pairs = [("J12", "J22")]
        if st.doubly_robust:
            pairs += [("J13", "J33"), ("J14", "J44")]
        for (cross, diag), score in zip(pairs, _scores(st, e_raw, mu1, mu0)):
            try:
                coef = np.linalg.solve(blocks[diag].T, blocks[cross].T).T
            except np.linalg.LinAlgError:
                raise InferenceError(f"singular {diag}") from None
            main[st.idx] -= score @ coef.T
    try:
        phi = -np.linalg.solve(blocks["J11"], main.T).T
    except np.linalg.LinAlgError:
        raise InferenceError("singular J11") from None
    values = phi[:, 0]
    return InfluenceVector(values=values, kind="stacked_sandwich",
                           centered=abs(values.mean()) <= CENTER_TOL)


def variance_sandwich(table: ObservationTable, bundle: NuisanceBundle, result: EstimateResult,
                      strata: StratumIndex | None = None, level: float = 0.95,
                      account_for_nuisance: bool = True,
                      jacobian: str = "analytic") -> VarianceReport:
    phi = sandwich_influence(table, bundle, result, strata, account_for_nuisance, jacobian)
    report = variance_eif(phi, result.tau_hat, level)
    return VarianceReport(estimate=report.estimate, variance_of_if=report.variance_of_if,
                          se=report.se, ci=report.ci, level=level, method="sandwich",
                          influence=phi)


def default_variance_method(estimator) -> str:
    return "eif" if Estimator.parse(estimator).doubly_robust else "sandwich"


def estimate_variance(table: ObservationTable, bundle: NuisanceBundle, result: EstimateResult,
                      strata: StratumIndex | None = None, method: str = "auto",
                      level: float = 0.95) -> VarianceReport:
    """Variance by the requested route; ``auto`` picks EIF for DR, sandwich otherwise."""
    if method == "auto":
        method = default_variance_method(result.estimator)
    if method == "eif":
        return variance_eif(eif_influence(result, table, strata), result.tau_hat, level)
    if method == "sandwich":
        return variance_sandwich(table, bundle, result, strata, level)
    raise ValueError(f"unknown variance method {method!r}")
