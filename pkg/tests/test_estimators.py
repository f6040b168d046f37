import numpy as np
import pandas as pd
import pytest
from scipy.optimize import root
from scipy.special import expit

from twophase_wate.dataset import ColumnRoles, ObservationTable, build_strata
from twophase_wate.estimand import ALL_ESTIMANDS, weight_and_derivative
from twophase_wate.estimators import (
    ALL_ESTIMATORS,
    EmptyStratumError,
    RowQuantities,
    dr_components,
    estimate,
    estimate_edr,
    estimate_eiw,
    estimate_sdr,
    estimate_siw,
    stratum_conditional_means,
)
from twophase_wate.nuisance import fit_nuisances

from helpers import KEYS_ODS, KEYS_NON_ODS, full_table, poisson_table, srswor_table

ROLES = ColumnRoles(v=("V1",), w=())


def _known_e_rows(table, e, estimand="ate", mu1=None, mu0=None):
    idx = np.flatnonzero(table.delta)
    e = np.asarray(e, float)[idx]
    w, wdot = weight_and_derivative(estimand, e)
    m1 = None if mu1 is None else np.asarray(mu1, float)[idx]
    m0 = None if mu0 is None else np.asarray(mu0, float)[idx]
    return RowQuantities(index=idx, e=e, w=w, wdot=wdot, mu1=m1, mu0=m0)


def _toy(q=(1, 1, 1, 1)):
    return ObservationTable(a=[1, 1, 0, 0], y=[1.0, 0, 1, 0], v=[[0], [1], [0], [1]], w=np.empty((4, 0)),
                            delta=np.ones(4), q=q, roles=ROLES)


def test_siw_hand_examples():
    t = _toy()
    r = estimate(t, "siw", "ate", None, rows=_known_e_rows(t, np.full(4, 0.5)))
    assert r.tau_hat == pytest.approx(0.0, abs=1e-15)
    t = _toy(q=(0.5, 1, 1, 1))
    r = estimate(t, "siw", "ate", None, rows=_known_e_rows(t, np.full(4, 0.5)))
    assert r.tau_hat == pytest.approx(2 / 3 - 1 / 2, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_single_phase_siw_is_hajek(seed):
    t = full_table(300, seed)
    bundle = fit_nuisances(t)
    e = expit(t.covariates(bundle.ps.design_columns) @ bundle.ps.coefficients)
    a, y = t.a, t.y
    hajek = (np.sum(a * y / e) / np.sum(a / e)
             - np.sum((1 - a) * y / (1 - e)) / np.sum((1 - a) / (1 - e)))
    assert estimate_siw(t, bundle.ps, "ate").tau_hat == pytest.approx(hajek, abs=1e-12)


def test_sdr_saturated_outcome_model_gives_weighted_cate_mean():
    t = _toy()
    e = np.array([0.4, 0.6, 0.3, 0.5])
    mu1 = np.array([1.0, 0.0, 0.2, 0.9])
    mu0 = np.array([0.3, 0.1, 1.0, 0.0])
    for est in ("ate", "att"):
        rows = _known_e_rows(t, e, est, mu1, mu0)
        r = estimate(t, "sdr", est, None, rows=rows)
        d = rows.w + rows.wdot * (t.a - rows.e)
        assert r.tau_hat == pytest.approx(np.sum(d * (mu1 - mu0)) / d.sum(), abs=1e-15)


def _iptw_system(table, estimand):
    """Stacked (tau, mu0, mu1, alpha) equations evaluated directly."""
    x = table.covariates(("V1", "V2", "W"))
    r = np.where(table.delta, 1 / table.q, 0.0)
    a = table.a.astype(float)
    y = np.nan_to_num(table.y)
    xx = np.nan_to_num(x)

    def f(params):
        tau, mu0, mu1 = params[:3]
        alpha = params[3:]
        e = expit(xx @ alpha)
        w, _ = weight_and_derivative(estimand, e)
        return np.concatenate([
            [np.sum(r * (mu1 - mu0 - tau))],
            [np.sum(r * (1 - a) * w * (y - mu0) / (1 - e))],
            [np.sum(r * a * w * (y - mu1) / e)],
            xx.T @ (r * (a - e)),
        ])
    return f


def _dr_system(table, estimand, strata=None):
    """Stacked (tau, alpha, beta1, beta0) equations, optionally enriched by group means."""
    x = np.nan_to_num(table.covariates(("V1", "V2", "W")))
    phase2 = table.delta
    r = np.where(phase2, 1 / table.q, 0.0)
    a = table.a.astype(float)
    y = np.nan_to_num(table.y)
    p = x.shape[1]

    def f(params):
        tau = params[0]
        alpha, b1, b0 = params[1:1 + p], params[1 + p:1 + 2 * p], params[1 + 2 * p:]
        e = expit(x @ alpha)
        mu1, mu0 = expit(x @ b1), expit(x @ b0)
        w, wdot = weight_and_derivative(estimand, e)
        psi = (w * (a * (y - mu1) / e - (1 - a) * (y - mu0) / (1 - e))
               + (w + wdot * (a - e)) * (mu1 - mu0 - tau))
        target = np.sum(r * psi)
        if strata is not None:
            frame = pd.DataFrame({"s": strata.labels, "psi": psi})
            g = frame[phase2].groupby("s")["psi"].mean()
            target += np.sum((1 - r) * g.reindex(strata.labels).to_numpy())
        return np.concatenate([
            [target],
            x.T @ (r * (a - e)),
            x.T @ (r * a * (y - mu1)),
            x.T @ (r * (1 - a) * (y - mu0)),
        ])
    return f


@pytest.mark.parametrize("estimand", ALL_ESTIMANDS)
def test_siw_solves_stacked_system(estimand):
    t = poisson_table(600, 21)
    bundle = fit_nuisances(t)
    res = estimate_siw(t, bundle.ps, estimand)
    f = _iptw_system(t, estimand)
    sol = root(f, np.zeros(7), method="hybr", tol=1e-14)
    assert np.max(np.abs(f(sol.x))) < 1e-9
    assert res.tau_hat == pytest.approx(sol.x[0], abs=1e-10)
    assert res.mu1_hat == pytest.approx(sol.x[2], abs=1e-10)


@pytest.mark.parametrize("estimand", ALL_ESTIMANDS)
@pytest.mark.parametrize("enriched", [False, True])
def test_dr_solves_stacked_system(estimand, enriched):
    t = poisson_table(600, 22)
    bundle = fit_nuisances(t)
    strata = build_strata(t, KEYS_ODS)
    if enriched:
        res = estimate_edr(t, bundle, estimand, strata)
    else:
        res = estimate_sdr(t, bundle, estimand)
    f = _dr_system(t, estimand, strata if enriched else None)
    sol = root(f, np.zeros(13), method="hybr", tol=1e-14)
    assert np.max(np.abs(f(sol.x))) < 1e-9
    assert res.tau_hat == pytest.approx(sol.x[0], abs=1e-10)


def _eiw_oracle(table, e, estimand, strata):
    """Enriched ratio estimator with group means from pandas."""
    w, _ = weight_and_derivative(estimand, e)
    a, y = table.a, np.nan_to_num(table.y)
    r = np.where(table.delta, 1 / table.q, 0.0)
    frame = pd.DataFrame({"s": strata.labels, "h1": a * w / e, "h0": (1 - a) * w / (1 - e)})
    frame["h1y"] = frame.h1 * y
    frame["h0y"] = frame.h0 * y
    g = frame[table.delta].groupby("s").mean().reindex(strata.labels).to_numpy()
    cols = list(frame.columns[1:])
    totals = {c: np.sum(r * frame[c]) + np.sum((1 - r) * g[:, j]) for j, c in enumerate(cols)}
    return totals["h1y"] / totals["h1"] - totals["h0y"] / totals["h0"]


@pytest.mark.parametrize("estimand", ALL_ESTIMANDS)
def test_eiw_matches_direct_evaluation(estimand):
    t = poisson_table(800, 23)
    bundle = fit_nuisances(t, outcome_models=False)
    strata = build_strata(t, KEYS_ODS)
    e = expit(np.nan_to_num(t.covariates(bundle.ps.design_columns)) @ bundle.ps.coefficients)
    res = estimate_eiw(t, bundle.ps, estimand, strata)
    assert res.tau_hat == pytest.approx(_eiw_oracle(t, e, estimand, strata), abs=1e-10)


def test_edr_single_stratum_formula():
    t = poisson_table(500, 24, q_levels=(0.4, 0.4))
    t = t.replace(q=np.full(t.n, 0.4))
    bundle = fit_nuisances(t)
    strata = build_strata(t, ())
    res = estimate_edr(t, bundle, "att", strata)
    sdr = estimate_sdr(t, bundle, "att")
    numer, denom = dr_components(t, sdr.rows)
    m, n = numer.size, t.n
    c = n - m / 0.4
    expected = (numer.sum() / 0.4 + c * numer.mean()) / (denom.sum() / 0.4 + c * denom.mean())
    assert res.tau_hat == pytest.approx(expected, abs=1e-14)
    # with one stratum the enriched ratio reduces to the plain phase-2 ratio
    assert res.tau_hat == pytest.approx(numer.sum() / denom.sum(), abs=1e-12)


def test_stratum_conditional_means():
    t = poisson_table(400, 25)
    strata = build_strata(t, KEYS_ODS)
    assert np.allclose(stratum_conditional_means(np.full(t.n, 3.5), strata, t), 3.5)
    vals = np.random.default_rng(0).normal(size=t.n)
    oracle = pd.Series(vals[t.delta]).groupby(strata.labels[t.delta]).mean()
    np.testing.assert_allclose(stratum_conditional_means(vals, strata, t), oracle.to_numpy(),
                               rtol=1e-13, atol=1e-16)
    one = ObservationTable(a=[1, 0, 1], y=[0.0, 1, 1], v=[[0], [0], [0]], w=np.empty((3, 0)),
                           delta=np.ones(3), q=np.ones(3), roles=ROLES)
    assert stratum_conditional_means([1.0, 2.0, 3.0], build_strata(one), one) == pytest.approx([2.0])


def test_empty_stratum_is_an_error():
    t = poisson_table(300, 26)
    strata = build_strata(t, KEYS_ODS)
    k = 0
    delta = t.delta & (strata.labels != k)
    w = np.array(t.w)
    w[~delta] = np.nan
    t2 = t.replace(delta=delta, w=w)
    bundle = fit_nuisances(t2)
    with pytest.raises(EmptyStratumError, match="empty phase-2 stratum"):
        estimate_eiw(t2, bundle.ps, "ate", build_strata(t2, KEYS_ODS))


@pytest.mark.parametrize("ods", [True, False])
def test_srswor_enrichment_vanishes(ods):
    t = srswor_table(1000, 27, m=200, ods=ods)
    strata = build_strata(t, KEYS_ODS if ods else KEYS_NON_ODS)
    bundle = fit_nuisances(t)
    for est in ALL_ESTIMANDS:
        siw = estimate_siw(t, bundle.ps, est).tau_hat
        eiw = estimate_eiw(t, bundle.ps, est, strata).tau_hat
        sdr = estimate_sdr(t, bundle, est).tau_hat
        edr = estimate_edr(t, bundle, est, strata).tau_hat
        assert abs(eiw - siw) <= 1e-10 and abs(edr - sdr) <= 1e-10


def test_single_phase_enrichment_is_inert():
    t = full_table(400, 28)
    strata = build_strata(t, KEYS_ODS)
    bundle = fit_nuisances(t)
    for est in ALL_ESTIMANDS:
        taus = {name: estimate(t, name, est, bundle, strata).tau_hat for name in ALL_ESTIMATORS}
        assert taus["eiw"] == pytest.approx(taus["siw"], abs=1e-12)
        assert taus["edr"] == pytest.approx(taus["sdr"], abs=1e-12)


@pytest.mark.parametrize("estimator", ALL_ESTIMATORS)
def test_location_equivariance(estimator):
    t = poisson_table(500, 29)
    strata = build_strata(t, KEYS_ODS)
    bundle = fit_nuisances(t)
    base = estimate(t, estimator, "ate", bundle, strata)
    rows = base.rows
    shift = 2.75
    shifted_rows = RowQuantities(rows.index, rows.e, rows.w, rows.wdot,
                                 None if rows.mu1 is None else rows.mu1 + shift,
                                 None if rows.mu0 is None else rows.mu0 + shift)
    t2 = t.replace(y=t.y + shift)
    moved = estimate(t2, estimator, "ate", bundle, strata, rows=shifted_rows)
    assert moved.tau_hat == pytest.approx(base.tau_hat, abs=1e-12)
    if base.mu1_hat is not None:
        assert moved.mu1_hat == pytest.approx(base.mu1_hat + shift, abs=1e-12)
