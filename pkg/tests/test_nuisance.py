import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit, logit

from twophase_wate.nuisance import (
    FittedGLM,
    SeparationError,
    clamp_propensity,
    fit_nuisances,
    fit_weighted_logistic,
    predict_probability,
    score_and_hessian,
    weighted_log_likelihood,
)

from helpers import poisson_table


def irls_oracle(x, y, weights, iters=60):
    """Textbook IRLS: repeated weighted least squares on the working response."""
    beta = np.zeros(x.shape[1])
    for _ in range(iters):
        eta = x @ beta
        p = expit(eta)
        v = p * (1 - p)
        z = eta + (y - p) / v
        sw = np.sqrt(weights * v)
        beta = np.linalg.lstsq(x * sw[:, None], z * sw, rcond=None)[0]
    return beta


def _random_instance(seed, n=200, p=4):
    rng = np.random.default_rng(seed)
    x = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    beta = rng.normal(scale=0.7, size=p)
    y = (rng.random(n) < expit(x @ beta)).astype(float)
    w = rng.uniform(0.5, 3.0, size=n)
    return x, y, w


def _model(beta):
    beta = np.asarray(beta, float)
    return FittedGLM(beta, (), True, 0, 0.0, np.ones(1))


@pytest.mark.parametrize("y,weights,expected", [
    ((0, 1, 0, 1), (1, 1, 1, 1), 0.0),
    ((1, 1, 1, 0), (1, 1, 1, 1), math.log(3)),
    ((1, 1, 1, 0), (2, 1, 1, 1), logit(0.8)),
])
def test_intercept_only_closed_forms(y, weights, expected):
    fit = fit_weighted_logistic(np.ones((4, 1)), np.array(y, float), np.array(weights, float))
    assert fit.converged
    assert fit.coefficients[0] == pytest.approx(expected, abs=1e-10)


def test_predictions():
    assert predict_probability(_model([0.0]), np.ones((3, 1))) == pytest.approx(0.5)
    x = np.array([[1.0, 2.0, -0.5], [1.0, 0.0, -1.0]])
    np.testing.assert_allclose(predict_probability(_model([-2.10, 0.5, 1.0]), x),
                               expit(-2.10 + 0.5 * x[:, 1] + x[:, 2]))
    big = predict_probability(_model([1e6, -1e6]), np.array([[1.0, 0.5], [1.0, 2.0]]))
    assert np.all(np.isfinite(big)) and np.all((big >= 0) & (big <= 1))
    with pytest.raises(ValueError):
        predict_probability(_model([0.0, 1.0]), np.ones((2, 3)))


def test_score_hessian_examples():
    score, hess = score_and_hessian(_model([0.0]), np.ones((2, 1)), [0.0, 1.0], [1.0, 1.0])
    assert score == pytest.approx([0.0])
    np.testing.assert_allclose(hess, [[-0.5]])


@pytest.mark.parametrize("seed", range(5))
def test_matches_irls_oracle(seed):
    x, y, w = _random_instance(seed)
    fit = fit_weighted_logistic(x, y, np.ones_like(w))
    np.testing.assert_allclose(fit.coefficients, irls_oracle(x, y, np.ones_like(w)), atol=1e-8)
    fit_w = fit_weighted_logistic(x, y, w)
    np.testing.assert_allclose(fit_w.coefficients, irls_oracle(x, y, w), atol=1e-8)
    score, _ = score_and_hessian(fit_w, x, y, w)
    assert np.max(np.abs(score)) < 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 5), st.integers(10, 50))
def test_gradient_and_hessian_match_finite_differences(seed, p, n):
    rng = np.random.default_rng(seed)
    x = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    y = rng.integers(0, 2, n).astype(float)
    w = rng.uniform(0.1, 2.0, n)
    beta = rng.normal(size=p)
    score, hess = score_and_hessian(_model(beta), x, y, w)
    h = 1e-5
    for j in range(p):
        step = np.zeros(p)
        step[j] = h
        g = (weighted_log_likelihood(beta + step, x, y, w)
             - weighted_log_likelihood(beta - step, x, y, w)) / (2 * h)
        assert g == pytest.approx(score[j], abs=1e-6 * max(1.0, abs(score[j])))
        s_plus, _ = score_and_hessian(_model(beta + step), x, y, w)
        s_minus, _ = score_and_hessian(_model(beta - step), x, y, w)
        np.testing.assert_allclose((s_plus - s_minus) / (2 * h), hess[:, j], atol=1e-5)


def test_weight_scale_invariance():
    x, y, w = _random_instance(7)
    a = fit_weighted_logistic(x, y, w).coefficients
    b = fit_weighted_logistic(x, y, 37.5 * w).coefficients
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_row_mask_excludes_rows():
    x, y, w = _random_instance(8)
    mask = np.arange(len(y)) % 3 != 0
    a = fit_weighted_logistic(x, y, w, row_mask=mask).coefficients
    b = fit_weighted_logistic(x[mask], y[mask], w[mask]).coefficients
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_separation_detected():
    x = np.column_stack([np.ones(6), [-3, -2, -1, 1, 2, 3]])
    y = np.array([0, 0, 0, 1, 1, 1], float)
    with pytest.raises(SeparationError):
        fit_weighted_logistic(x, y, np.ones(6))
    with pytest.raises(SeparationError, match="constant"):
        fit_weighted_logistic(np.ones((3, 1)), np.ones(3), np.ones(3))


def test_clamp_counts_and_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        e, count = clamp_propensity(np.array([0.0, 0.5, 1.0 - 1e-9]))
    assert count == 2 and caught
    np.testing.assert_allclose(e, [1e-6, 0.5, 1 - 1e-6])


def test_fit_nuisances_uses_phase2_rows_with_inverse_q():
    t = poisson_table(2000, 11)
    bundle = fit_nuisances(t)
    x = t.covariates(bundle.ps.design_columns)
    m = t.delta
    oracle = irls_oracle(x[m], t.a[m].astype(float), 1.0 / t.q[m])
    np.testing.assert_allclose(bundle.ps.coefficients, oracle, atol=1e-8)
    arm1 = m & (t.a == 1)
    oracle1 = irls_oracle(x[arm1], t.y[arm1], 1.0 / t.q[arm1])
    np.testing.assert_allclose(bundle.out1.coefficients, oracle1, atol=1e-8)
    assert bundle.ps.design_columns == ("V1", "V2", "W")
