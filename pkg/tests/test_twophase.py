import warnings

import numpy as np
import pytest
from scipy.stats import norm

from twophase_wate.dataset import strata_from_keys
from twophase_wate.twophase import (
    SamplingError,
    SamplingScheme,
    apply_phase2,
    equal_allocation,
    poisson_sample,
    probabilities_from_shares,
    reference_probabilities,
    srswor_sample,
)

from helpers import full_table


def _strata(labels):
    labels = np.asarray(labels, float)
    return strata_from_keys(labels[:, None], ("S",))


def test_poisson_all_ones():
    s = _strata([0, 0, 1, 1, 2])
    delta, q = poisson_sample(s, [1.0, 1.0, 1.0], 3)
    assert delta.all() and np.all(q == 1.0)


def test_poisson_concentration_and_determinism():
    s = _strata(np.zeros(1_000_000))
    delta, q = poisson_sample(s, [0.5], 123)
    assert abs(delta.mean() - 0.5) <= 0.0015
    again, _ = poisson_sample(s, [0.5], 123)
    np.testing.assert_array_equal(delta, again)


def test_poisson_errors():
    s = _strata([0, 1])
    with pytest.raises(SamplingError):
        poisson_sample(s, [0.5], 1)
    with pytest.raises(SamplingError, match="no sampling probability"):
        poisson_sample(s, {(0.0,): 0.5}, 1)
    with pytest.raises(SamplingError):
        poisson_sample(s, [0.0, 0.5], 1)


def test_srswor_exact_counts():
    s = _strata([0, 0, 0, 0, 1, 1, 1])
    delta, q = srswor_sample(s, [2, 3], 9)
    assert delta[:4].sum() == 2 and delta[4:].all()
    np.testing.assert_allclose(q, [0.5] * 4 + [1.0] * 3)
    with pytest.raises(SamplingError, match="exceeds"):
        srswor_sample(s, [5, 1], 9)


def test_srswor_inclusion_frequencies():
    s = _strata([0] * 5 + [1] * 8)
    counts = np.zeros(13)
    reps = 10_000
    for seed in range(reps):
        delta, _ = srswor_sample(s, [2, 3], seed)
        counts += delta
    freq = counts / reps
    target = np.array([0.4] * 5 + [3 / 8] * 8)
    sd = np.sqrt(target * (1 - target) / reps)
    # per-row normal bound, Bonferroni-adjusted so the 13 rows jointly keep a 0.1% false-alarm rate
    z = norm.ppf(1 - 0.0005 / freq.size)
    assert np.all(np.abs(freq - target) <= z * sd)


def test_horvitz_thompson_unbiased_under_poisson():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, 50)
    s = _strata(labels)
    f = rng.normal(size=50) + labels
    q_k = np.array([0.2, 0.5, 0.8])
    reps = 10_000
    totals = np.empty(reps)
    for i in range(reps):
        delta, q = poisson_sample(s, q_k, i)
        totals[i] = np.sum(delta / q * f)
    se = totals.std(ddof=1) / np.sqrt(reps)
    assert abs(totals.mean() - f.sum()) <= 3 * se


def test_reference_probabilities():
    s = _strata([0, 1, 2, 3] * 25)
    np.testing.assert_allclose(reference_probabilities(s, 10, 1000), 0.01)
    np.testing.assert_allclose(probabilities_from_shares([0.4, 0.3, 0.2, 0.1], 100, 1000),
                               [0.0625, 1 / 12, 0.125, 0.25])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        q = probabilities_from_shares([0.999, 0.001], 100, 1000)
    assert q[1] == 1.0 and caught


def test_scheme_and_masking():
    t = full_table(200, 1)
    s = strata_from_keys(np.column_stack([t.a, t.v[:, 0]]), ("A", "V1"))
    scheme = SamplingScheme("srswor", m_by_stratum=equal_allocation(s, 40), seed=4)
    delta, q = scheme.draw(s)
    masked = apply_phase2(t, delta, q, mask_outcome=True)
    assert np.isnan(masked.w[~delta]).all() and np.isnan(masked.y[~delta]).all()
    assert not np.isnan(masked.y[delta]).any()
    with pytest.raises(SamplingError):
        SamplingScheme("cluster")
