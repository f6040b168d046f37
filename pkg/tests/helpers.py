"""Shared builders for small random two-phase tables."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from twophase_wate.dataset import ColumnRoles, ObservationTable, build_strata
from twophase_wate.twophase import apply_phase2, equal_allocation, poisson_sample, srswor_sample

ROLES = ColumnRoles(v=("V1", "V2"), w=("W",))
KEYS_ODS = ("A", "V1", "Y")
KEYS_NON_ODS = ("A", "V1")


def full_table(n: int, seed: int) -> ObservationTable:
    """Single-phase table with binary V1, V2, continuous W, binary A and Y."""
    rng = np.random.default_rng(seed)
    v = rng.integers(0, 2, size=(n, 2)).astype(float)
    w = rng.normal(size=n)
    e = expit(-0.3 + 0.6 * v[:, 0] - 0.4 * v[:, 1] + 0.7 * w)
    a = (rng.random(n) < e).astype(int)
    mu = expit(-0.2 + 0.8 * a + 0.5 * v[:, 0] + 0.3 * v[:, 1] + 0.6 * w - 0.3 * a * w)
    y = (rng.random(n) < mu).astype(float)
    return ObservationTable(a=a, y=y, v=v, w=w[:, None], delta=np.ones(n), q=np.ones(n),
                            roles=ROLES)


def poisson_table(n: int, seed: int, ods: bool = True, q_levels=(0.3, 0.6)) -> ObservationTable:
    full = full_table(n, seed)
    keys = KEYS_ODS if ods else KEYS_NON_ODS
    strata = build_strata(full, keys)
    rng = np.random.default_rng(seed + 1)
    q_k = rng.uniform(*q_levels, size=strata.K)
    delta, q = poisson_sample(strata, q_k, seed + 2)
    return apply_phase2(full, delta, q, mask_outcome=not ods)


def srswor_table(n: int, seed: int, m: int, ods: bool = True) -> ObservationTable:
    full = full_table(n, seed)
    keys = KEYS_ODS if ods else KEYS_NON_ODS
    strata = build_strata(full, keys)
    delta, q = srswor_sample(strata, equal_allocation(strata, m), seed + 3)
    return apply_phase2(full, delta, q, mask_outcome=not ods)
