"""Phase-2 selection under Poisson and stratified SRSWOR designs."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .dataset import ObservationTable, StratumIndex

_SCHEME_CODES = {"poisson": 1, "srswor": 2}


class SamplingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SamplingScheme:
    """Either Poisson probabilities or SRSWOR counts, one entry per stratum."""

    kind: str
    q_by_stratum: np.ndarray | None = None
    m_by_stratum: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _SCHEME_CODES:
            raise SamplingError(f"unknown sampling scheme {self.kind!r}")
        if self.kind == "poisson" and self.q_by_stratum is None:
            raise SamplingError("Poisson sampling needs q_by_stratum")
        if self.kind == "srswor" and self.m_by_stratum is None:
            raise SamplingError("SRSWOR needs m_by_stratum")

    def draw(self, strata: StratumIndex):
        if self.kind == "poisson":
            return poisson_sample(strata, self.q_by_stratum, self.seed)
        return srswor_sample(strata, self.m_by_stratum, self.seed)


def _stratum_rng(seed: int, scheme: str, k: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), _SCHEME_CODES[scheme], int(k)])
    return np.random.Generator(np.random.Philox(ss))


def _per_stratum(values, strata: StratumIndex, what: str) -> np.ndarray:
    if isinstance(values, Mapping):
        try:
            return np.array([values[key] for key in strata.keys], dtype=float)
        except KeyError as exc:
            raise SamplingError(f"no {what} for stratum {exc.args[0]}") from None
    arr = np.asarray(values, dtype=float)
    if arr.shape != (strata.K,):
        raise SamplingError(f"expected {strata.K} {what} values, got shape {arr.shape}")
    return arr


def _rows_by_stratum(strata: StratumIndex):
    order = np.argsort(strata.labels, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(strata.counts)])
    return [order[bounds[k]:bounds[k + 1]] for k in range(strata.K)]


def poisson_sample(strata: StratumIndex, q_by_stratum, seed: int):
    """Independent Bernoulli(q_k) inclusion; returns ``(delta, q)`` per row."""
    q_k = _per_stratum(q_by_stratum, strata, "sampling probability")
    if np.any(~np.isfinite(q_k)) or np.any(q_k <= 0) or np.any(q_k > 1):
        raise SamplingError("sampling probabilities must lie in (0, 1]")
    delta = np.zeros(strata.n, dtype=bool)
    for k, rows in enumerate(_rows_by_stratum(strata)):
        if rows.size:
            delta[rows] = _stratum_rng(seed, "poisson", k).random(rows.size) < q_k[k]
    return delta, q_k[strata.labels]


def srswor_sample(strata: StratumIndex, m_by_stratum, seed: int):
    """Exactly m_k rows per stratum without replacement; q = m_k / n_k."""
    m_k = _per_stratum(m_by_stratum, strata, "sample size")
    if np.any(m_k != np.round(m_k)) or np.any(m_k < 0):
        raise SamplingError("stratum sample sizes must be nonnegative integers")
    m_k = m_k.astype(np.int64)
    over = np.flatnonzero(m_k > strata.counts)
    if over.size:
        k = int(over[0])
        raise SamplingError(f"m_k={m_k[k]} exceeds n_k={strata.counts[k]} in stratum {strata.keys[k]}")
    delta = np.zeros(strata.n, dtype=bool)
    for k, rows in enumerate(_rows_by_stratum(strata)):
        if m_k[k]:
            chosen = _stratum_rng(seed, "srswor", k).choice(rows.size, size=m_k[k], replace=False)
            delta[rows[chosen]] = True
    if np.any((m_k == 0) & (strata.counts > 0)):
        k = int(np.flatnonzero((m_k == 0) & (strata.counts > 0))[0])
        raise SamplingError(f"m_k=0 in nonempty stratum {strata.keys[k]} gives q=0")
    q_k = m_k / np.maximum(strata.counts, 1)
    return delta, q_k[strata.labels]


def reference_probabilities(reference_strata: StratumIndex, m: int, n: int) -> np.ndarray:
    """``q_k = min(1, (m/K) / (n p_k))`` from stratum shares of a reference sample."""
    if np.any(reference_strata.counts == 0):
        raise SamplingError("empty stratum in the reference sample")
    return probabilities_from_shares(reference_strata.shares, m, n)


def probabilities_from_shares(shares, m: int, n: int) -> np.ndarray:
    shares = np.asarray(shares, dtype=float)
    if np.any(shares <= 0):
        raise SamplingError("reference shares must be positive")
    raw = (m / shares.size) / (n * shares)
    if np.any(raw > 1):
        warnings.warn(f"{int(np.sum(raw > 1))} stratum probabilities capped at 1",
                      RuntimeWarning, stacklevel=2)
    return np.minimum(1.0, raw)


def equal_allocation(strata: StratumIndex, m: int) -> np.ndarray:
    """SRSWOR counts ``min(n_k, round(m / K))`` for an equal-per-stratum design."""
    target = int(round(m / strata.K))
    return np.minimum(strata.counts, target)


def apply_phase2(table: ObservationTable, delta, q, mask_outcome: bool = False) -> ObservationTable:
    """Attach phase-2 indicators, hide high-cost covariates (and optionally Y) at delta=0."""
    delta = np.asarray(delta, dtype=bool)
    w = np.array(table.w, dtype=float)
    w[~delta] = np.nan
    y = np.array(table.y, dtype=float)
    if mask_outcome:
        y[~delta] = np.nan
    return table.replace(delta=delta, q=np.asarray(q, dtype=float), w=w, y=y)
