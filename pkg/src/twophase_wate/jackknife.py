"""Delete-d jackknife bias correction with groups balanced within each phase."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dataset import ObservationTable

DEFAULT_GROUPS = 20


class JackknifeError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class JackknifePlan:
    D: int
    group_of: np.ndarray
    seed: int | None
    stratified_by_phase: bool = True

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.group_of, minlength=self.D)

    def rows_without(self, g: int) -> np.ndarray:
        return np.flatnonzero(self.group_of != g)


def partition_stratified(n: int, delta, D: int = DEFAULT_GROUPS, seed: int | None = 0) -> JackknifePlan:
    """Shuffle rows within each phase and deal them round-robin into D groups.

    The dealing position carries over from the phase-2 rows to the phase-1-only
    rows, so group sizes differ by at most one both overall and within a phase.
    """
    delta = np.asarray(delta, dtype=bool)
    if delta.shape != (n,):
        raise ValueError("delta must have one entry per row")
    if D < 2:
        raise JackknifeError("need at least two jackknife groups")
    counts = [int(delta.sum()), int(n - delta.sum())]
    nonempty = [c for c in counts if c > 0]
    if D > min(nonempty):
        raise JackknifeError(f"D={D} exceeds the size of a phase ({min(nonempty)} rows)")
    rng = np.random.default_rng(seed)
    group_of = np.empty(n, dtype=np.intp)
    offset = 0
    for phase in (True, False):
        rows = rng.permutation(np.flatnonzero(delta == phase))
        group_of[rows] = (offset + np.arange(rows.size)) % D
        offset = (offset + rows.size) % D
    return JackknifePlan(D=D, group_of=group_of, seed=seed, stratified_by_phase=True)


def jackknife_correct(estimate_fn: Callable[[ObservationTable], object], table: ObservationTable,
                      plan: JackknifePlan, full_estimate=None):
    """Return ``(D * full - (D - 1) * mean(replicates), replicates)``.

    ``estimate_fn`` may return a scalar or an array; replicates are stacked
    along the first axis.
    """
    if plan.group_of.shape[0] != table.n:
        raise ValueError("jackknife plan was built for a different table")
    full = np.asarray(estimate_fn(table) if full_estimate is None else full_estimate, dtype=float)
    reps = []
    for g in range(plan.D):
        try:
            reps.append(np.asarray(estimate_fn(table.take(plan.rows_without(g))), dtype=float))
        except Exception as exc:
            raise JackknifeError(f"jackknife replicate without group {g} failed: {exc}") from exc
    reps = np.stack(reps)
    corrected = plan.D * full - (plan.D - 1) * reps.mean(axis=0)
    if corrected.ndim == 0:
        corrected = float(corrected)
    return corrected, reps
