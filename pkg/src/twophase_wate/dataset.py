"""Two-phase observational data: loading, validation and stratum indexing.

A table holds every phase-1 row. Treatment, low-cost covariates ``v``,
the phase-2 indicator ``delta`` and the known sampling probability ``q``
are always observed. High-cost covariates ``w`` are observed only where
``delta == 1``; the outcome may also be missing where ``delta == 0`` when
it is not collected at phase 1.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np


class DataError(ValueError):
    """Input data violate the two-phase table contract."""


@dataclass(frozen=True)
class ColumnRoles:
    """Maps CSV column names to their roles."""

    delta: str = "delta"
    q: str = "q"
    treatment: str = "A"
    outcome: str = "Y"
    v: tuple[str, ...] = ()
    w: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "v", tuple(self.v))
        object.__setattr__(self, "w", tuple(self.w))
        names = [self.delta, self.q, self.treatment, self.outcome, *self.v, *self.w]
        dup = {c for c in names if names.count(c) > 1}
        if dup:
            raise DataError(f"columns assigned more than one role: {sorted(dup)}")

    @property
    def all_columns(self) -> tuple[str, ...]:
        return (self.treatment, self.outcome, *self.v, *self.w, self.delta, self.q)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _violations(a, y, w, delta, q) -> list[str]:
    out = []
    if not np.all(np.isin(a, (0, 1))):
        out.append("treatment must be binary 0/1")
    if np.any(~np.isfinite(q)) or np.any(q <= 0) or np.any(q > 1):
        bad = int(np.flatnonzero(~((q > 0) & (q <= 1)))[0])
        out.append(f"q must lie in (0, 1] (row {bad})")
    phase2 = delta.astype(bool)
    if np.any(phase2 & np.isnan(y)):
        row = int(np.flatnonzero(phase2 & np.isnan(y))[0])
        out.append(f"outcome missing at phase-2 row {row}")
    if w.shape[1] and np.any(phase2[:, None] & np.isnan(w)):
        row = int(np.flatnonzero(np.any(np.isnan(w), axis=1) & phase2)[0])
        out.append(f"high-cost covariate missing at phase-2 row {row}")
    return out


@dataclass(frozen=True, eq=False)
class ObservationTable:
    """Immutable phase-1 table; arrays are read-only after construction."""

    a: np.ndarray
    y: np.ndarray
    v: np.ndarray
    w: np.ndarray
    delta: np.ndarray
    q: np.ndarray
    roles: ColumnRoles = field(default_factory=ColumnRoles)

    def __post_init__(self):
        n = len(self.a)
        a = np.asarray(self.a).astype(np.int8)
        y = np.asarray(self.y, dtype=float)
        v = np.asarray(self.v, dtype=float).reshape(n, -1)
        w = np.asarray(self.w, dtype=float).reshape(n, -1)
        delta = np.asarray(self.delta)
        if not np.all(np.isin(delta, (0, 1))):
            raise DataError("phase-2 indicator must be binary 0/1")
        delta = delta.astype(bool)
        q = np.asarray(self.q, dtype=float)
        for name, arr in (("y", y), ("delta", delta), ("q", q)):
            if arr.shape != (n,):
                raise DataError(f"{name} has shape {arr.shape}, expected ({n},)")
        if v.shape[1] != len(self.roles.v) or w.shape[1] != len(self.roles.w):
            raise DataError("covariate matrices do not match the declared column roles")
        if np.any(np.isnan(v)):
            raise DataError("low-cost covariates must be fully observed")
        problems = _violations(a, y, w, delta, q)
        if problems:
            raise DataError("; ".join(problems))
        for name, arr in (("a", a), ("y", y), ("v", v), ("w", w), ("delta", delta), ("q", q)):
            object.__setattr__(self, name, _readonly(arr))

    @property
    def n(self) -> int:
        return len(self.a)

    @property
    def w_observed(self) -> np.ndarray:
        return ~np.isnan(self.w)

    def column(self, name: str) -> np.ndarray:
        r = self.roles
        if name == r.treatment:
            return self.a.astype(float)
        if name == r.outcome:
            return self.y
        if name == r.delta:
            return self.delta.astype(float)
        if name == r.q:
            return self.q
        if name in r.v:
            return self.v[:, r.v.index(name)]
        if name in r.w:
            return self.w[:, r.w.index(name)]
        raise KeyError(f"unknown column {name!r}")

    def covariates(self, names: Sequence[str], intercept: bool = True) -> np.ndarray:
        """Design matrix with an optional leading intercept column."""
        cols = [self.column(c) for c in names]
        if intercept:
            cols.insert(0, np.ones(self.n))
        return np.column_stack(cols) if cols else np.empty((self.n, 0))

    def take(self, rows) -> "ObservationTable":
        rows = np.asarray(rows)
        return ObservationTable(
            a=self.a[rows], y=self.y[rows], v=self.v[rows], w=self.w[rows],
            delta=self.delta[rows], q=self.q[rows], roles=self.roles,
        )

    def replace(self, **arrays) -> "ObservationTable":
        fields = dict(a=self.a, y=self.y, v=self.v, w=self.w, delta=self.delta, q=self.q,
                      roles=self.roles)
        fields.update(arrays)
        return ObservationTable(**fields)

    def to_csv(self, stream: IO[str]) -> None:
        """Write the table back out; missing cells become empty fields."""
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(self.roles.all_columns)

        def cell(x: float) -> str:
            return "" if math.isnan(x) else repr(float(x))

        for i in range(self.n):
            row = [str(int(self.a[i])), cell(self.y[i])]
            row += [cell(x) for x in self.v[i]]
            row += [cell(x) for x in self.w[i]]
            row += [str(int(self.delta[i])), cell(self.q[i])]
            writer.writerow(row)


def _parse_cell(text: str, row: int, col: str) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"malformed numeric cell at row {row}, column {col!r}: {text!r}") from None
    if math.isnan(value):
        raise DataError(f"NaN literal at row {row}, column {col!r}; use an empty field for missing")
    return value


def _text_lines(source) -> IO[str]:
    if isinstance(source, bytes):
        return io.StringIO(source.decode("utf-8"))
    if isinstance(source, io.TextIOBase):
        return source
    data = source.read()
    return io.StringIO(data.decode("utf-8") if isinstance(data, bytes) else data)


def load_observations(source, roles: ColumnRoles) -> ObservationTable:
    """Parse CSV from a path, raw bytes or a (text or binary) stream."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="") as fh:
            return load_observations(fh, roles)
    source = _text_lines(source)
    reader = csv.reader(source)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty input: header row required") from None
    missing = [c for c in roles.all_columns if c not in header]
    if missing:
        raise DataError(f"columns not found in header: {missing}")
    pos = {c: header.index(c) for c in roles.all_columns}

    records = []
    for lineno, raw in enumerate(reader, start=2):
        if not raw or all(not c.strip() for c in raw):
            continue
        if len(raw) < len(header):
            raise DataError(f"row {lineno} has {len(raw)} fields, header has {len(header)}")
        records.append([_parse_cell(raw[pos[c]], lineno, c) for c in roles.all_columns])
    if not records:
        raise DataError("no data rows")
    data = np.array(records, dtype=float)

    p1, p2 = len(roles.v), len(roles.w)
    a, y = data[:, 0], data[:, 1]
    v, w = data[:, 2:2 + p1], data[:, 2 + p1:2 + p1 + p2]
    delta, q = data[:, -2], data[:, -1]
    for name, arr in ((roles.treatment, a), (roles.delta, delta), (roles.q, q)):
        if np.any(np.isnan(arr)):
            row = int(np.flatnonzero(np.isnan(arr))[0]) + 2
            raise DataError(f"column {name!r} missing at row {row}")
    if np.any(np.isnan(v)):
        row, j = (int(k) for k in np.argwhere(np.isnan(v))[0])
        raise DataError(f"low-cost covariate {roles.v[j]!r} missing at row {row + 2}")
    if not np.all(np.isin(delta, (0, 1))):
        raise DataError(f"column {roles.delta!r} must be 0/1")
    if not np.all(np.isin(a, (0, 1))):
        raise DataError(f"column {roles.treatment!r} must be 0/1")
    phase2 = delta == 1
    if np.any(phase2 & np.isnan(y)):
        row = int(np.flatnonzero(phase2 & np.isnan(y))[0]) + 2
        raise DataError(f"outcome missing at phase-2 row (line {row})")
    return ObservationTable(a=a, y=y, v=v, w=w, delta=delta, q=q, roles=roles)


@dataclass(frozen=True, eq=False)
class StratumIndex:
    """Partition of phase-1 rows by the distinct values of the key columns.

    Stratum labels are 0-based and follow lexicographic order of the key tuples.
    """

    key_columns: tuple[str, ...]
    keys: tuple[tuple[float, ...], ...]
    labels: np.ndarray
    counts: np.ndarray
    phase2_counts: np.ndarray
    q_by_stratum: np.ndarray

    @property
    def K(self) -> int:
        return len(self.keys)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def shares(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    def label_of(self, key: Iterable[float]) -> int:
        return self.keys.index(tuple(float(k) for k in key))


def build_strata(table: ObservationTable, key_columns: Sequence[str] = (),
                 rtol: float = 1e-12) -> StratumIndex:
    key_columns = tuple(key_columns)
    keymat = np.column_stack([table.column(c) for c in key_columns]) if key_columns else None
    return strata_from_keys(keymat, key_columns, table.delta, table.q, rtol)


def strata_from_keys(keymat, key_columns: Sequence[str], delta=None, q=None,
                     rtol: float = 1e-12) -> StratumIndex:
    """Stratum index from an (n, k) matrix of key values.

    ``delta`` defaults to all ones and ``q`` to all ones.
    """
    key_columns = tuple(key_columns)
    if key_columns:
        keymat = np.asarray(keymat, dtype=float).reshape(-1, len(key_columns))
        n = keymat.shape[0]
        if np.any(np.isnan(keymat)):
            bad = [c for c, col in zip(key_columns, keymat.T) if np.any(np.isnan(col))]
            raise DataError(f"stratum key columns have missing values: {bad}")
        uniq, labels = np.unique(keymat, axis=0, return_inverse=True)
        labels = labels.reshape(-1)
        keys = tuple(tuple(float(x) for x in row) for row in uniq)
    else:
        if delta is None:
            raise ValueError("need delta or key values to know the number of rows")
        n = len(delta)
        labels = np.zeros(n, dtype=np.intp)
        keys = ((),)
    delta = np.ones(n, dtype=bool) if delta is None else np.asarray(delta, dtype=bool)
    q = np.ones(n) if q is None else np.asarray(q, dtype=float)
    K = len(keys)
    counts = np.bincount(labels, minlength=K)
    phase2 = np.bincount(labels, weights=delta.astype(float), minlength=K).astype(np.int64)

    qmin = np.full(K, np.inf)
    qmax = np.full(K, -np.inf)
    np.minimum.at(qmin, labels, q)
    np.maximum.at(qmax, labels, q)
    varying = np.flatnonzero(qmax - qmin > rtol * qmax)
    if varying.size:
        k = int(varying[0])
        raise DataError(f"q varies within stratum {keys[k]} ({qmin[k]!r} .. {qmax[k]!r})")
    return StratumIndex(
        key_columns=key_columns,
        keys=keys,
        labels=_readonly(labels.astype(np.intp)),
        counts=_readonly(counts),
        phase2_counts=_readonly(phase2),
        q_by_stratum=_readonly(qmax),
    )


@dataclass
class ValidationReport:
    violations: list[str]
    warnings: list[str]
    notes: list[str]
    phase2_fraction: float
    phase2_counts: dict[tuple, int]

    @property
    def ok(self) -> bool:
        return not self.violations


def validate(table: ObservationTable, key_columns: Sequence[str] = ()) -> ValidationReport:
    """Report-only check of a table and (optionally) its strata."""
    violations = _violations(table.a, table.y, table.w, table.delta, table.q)
    warnings: list[str] = []
    notes: list[str] = []
    counts: dict[tuple, int] = {}
    try:
        strata = build_strata(table, key_columns)
    except DataError as exc:
        violations.append(str(exc))
    else:
        counts = {k: int(m) for k, m in zip(strata.keys, strata.phase2_counts)}
        for k, m in counts.items():
            if m == 0:
                warnings.append(f"empty phase-2 stratum {k}")
    if np.all(table.delta) and np.all(table.q == 1.0):
        notes.append("single-phase data")
    return ValidationReport(
        violations=violations,
        warnings=warnings,
        notes=notes,
        phase2_fraction=float(np.mean(table.delta)),
        phase2_counts=counts,
    )
