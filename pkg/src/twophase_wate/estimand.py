"""Weight functions defining the weighted average treatment effect family."""

from __future__ import annotations

from enum import Enum

import numpy as np


class DomainError(ValueError):
    """Propensity value outside the open unit interval."""


class Estimand(str, Enum):
    ATE = "ate"
    ATT = "att"
    ATC = "atc"
    ATO = "ato"

    @classmethod
    def parse(cls, value: "str | Estimand") -> "Estimand":
        if isinstance(value, Estimand):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            choices = ", ".join(e.value for e in cls)
            raise ValueError(f"unknown estimand {value!r}; expected one of {choices}") from None

    @property
    def linear_in_e(self) -> bool:
        return self is not Estimand.ATO

    def __str__(self) -> str:
        return self.value


ALL_ESTIMANDS = (Estimand.ATE, Estimand.ATT, Estimand.ATC, Estimand.ATO)


def _check_open_unit(e):
    arr = np.asarray(e, dtype=float)
    if not np.all((arr > 0.0) & (arr < 1.0)):
        raise DomainError("propensity must lie strictly inside (0, 1)")
    return arr


def weight_and_derivative(estimand, e):
    """Return ``(w_e(e), dw_e/de)`` for scalar or array ``e``.

    ATE -> (1, 0); ATT -> (e, 1); ATC -> (1 - e, -1); ATO -> (e(1 - e), 1 - 2e).
    """
    estimand = Estimand.parse(estimand)
    arr = _check_open_unit(e)
    if estimand is Estimand.ATE:
        w, wdot = np.ones_like(arr), np.zeros_like(arr)
    elif estimand is Estimand.ATT:
        w, wdot = arr.copy(), np.ones_like(arr)
    elif estimand is Estimand.ATC:
        w, wdot = 1.0 - arr, -np.ones_like(arr)
    else:
        w, wdot = arr * (1.0 - arr), 1.0 - 2.0 * arr
    if np.ndim(e) == 0:
        return float(w), float(wdot)
    return w, wdot


def weight_second_derivative(estimand, e):
    """Second derivative of the weight in ``e`` (nonzero only for ATO)."""
    estimand = Estimand.parse(estimand)
    arr = _check_open_unit(e)
    out = np.full_like(arr, -2.0 if estimand is Estimand.ATO else 0.0)
    return float(out) if np.ndim(e) == 0 else out


def supports_double_robustness(estimand) -> bool:
    """True when the weight is affine in the propensity score."""
    return Estimand.parse(estimand).linear_in_e
