"""Phase-2 allocation rules, the efficiency bound and the enrichment gain.

Allocations minimise ``sum_k p_k c_k / q_k`` subject to ``sum_k p_k q_k = qbar``.
The minimiser is ``q_k = qbar sqrt(c_k) / sum_j p_j sqrt(c_j)`` with optimal value
``(sum_k p_k sqrt(c_k))**2 / qbar``. Neyman allocation uses ``c_k = sigma_k**2``;
the IPSW-optimal rule uses ``c_k = sigma_k**2 + xi_k**2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimand import weight_and_derivative


class DesignError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DesignInput:
    """Stratum shares and conditional moments of the full-data EIF.

    ``c_w`` is optional; when given, ``sigma`` and ``xi`` are taken to be on
    the unnormalised scale and the output also reports the objective after
    dividing them by ``c_w``.
    """

    p: np.ndarray
    sigma: np.ndarray
    qbar: float
    xi: np.ndarray | None = None
    c_w: float | None = None

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        if p.ndim != 1 or sigma.shape != p.shape:
            raise DesignError("p and sigma must be vectors of equal length")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise DesignError("stratum shares must be nonnegative and sum to 1")
        if np.any(sigma < 0) or not np.all(np.isfinite(sigma)):
            raise DesignError("conditional SDs must be finite and nonnegative")
        if not 0.0 < self.qbar < 1.0:
            raise DesignError("qbar must lie in (0, 1)")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "sigma", sigma)
        if self.xi is not None:
            xi = np.asarray(self.xi, dtype=float)
            if xi.shape != p.shape:
                raise DesignError("xi must match p in length")
            object.__setattr__(self, "xi", xi)
        if self.c_w is not None and not self.c_w > 0:
            raise DesignError("c_w must be positive")

    @property
    def K(self) -> int:
        return self.p.shape[0]


@dataclass(frozen=True, eq=False)
class DesignOutput:
    q: np.ndarray
    objective: float
    feasible: bool
    max_q: float
    objective_cw_free: float | None = None


def allocation_objective(p, c, q) -> float:
    """``sum_k p_k c_k / q_k``, the design-dependent part of the variance."""
    p, c, q = (np.asarray(x, dtype=float) for x in (p, c, q))
    return float(np.sum(p * c / q))


def normalize_to_budget(scores, p, qbar: float) -> np.ndarray:
    """Scale nonnegative scores so that ``sum_k p_k q_k = qbar``."""
    scores = np.asarray(scores, dtype=float)
    p = np.asarray(p, dtype=float)
    total = float(p @ scores)
    if total <= 0:
        raise DesignError("allocation scores are all zero")
    return qbar * scores / total


def _allocate(inp: DesignInput, c: np.ndarray) -> DesignOutput:
    root = np.sqrt(c)
    if not np.any(root[inp.p > 0] > 0):
        raise DesignError("all stratum variance components are zero")
    q = normalize_to_budget(root, inp.p, inp.qbar)
    objective = float(inp.p @ root) ** 2 / inp.qbar
    scaled = None if inp.c_w is None else objective / inp.c_w**2
    max_q = float(q.max())
    return DesignOutput(q=q, objective=objective, feasible=max_q <= 1.0, max_q=max_q,
                        objective_cw_free=scaled)


def neyman_allocation(inp: DesignInput) -> DesignOutput:
    """Variance-optimal probabilities for the enriched estimator, q_k ∝ sigma_k."""
    return _allocate(inp, inp.sigma**2)


def ipsw_allocation(inp: DesignInput) -> DesignOutput:
    """Variance-optimal probabilities for the IPSW estimator, q_k ∝ sqrt(sigma_k² + xi_k²)."""
    if inp.xi is None:
        raise DesignError("IPSW-optimal allocation needs the conditional means xi")
    return _allocate(inp, inp.sigma**2 + inp.xi**2)


def simple_design_probability(estimand, e_by_stratum) -> np.ndarray:
    """Unnormalised scores ``w_e(e_k) / sqrt(e_k (1 - e_k))``.

    Optimal when the effect is homogeneous and errors are homoskedastic;
    pass the result to :func:`normalize_to_budget`.
    """
    e = np.atleast_1d(np.asarray(e_by_stratum, dtype=float))
    w, _ = weight_and_derivative(estimand, e)
    return w / np.sqrt(e * (1.0 - e))


def _labels_and_q(labels, q):
    labels = np.asarray(labels)
    keys, inv = np.unique(labels, return_inverse=True)
    inv = inv.reshape(-1)
    q = np.asarray(q, dtype=float)
    if q.shape != labels.shape:
        raise DesignError("q must give one probability per row")
    K = keys.shape[0]
    q_k = np.zeros(K)
    q_k[inv] = q
    if not np.allclose(q, q_k[inv], rtol=1e-12, atol=0):
        raise DesignError("q varies within a stratum")
    if np.any(q_k <= 0) or np.any(q_k > 1):
        raise DesignError("q must lie in (0, 1]")
    return inv, K, q_k


def stratum_moments(phi, labels, weights=None):
    """Weighted shares, means and SDs (divisor = total weight) per stratum.

    Returns ``(keys, p, xi, sigma)`` with keys in sorted order.
    """
    phi = np.asarray(phi, dtype=float)
    keys, inv = np.unique(np.asarray(labels), return_inverse=True)
    inv = inv.reshape(-1)
    wts = np.ones_like(phi) if weights is None else np.asarray(weights, dtype=float)
    K = keys.shape[0]
    mass = np.bincount(inv, weights=wts, minlength=K)
    if np.any(mass <= 0):
        raise DesignError("a stratum carries no weight")
    xi = np.bincount(inv, weights=wts * phi, minlength=K) / mass
    var = np.bincount(inv, weights=wts * (phi - xi[inv]) ** 2, minlength=K) / mass
    return keys, mass / mass.sum(), xi, np.sqrt(var)


@dataclass(frozen=True)
class EfficiencyBound:
    """Plug-in bound computed two algebraically equivalent ways."""

    value: float
    alternative: float
    between: float
    within_over_q: float


def efficiency_bound(phi, labels, q, weights=None) -> EfficiencyBound:
    """``Var(E[phi|S]) + E[Var(phi|S)/q(S)]`` and ``Var(phi) + E[(1/q - 1) Var(phi|S)]``.

    All moments are empirical with divisor equal to the total weight, which
    makes the two forms identical up to rounding.
    """
    phi = np.asarray(phi, dtype=float)
    inv, _, q_k = _labels_and_q(labels, q)
    _, p, xi, sigma = stratum_moments(phi, inv, weights)
    overall = float(p @ xi)
    between = float(p @ (xi - overall) ** 2)
    within_over_q = float(p @ (sigma**2 / q_k))
    if weights is None:
        total_var = float(np.var(phi))
    else:
        wts = np.asarray(weights, dtype=float)
        total_var = float(wts @ (phi - overall) ** 2 / wts.sum())
    alternative = total_var + float(p @ ((1.0 / q_k - 1.0) * sigma**2))
    return EfficiencyBound(value=between + within_over_q, alternative=alternative,
                           between=between, within_over_q=within_over_q)


def enrichment_gain(phi, labels, q, weights=None) -> float:
    """``E[(1/q(S) - 1) E[phi|S]^2]``: IPSW variance minus enriched variance."""
    inv, _, q_k = _labels_and_q(labels, q)
    _, p, xi, _ = stratum_moments(np.asarray(phi, dtype=float), inv, weights)
    return float(p @ ((1.0 / q_k - 1.0) * xi**2))


def design_input_from_pilot(phi, labels, qbar: float, c_w: float | None = None,
                            weights=None) -> tuple[np.ndarray, DesignInput]:
    """Estimate stratum moments of a pilot EIF sample and package them."""
    keys, p, xi, sigma = stratum_moments(phi, labels, weights)
    return keys, DesignInput(p=p, sigma=sigma, xi=xi, qbar=qbar, c_w=c_w)
