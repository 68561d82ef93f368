"""Post-estimation economics.

Value-of-statistical-life numbers from the structural amenity estimates,
the ordinary-least-squares baseline they are compared against, equilibrium
counterfactuals under firm-type transformations, and inequality summaries.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import scipy.linalg

from .equilibrium import SolverConfig, solve_potentials
from .model import (
    BasisSpec,
    BasisSystem,
    MatchSample,
    ProductBasis,
    Theta,
    matched_basis_values,
    surplus_coefficients,
)


class ConfigurationError(ValueError):
    """An analysis was requested that the basis/config does not support."""


def gini(values, weights=None) -> float:
    """Weighted Gini coefficient in [0, 1].

    Standard Lorenz-curve (trapezoid) computation on nonnegative values;
    raises if any value is negative or all are zero.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("gini of empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("gini requires finite values")
    if np.any(v < 0):
        raise ValueError("gini requires nonnegative values")
    if weights is None:
        w = np.full(v.size, 1.0 / v.size)
    else:
        w = np.asarray(weights, dtype=np.float64).ravel()
        if w.shape != v.shape:
            raise ValueError("weights and values disagree in length")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        w = w / w.sum()
    mean = float(w @ v)
    if mean == 0.0:
        raise ValueError("gini undefined for identically zero values")
    order = np.argsort(v, kind="stable")
    v, w = v[order], w[order]
    share = v * w / mean
    L = np.concatenate([[0.0], np.cumsum(share)])
    return float(1.0 - np.sum(w * (L[:-1] + L[1:])))


def _risk_basis_index(spec: BasisSpec, risk_coordinate: int) -> int:
    """Index of the amenity-active basis linear in a firm coordinate."""
    for k, f in enumerate(spec.functions):
        if (
            isinstance(f, ProductBasis)
            and f.worker_index == 0
            and f.firm_index == risk_coordinate + 1
            and spec.alpha_mask[k]
        ):
            return k
    raise ConfigurationError(
        f"no amenity-active basis linear in firm coordinate {risk_coordinate}"
    )


def vsl(
    theta_hat: Theta,
    spec: BasisSpec,
    mean_earnings: float,
    risk_unit_scale: float,
    risk_coordinate: int = 0,
) -> float:
    """Structural value of a statistical life.

    Minus the amenity coefficient on the risk coordinate, times mean
    earnings, times the unit conversion of the risk covariate into a
    death probability.  Requires transfers in logs for ``mean_earnings``
    to carry the currency dimension.
    """
    k = _risk_basis_index(spec, risk_coordinate)
    return float(-theta_hat.A[k] * mean_earnings * risk_unit_scale)


@dataclasses.dataclass(frozen=True)
class HedonicFit:
    """Weighted least squares of observed transfers on covariates."""

    coefficients: np.ndarray
    std_errors: np.ndarray
    r_squared: float
    vsl_h: float
    names: tuple


def hedonic_baseline(
    sample: MatchSample,
    design: np.ndarray | None = None,
    names=None,
    *,
    risk_column: int,
    mean_earnings: float,
    risk_unit_scale: float,
) -> HedonicFit:
    """Reduced-form wage-regression baseline.

    Regresses observed transfers on ``design`` (default: intercept, then
    worker covariates, then firm covariates) by weighted least squares and
    converts the ``risk_column`` coefficient to currency with the same
    unit conventions as ``vsl``.  This is the number the structural
    estimate is compared against: it embeds sorting, so it differs from
    the structural value whenever workers sort on the risk coordinate.
    """
    obs = sample.observed
    if not obs.any():
        raise ValueError("hedonic regression needs observed transfers")
    if design is None:
        design = np.column_stack(
            [np.ones(sample.n), sample.workers, sample.firms]
        )
        names = tuple(
            ["const"]
            + [f"x[{i}]" for i in range(1, sample.workers.shape[1] + 1)]
            + [f"y[{j}]" for j in range(1, sample.firms.shape[1] + 1)]
        )
    design = np.asarray(design, dtype=np.float64)
    if design.ndim != 2 or design.shape[0] != sample.n:
        raise ValueError("design must be an n-by-p matrix")
    p = design.shape[1]
    if not 0 <= risk_column < p:
        raise ConfigurationError("risk_column outside the design")
    if names is None:
        names = tuple(f"b[{j}]" for j in range(p))

    X = design[obs]
    yv = sample.transfers[obs]
    w = sample.weights[obs]
    w = w / w.sum()
    sw = np.sqrt(w)
    Xw = X * sw[:, None]
    yw = yv * sw
    gram = Xw.T @ Xw
    sv = np.linalg.svd(gram, compute_uv=False)
    if sv[-1] <= 1e-12 * sv[0]:
        raise ValueError("rank-deficient hedonic design")
    beta = scipy.linalg.solve(gram, Xw.T @ yw, assume_a="pos")
    resid = yv - X @ beta
    ssr = float(w @ (resid * resid))
    dof = max(int(obs.sum()) - p, 1)
    s2 = ssr * int(obs.sum()) / dof
    vcov = s2 * scipy.linalg.inv(gram) / int(obs.sum())
    se = np.sqrt(np.diag(vcov))
    ybar = float(w @ yv)
    sst = float(w @ ((yv - ybar) ** 2))
    r2 = 1.0 - ssr / sst if sst > 0 else np.nan
    return HedonicFit(
        coefficients=beta,
        std_errors=se,
        r_squared=float(r2),
        vsl_h=float(beta[risk_column] * mean_earnings * risk_unit_scale),
        names=tuple(names),
    )


@dataclasses.dataclass(frozen=True)
class CounterfactualResult:
    """Before/after equilibrium comparison on the collapsed type grid."""

    pi_before: np.ndarray
    pi_after: np.ndarray
    wages_before: np.ndarray
    wages_after: np.ndarray
    levels_before: np.ndarray
    levels_after: np.ndarray
    share_changed: float
    mean_wage_change: float
    gini_before: float
    gini_after: float
    feasibility_residual: float
    note: str


def _per_match_wages(theta, spec, workers, firms, a_of, b_of):
    matched = matched_basis_values(spec, workers, firms)
    alpha_ii = matched @ (theta.A * spec.alpha_mask)
    gamma_ii = matched @ (theta.Gamma * spec.gamma_mask)
    return (
        theta.sigma1 * (gamma_ii - b_of)
        + theta.sigma2 * (a_of - alpha_ii)
        + theta.t
    )


def counterfactual(
    theta_hat: Theta,
    spec: BasisSpec,
    sample: MatchSample,
    transform,
    solver: SolverConfig | None = None,
    transfer_transform: str = "identity",
) -> CounterfactualResult:
    """Re-solve the market after transforming firm types.

    ``transform`` maps the matrix of unique firm type rows to equally
    shaped new rows (e.g. capping a risk coordinate).  Worker types,
    masses and parameters stay fixed; the equilibrium is re-solved on the
    transformed types and compared to the baseline.  The share of workers
    changing jobs is half the L1 distance between the before/after
    conditional firm-type distributions averaged over worker types (the
    minimal reassignment mass; other readings of "changed jobs" exist).
    An identity transform reproduces the baseline bitwise.
    """
    if transfer_transform not in ("identity", "log"):
        raise ValueError("transfer_transform must be 'identity' or 'log'")
    solver = solver or SolverConfig()

    uw, row_of = np.unique(sample.workers, axis=0, return_inverse=True)
    uf, col_of = np.unique(sample.firms, axis=0, return_inverse=True)
    row_of, col_of = row_of.ravel(), col_of.ravel()
    row_w = np.bincount(row_of, weights=sample.weights, minlength=uw.shape[0])
    col_w = np.bincount(col_of, weights=sample.weights, minlength=uf.shape[0])
    coefs = surplus_coefficients(theta_hat, spec)

    phi_b = BasisSystem(spec, uw, uf).combine(coefs)
    pots_b = solve_potentials(
        phi_b, row_w, tol=solver.tol, max_iter=solver.max_iter, col_weights=col_w
    )

    uf2 = np.asarray(transform(uf.copy()), dtype=np.float64)
    if uf2.shape != uf.shape:
        raise ValueError("transform must preserve the firm-type matrix shape")
    if not np.all(np.isfinite(uf2)):
        raise ValueError("transform produced non-finite firm types")

    phi_a = BasisSystem(spec, uw, uf2).combine(coefs)
    pots_a = solve_potentials(
        phi_a,
        row_w,
        tol=solver.tol,
        max_iter=solver.max_iter,
        col_weights=col_w,
        init=(pots_b.a, pots_b.b),
    )

    pi_b = np.exp(phi_b - pots_b.a[:, None] - pots_b.b[None, :])
    pi_a = np.exp(phi_a - pots_a.a[:, None] - pots_a.b[None, :])
    share = 0.5 * float(np.abs(pi_a - pi_b).sum())
    feas = max(
        float(np.abs(pi_a.sum(axis=1) - row_w).max()),
        float(np.abs(pi_a.sum(axis=0) - col_w).max()),
    )

    wages_b = _per_match_wages(
        theta_hat, spec, sample.workers, uf[col_of], pots_b.a[row_of], pots_b.b[col_of]
    )
    wages_a = _per_match_wages(
        theta_hat, spec, sample.workers, uf2[col_of], pots_a.a[row_of], pots_a.b[col_of]
    )
    levels_b = np.exp(wages_b) if transfer_transform == "log" else wages_b
    levels_a = np.exp(wages_a) if transfer_transform == "log" else wages_a

    w = sample.weights
    mean_b = float(w @ levels_b / w.sum())
    mean_a = float(w @ levels_a / w.sum())
    change = (mean_a - mean_b) / abs(mean_b) if mean_b != 0 else np.nan

    note = (
        "share_changed is half the L1 distance between before/after "
        "conditional firm-type distributions averaged over workers "
        "(minimal reassignment mass)"
    )
    try:
        g_b = gini(levels_b, w)
        g_a = gini(levels_a, w)
    except ValueError:
        g_b = g_a = float("nan")
        note += "; Gini skipped (negative or all-zero wage levels)"

    return CounterfactualResult(
        pi_before=pi_b,
        pi_after=pi_a,
        wages_before=wages_b,
        wages_after=wages_a,
        levels_before=levels_b,
        levels_after=levels_a,
        share_changed=share,
        mean_wage_change=float(change),
        gini_before=g_b,
        gini_after=g_a,
        feasibility_residual=feas,
        note=note,
    )
