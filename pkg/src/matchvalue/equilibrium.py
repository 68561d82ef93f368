"""Matching-equilibrium solver.

Solves the potential system

    sum_j exp(phi[i, j] - a[i] - b[j]) = w_row[i]
    sum_i exp(phi[i, j] - a[i] - b[j]) = w_col[j]

by alternating exact coordinate updates in the log domain (each update is a
log-sum-exp, so surplus entries of +-50 and more are safe), normalised so
that ``a[0] == 0``.  Also provides the matching density, equilibrium wages
on matched pairs, and the derivatives of the potentials with respect to
surplus coefficients obtained from the implicit-function linear system.
"""

from __future__ import annotations

import dataclasses
from functools import cached_property

import numpy as np
import scipy.linalg

from . import kernels
from .model import (
    BasisSpec,
    BasisSystem,
    MatchSample,
    Theta,
    matched_basis_values,
)


class SolverError(RuntimeError):
    """Base class for equilibrium-solver failures."""


class NonConvergenceError(SolverError):
    def __init__(self, message: str, iterations: int, residual: float):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class NumericalError(SolverError):
    pass


class LinearSolveError(SolverError):
    pass


@dataclasses.dataclass(frozen=True)
class SolverConfig:
    """Tolerances of the fixed-point solve.

    ``tol`` bounds the sup-norm violation of both marginal constraint sets
    at the returned potentials; ``max_iter`` caps full sweeps.
    """

    tol: float = 1e-10
    max_iter: int = 10000


@dataclasses.dataclass(frozen=True)
class Potentials:
    """Solved potentials; ``a[0] == 0`` exactly by normalisation."""

    a: np.ndarray
    b: np.ndarray
    iterations: int
    residual: float


@dataclasses.dataclass(frozen=True)
class MatchingDensity:
    """Equilibrium matching density in log form."""

    log_pi: np.ndarray

    @cached_property
    def pi(self) -> np.ndarray:
        return np.exp(self.log_pi)

    def row_marginals(self) -> np.ndarray:
        return self.pi.sum(axis=1)

    def col_marginals(self) -> np.ndarray:
        return self.pi.sum(axis=0)


def solve_potentials(
    phi,
    weights,
    tol: float = 1e-10,
    max_iter: int = 10000,
    *,
    col_weights=None,
    init=None,
) -> Potentials:
    """Solve the potential system for a surplus matrix.

    Args:
        phi: (n, m) surplus matrix, finite entries.
        weights: (n,) positive row masses.
        tol: sup-norm marginal tolerance certified on *both* sides.
        max_iter: maximum number of full sweeps.
        col_weights: (m,) column masses; defaults to ``weights`` (square phi).
        init: optional warm start, a ``Potentials`` or an ``(a, b)`` pair.
            A warm start close to the solution converges in a few sweeps; an
            exact one is certified and returned with ``iterations == 0``.

    Returns:
        Potentials with the certified residual and sweep count.

    Raises:
        NonConvergenceError: residual still above ``tol`` after ``max_iter``.
        NumericalError: non-finite values encountered.
    """
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim != 2:
        raise ValueError("phi must be a 2-D matrix")
    n, m = phi.shape
    if not np.isfinite(phi).all():
        raise NumericalError("phi contains non-finite entries")

    w_row = np.asarray(weights, dtype=np.float64)
    if col_weights is None:
        if n != m:
            raise ValueError("col_weights is required when phi is rectangular")
        w_col = w_row
    else:
        w_col = np.asarray(col_weights, dtype=np.float64)
    if w_row.shape != (n,) or w_col.shape != (m,):
        raise ValueError("weight vectors do not match phi's shape")
    if (w_row <= 0).any() or (w_col <= 0).any():
        raise ValueError("masses must be strictly positive")
    mass = float(w_row.sum())
    if abs(mass - float(w_col.sum())) > 1e-12 * max(1.0, mass):
        raise ValueError("row and column masses must have equal totals")

    log_wr = np.log(w_row)
    log_wc = np.log(w_col)

    if init is None:
        a = np.zeros(n)
        b = np.zeros(m)
    else:
        a0, b0 = (init.a, init.b) if isinstance(init, Potentials) else init
        a = np.array(a0, dtype=np.float64)
        b = np.array(b0, dtype=np.float64)
        if a.shape != (n,) or b.shape != (m,):
            raise ValueError("warm start has wrong shape")
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            raise NumericalError("warm start contains non-finite entries")

    phi_t = np.ascontiguousarray(phi.T)

    iterations = 0
    while True:
        col_lse, col_res = kernels.logsumexp_pass(phi_t, a, b, w_col)
        if col_res <= tol:
            _, row_res = kernels.logsumexp_pass(phi, b, a, w_row)
            if row_res <= tol:
                residual = max(col_res, row_res)
                break
        if iterations >= max_iter:
            raise NonConvergenceError(
                f"no convergence after {max_iter} sweeps "
                f"(column residual {col_res:.3e}, tol {tol:.1e})",
                iterations=iterations,
                residual=col_res,
            )
        b = col_lse - log_wc
        row_lse, _ = kernels.logsumexp_pass(phi, b, a, w_row)
        a = row_lse - log_wr
        iterations += 1

    shift = a[0]
    a = a - shift
    b = b + shift
    a[0] = 0.0
    return Potentials(a=a, b=b, iterations=iterations, residual=float(residual))


def matching_density(phi, pots: Potentials) -> MatchingDensity:
    """Density implied by solved potentials: log pi = phi - a - b."""
    phi = np.asarray(phi, dtype=np.float64)
    return MatchingDensity(log_pi=kernels.log_density(phi, pots.a, pots.b))


def sample_wages(
    theta: Theta, spec: BasisSpec, sample: MatchSample, pots: Potentials
) -> np.ndarray:
    """Model wages on the matched pairs.

    w_i = sigma1 * (gamma_ii - b_i) + sigma2 * (a_i - alpha_ii) + t,
    with alpha_ii, gamma_ii the amenity/productivity values of pair i.
    """
    matched = matched_basis_values(spec, sample.workers, sample.firms)
    alpha_ii = matched @ (theta.A * spec.alpha_mask)
    gamma_ii = matched @ (theta.Gamma * spec.gamma_mask)
    return (
        theta.sigma1 * (gamma_ii - pots.b)
        + theta.sigma2 * (pots.a - alpha_ii)
        + theta.t
    )


def _pcg_block(P, w2, wc, E2, F, rtol, maxiter):
    """Jacobi-preconditioned CG on the bordered SPD system, batched over K.

    Solves [[diag(w2), P], [P.T, diag(wc)]] (u; v) = (E2; F) column by
    column with shared matrix-vector products.
    """
    K = E2.shape[1]
    u = np.zeros_like(E2)
    v = np.zeros_like(F)
    ru = E2.copy()
    rv = F.copy()
    target = rtol * np.sqrt((ru * ru).sum(axis=0) + (rv * rv).sum(axis=0))
    target = np.maximum(target, 1e-300)
    zu = ru / w2[:, None]
    zv = rv / wc[:, None]
    pu = zu.copy()
    pv = zv.copy()
    rz = (ru * zu).sum(axis=0) + (rv * zv).sum(axis=0)
    active = np.ones(K, dtype=bool)
    for _ in range(maxiter):
        qu = w2[:, None] * pu + P @ pv
        qv = P.T @ pu + wc[:, None] * pv
        pq = (pu * qu).sum(axis=0) + (pv * qv).sum(axis=0)
        alpha = np.zeros(K)
        np.divide(rz, pq, out=alpha, where=active & (pq > 0))
        u += alpha * pu
        v += alpha * pv
        ru -= alpha * qu
        rv -= alpha * qv
        res = np.sqrt((ru * ru).sum(axis=0) + (rv * rv).sum(axis=0))
        active = res > target
        if not active.any():
            return u, v
        zu = ru / w2[:, None]
        zv = rv / wc[:, None]
        rz_new = (ru * zu).sum(axis=0) + (rv * zv).sum(axis=0)
        beta = np.zeros(K)
        np.divide(rz_new, rz, out=beta, where=active & (rz > 0))
        rz = rz_new
        pu = zu + beta * pu
        pv = zv + beta * pv
    raise LinearSolveError(
        f"conjugate gradient did not reach rtol={rtol:.1e} in {maxiter} iterations"
    )


def differentiate_potentials(
    phi_grad,
    density: MatchingDensity,
    *,
    pinned_row: int = 0,
    method: str = "auto",
):
    """Derivatives of the potentials with respect to surplus coefficients.

    Differentiating the marginal constraints (masses held fixed) gives, for
    each coefficient k,

        w_row[i] * Da[i, k] + sum_j pi[i, j] * Db[j, k] = E[i, k]
        sum_i pi[i, j] * Da[i, k] + w_col[j] * Db[j, k] = F[j, k]

    with E[i, k] = sum_j pi[i, j] d(phi[i, j])/d(coef k) and F its column
    counterpart.  One equation is redundant; the normalisation
    ``Da[pinned_row] = 0`` replaces the pinned row's equation.

    Args:
        phi_grad: either an (n, m, K) array of per-coefficient surplus
            derivatives, or a ``BasisSystem`` (cheaper: contractions stay on
            the factor matrices).
        density: converged matching density.
        pinned_row: row whose potential derivative is pinned to zero.
        method: "dense" (Schur complement + Cholesky), "cg" (matrix-free
            conjugate gradient on the SPD system), or "auto".

    Returns:
        (Da, Db): (n, K) and (m, K) arrays; row ``pinned_row`` of Da is 0.
    """
    pi = density.pi
    n, m = pi.shape
    w_row = pi.sum(axis=1)
    w_col = pi.sum(axis=0)

    if isinstance(phi_grad, BasisSystem):
        E = phi_grad.expect_rows(pi)
        F = phi_grad.expect_cols(pi)
    else:
        G = np.asarray(phi_grad, dtype=np.float64)
        if G.ndim != 3 or G.shape[:2] != (n, m):
            raise ValueError(f"phi_grad must have shape ({n}, {m}, K)")
        E = np.einsum("ij,ijk->ik", pi, G)
        F = np.einsum("ij,ijk->jk", pi, G)
    K = E.shape[1]

    if not 0 <= pinned_row < n:
        raise ValueError("pinned_row out of range")
    keep = np.arange(n) != pinned_row
    P = pi[keep]
    w2 = w_row[keep]
    E2 = E[keep]

    if method == "auto":
        method = "dense" if n + m <= 1500 else "cg"

    if method == "dense":
        S = np.diag(w_col) - P.T @ (P / w2[:, None])
        rhs = F - P.T @ (E2 / w2[:, None])
        try:
            Db = scipy.linalg.solve(S, rhs, assume_a="pos")
        except np.linalg.LinAlgError as exc:
            cond = float(np.linalg.cond(S))
            raise LinearSolveError(
                f"potential-derivative system not solvable "
                f"(condition estimate {cond:.3e})"
            ) from exc
        resid = np.abs(S @ Db - rhs).max()
        scale = max(np.abs(rhs).max(), 1.0)
        if not np.isfinite(resid) or resid > 1e-6 * scale:
            cond = float(np.linalg.cond(S))
            raise LinearSolveError(
                f"potential-derivative solve inaccurate (residual {resid:.3e}, "
                f"condition estimate {cond:.3e})"
            )
        Da2 = (E2 - P @ Db) / w2[:, None]
    elif method == "cg":
        Da2, Db = _pcg_block(P, w2, w_col, E2, F, rtol=1e-13, maxiter=20 * (n + m))
    else:
        raise ValueError(f"unknown method {method!r}")

    Da = np.zeros((n, K))
    Da[keep] = Da2
    return Da, Db
