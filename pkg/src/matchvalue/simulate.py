"""Synthetic matching markets with known ground truth.

Markets live on finite type grids: the equilibrium density and transfer
surface are computed exactly on the grid, and samples are drawn cell by
cell from the equilibrium density.  Grid simulation realises the model's
conditional choice probabilities exactly, so estimates on drawn samples
converge to the generating parameters.
"""

from __future__ import annotations

import dataclasses
from functools import cached_property

import numpy as np

from .equilibrium import SolverConfig, solve_potentials
from .model import (
    BasisSpec,
    BasisSystem,
    MatchSample,
    Theta,
    _as_float_matrix,
    surplus_coefficients,
)


@dataclasses.dataclass(frozen=True)
class GroundTruthMarket:
    """Equilibrium of a grid market at known parameters.

    ``a``/``b`` are the grid potentials, gauged so the potential of the
    lexicographically smallest worker type is zero -- the same convention
    the likelihood machinery applies to samples, which is what makes the
    wage location ``t`` recoverable from simulated data.
    """

    grid_workers: np.ndarray
    worker_masses: np.ndarray
    grid_firms: np.ndarray
    firm_masses: np.ndarray
    theta_star: Theta
    spec: BasisSpec
    a: np.ndarray
    b: np.ndarray
    log_pi: np.ndarray
    wage_star: np.ndarray

    @cached_property
    def pi_star(self) -> np.ndarray:
        return np.exp(self.log_pi)

    @property
    def shape(self):
        return self.log_pi.shape


def _check_grid(points, masses, side: str):
    points = _as_float_matrix(points, f"grid_{side}")
    masses = np.asarray(masses, dtype=np.float64).ravel()
    if points.shape[0] != masses.size:
        raise ValueError(f"{side} grid and masses disagree in length")
    if not np.all(np.isfinite(points)):
        raise ValueError(f"{side} grid contains non-finite values")
    if np.any(masses <= 0) or not np.isfinite(masses).all():
        raise ValueError(f"{side} masses must be positive")
    if abs(masses.sum() - 1.0) > 1e-10:
        raise ValueError(f"{side} masses must sum to one")
    if np.unique(points, axis=0).shape[0] != points.shape[0]:
        raise ValueError(f"duplicate {side} grid points")
    return points, masses


def build_market(
    grid_workers,
    worker_masses,
    grid_firms,
    firm_masses,
    theta_star: Theta,
    spec: BasisSpec,
    solver: SolverConfig | None = None,
) -> GroundTruthMarket:
    """Solve a grid market at ``theta_star``.

    Masses must be positive and sum to one on each side; grid points must
    be distinct within a side.  Solver failures propagate.
    """
    gx, wm = _check_grid(grid_workers, worker_masses, "workers")
    gy, fm = _check_grid(grid_firms, firm_masses, "firms")
    solver = solver or SolverConfig()
    if theta_star.K != spec.K:
        raise ValueError("theta and spec disagree on K")

    basis = BasisSystem(spec, gx, gy)
    phi = basis.combine(surplus_coefficients(theta_star, spec))
    pots = solve_potentials(
        phi, wm, tol=solver.tol, max_iter=solver.max_iter, col_weights=fm
    )
    a, b = pots.a.copy(), pots.b.copy()
    order = np.lexsort(gx.T[::-1])  # row-lexicographic order of worker types
    shift = a[order[0]]
    a -= shift
    b += shift

    alpha = basis.combine(theta_star.A * spec.alpha_mask)
    gamma = basis.combine(theta_star.Gamma * spec.gamma_mask)
    wage = (
        theta_star.sigma1 * (gamma - b[None, :])
        + theta_star.sigma2 * (a[:, None] - alpha)
        + theta_star.t
    )
    return GroundTruthMarket(
        grid_workers=gx,
        worker_masses=wm,
        grid_firms=gy,
        firm_masses=fm,
        theta_star=theta_star,
        spec=spec,
        a=a,
        b=b,
        log_pi=phi - a[:, None] - b[None, :],
        wage_star=wage,
    )


def draw_sample(
    market: GroundTruthMarket,
    n: int,
    missing_prob: float = 0.0,
    seed=None,
) -> MatchSample:
    """Draw ``n`` matches i.i.d. from the market's equilibrium density.

    Transfers are the true wage surface plus N(0, s2*) noise, then each
    one is masked independently with probability ``missing_prob``.  The
    random stream is consumed in a fixed order (cells, noise, masking), so
    for a given seed the drawn matches and wages are identical across
    ``missing_prob`` values.
    """
    if n < 1:
        raise ValueError("need n >= 1 draws")
    if not 0.0 <= missing_prob <= 1.0:
        raise ValueError("missing_prob must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    R, S = market.shape
    p = market.pi_star.ravel()
    cells = rng.choice(R * S, size=n, p=p / p.sum())
    ri, si = np.divmod(cells, S)
    noise = rng.standard_normal(n) * np.sqrt(market.theta_star.s2)
    transfers = market.wage_star[ri, si] + noise
    mask = rng.random(n) < missing_prob
    transfers[mask] = np.nan
    return MatchSample(
        market.grid_workers[ri], market.grid_firms[si], transfers
    )
