"""Sample log-likelihood, its exact gradient, and the concentrated form.

The likelihood has two parts.  The matching part rewards putting density on
the observed pairs,

    logL1 = sum_i n*w_i * (phi_ii - a_i - b_i),

with (a, b) the solved potentials of the sample system; the transfer part
is a Gaussian measurement equation on the observed transfers,

    logL2 = -sum_obs n*w_i (W_i - wage_i)^2 / (2 s2) - (N_obs/2) log s2,

plus a parameter-free binomial term for the missing-transfer pattern.  At
uniform weights (w_i = 1/n) the multiplicities n*w_i are all one.

Identical covariate rows are collapsed before solving: observations sharing
a worker (firm) type share a potential up to a fixed log-weight shift, so
the fixed point is computed on the much smaller unique-type system and
expanded back.  This is exact, not an approximation.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .equilibrium import (
    MatchingDensity,
    Potentials,
    SolverConfig,
    differentiate_potentials,
    solve_potentials,
)
from .model import (
    BasisSpec,
    BasisSystem,
    MatchSample,
    Theta,
    matched_basis_values,
    surplus_coefficients,
)


class RankDeficiencyError(RuntimeError):
    """Transfer-equation regressors are numerically collinear."""


#: Lower bound applied to the concentrated noise variance; a fit that hits
#: it is flagged degenerate (the unconstrained maximiser would be s2 -> 0).
S2_FLOOR = 1e-12


@dataclasses.dataclass(frozen=True)
class LikelihoodBreakdown:
    """Additive decomposition of the sample log-likelihood."""

    log_l1: float
    log_l2: float
    binomial: float
    total: float
    n_observed: int
    p_observed: float


@dataclasses.dataclass(frozen=True)
class InnerFit:
    """Closed-form inner maximisers of the concentrated likelihood."""

    sigma1: float
    sigma2: float
    t: float
    s2: float
    ssr: float
    degenerate: bool


def _binomial_term(n_eff: float, n_obs_eff: float) -> float:
    """n_obs*log(p) + (n - n_obs)*log(1-p) at p = n_obs/n, with 0*log(0)=0."""
    if n_obs_eff <= 0.0 or n_obs_eff >= n_eff:
        return 0.0
    p = n_obs_eff / n_eff
    return n_obs_eff * np.log(p) + (n_eff - n_obs_eff) * np.log1p(-p)


class LikelihoodEvaluator:
    """Caches sample structure and warm starts across evaluations.

    Collapses duplicate covariate rows once, then reuses the solved
    potentials of the previous call as the warm start of the next -- the
    access pattern of an outer optimiser.
    """

    def __init__(
        self,
        spec: BasisSpec,
        sample: MatchSample,
        config: SolverConfig | None = None,
        warm_start: bool = True,
    ):
        self.spec = spec
        self.sample = sample
        self.config = config if config is not None else SolverConfig()
        self.warm_start = warm_start

        workers = sample.workers
        firms = sample.firms
        uw, row_of = np.unique(workers, axis=0, return_inverse=True)
        uf, col_of = np.unique(firms, axis=0, return_inverse=True)
        self.row_of = row_of.ravel()
        self.col_of = col_of.ravel()
        self.n_rows = uw.shape[0]
        self.n_cols = uf.shape[0]
        w = sample.weights
        self.row_w = np.bincount(self.row_of, weights=w, minlength=self.n_rows)
        self.col_w = np.bincount(self.col_of, weights=w, minlength=self.n_cols)
        self.basis = BasisSystem(spec, uw, uf)
        self.matched = matched_basis_values(spec, workers, firms)
        self.multiplicity = sample.n * w
        self.n_eff = float(self.multiplicity.sum())
        self.obs = sample.observed
        self.n_obs_eff = float(self.multiplicity[self.obs].sum())
        self._warm = None

    # -- equilibrium plumbing ------------------------------------------------

    def _solve(self, coefs):
        phi = self.basis.combine(coefs)
        pots = solve_potentials(
            phi,
            self.row_w,
            tol=self.config.tol,
            max_iter=self.config.max_iter,
            col_weights=self.col_w,
            init=self._warm,
        )
        if self.warm_start:
            self._warm = (pots.a, pots.b)
        return phi, pots

    def _expand(self, pots: Potentials):
        """Per-observation potentials: each match reads its type's value.

        The gauge is inherited from the solved type-level system, which
        pins the potential of the lexicographically smallest worker type at
        zero.  That convention is invariant to the ordering of the sample
        (shuffling observations changes nothing) and coincides with the
        usual first-observation normalization when covariates are distinct.
        """
        return pots.a[self.row_of], pots.b[self.col_of]

    # -- likelihood pieces ---------------------------------------------------

    def _parts(self, theta: Theta):
        coefs = surplus_coefficients(theta, self.spec)
        phi, pots = self._solve(coefs)
        a_obs, b_obs = self._expand(pots)
        diag = self.matched @ coefs
        alpha_ii = self.matched @ (theta.A * self.spec.alpha_mask)
        gamma_ii = self.matched @ (theta.Gamma * self.spec.gamma_mask)
        wage = (
            theta.sigma1 * (gamma_ii - b_obs)
            + theta.sigma2 * (a_obs - alpha_ii)
            + theta.t
        )
        log_l1 = float(self.multiplicity @ (diag - a_obs - b_obs))
        return phi, pots, a_obs, b_obs, alpha_ii, gamma_ii, wage, log_l1

    def breakdown(self, theta: Theta) -> LikelihoodBreakdown:
        *_, wage, log_l1 = self._parts(theta)
        obs = self.obs
        if self.n_obs_eff > 0.0:
            if theta.s2 <= 0.0:
                raise ValueError("s2 must be positive when transfers are observed")
            res = self.sample.transfers[obs] - wage[obs]
            ssr = float(self.multiplicity[obs] @ (res * res))
            log_l2 = -ssr / (2.0 * theta.s2) - 0.5 * self.n_obs_eff * np.log(theta.s2)
        else:
            log_l2 = 0.0
        binom = _binomial_term(self.n_eff, self.n_obs_eff)
        return LikelihoodBreakdown(
            log_l1=log_l1,
            log_l2=float(log_l2),
            binomial=float(binom),
            total=float(log_l1 + log_l2 + binom),
            n_observed=self.sample.n_observed,
            p_observed=self.n_obs_eff / self.n_eff,
        )

    def wages(self, theta: Theta) -> np.ndarray:
        """Predicted transfer for every observation (missing ones included)."""
        return self._parts(theta)[6]

    def matching_value_and_gradient(self, coefs):
        """Matching part of the likelihood as a function of Phi alone.

        Used when no transfers are observed, so only the total-surplus
        coefficients enter.  Returns ``(value, gradient)`` with the
        gradient over the K surplus coefficients.
        """
        coefs = np.asarray(coefs, dtype=float)
        phi, pots = self._solve(coefs)
        a_obs, b_obs = self._expand(pots)
        diag = self.matched @ coefs
        value = float(self.multiplicity @ (diag - a_obs - b_obs))
        log_pi = phi - pots.a[:, None] - pots.b[None, :]
        pi = np.exp(log_pi)
        grad = self.multiplicity @ self.matched - self.n_eff * self.basis.totals(pi)
        return value, grad

    def value_and_gradient(self, theta: Theta):
        """Total log-likelihood and its exact gradient.

        The gradient is laid out as (dA, dGamma, dsigma1, dsigma2, dt, ds2),
        length 2K+4, with inactive coordinates exactly zero.
        """
        spec = self.spec
        K = spec.K
        phi, pots, a_obs, b_obs, alpha_ii, gamma_ii, wage, log_l1 = self._parts(theta)
        nw = self.multiplicity
        obs = self.obs

        density = MatchingDensity(log_pi=phi - pots.a[:, None] - pots.b[None, :])
        d_l1_phi = nw @ self.matched - self.n_eff * self.basis.totals(density.pi)

        g = np.zeros(2 * K + 4)
        total = log_l1
        if self.n_obs_eff > 0.0:
            if theta.s2 <= 0.0:
                raise ValueError("s2 must be positive when transfers are observed")
            res = self.sample.transfers[obs] - wage[obs]
            ssr = float(nw[obs] @ (res * res))
            s2 = theta.s2
            log_l2 = -ssr / (2.0 * s2) - 0.5 * self.n_obs_eff * np.log(s2)
            total += log_l2

            da_t, db_t = differentiate_potentials(
                self.basis, density, pinned_row=0
            )
            da = da_t[self.row_of][obs]
            db = db_t[self.col_of][obs]
            matched_o = self.matched[obs]
            score = nw[obs] * res / s2

            dw_dA = theta.sigma2 * (da - matched_o) - theta.sigma1 * db
            dw_dG = theta.sigma1 * (matched_o - db) + theta.sigma2 * da
            g[:K] += score @ dw_dA
            g[K : 2 * K] += score @ dw_dG
            g[2 * K] = score @ (gamma_ii - b_obs)[obs]
            g[2 * K + 1] = score @ (a_obs - alpha_ii)[obs]
            g[2 * K + 2] = score.sum()
            g[2 * K + 3] = ssr / (2.0 * s2 * s2) - self.n_obs_eff / (2.0 * s2)

        g[:K] += d_l1_phi
        g[K : 2 * K] += d_l1_phi
        g[:K] *= spec.alpha_mask
        g[K : 2 * K] *= spec.gamma_mask
        total += _binomial_term(self.n_eff, self.n_obs_eff)
        return float(total), g

    # -- concentrated form ---------------------------------------------------

    def _inner_fit(self, r1, r2, y, omega) -> InnerFit:
        """Weighted least squares of y on (r1, r2, 1) with both slopes >= 0.

        Enumerates the four sign-constrained candidates and keeps the
        feasible one with the smallest weighted SSR.  Candidates whose own
        design is rank deficient are skipped, so a collinear full design
        (e.g. constant regressors when the surplus coefficients are all
        zero) degrades to pinning the offending slopes at zero instead of
        failing; the intercept-only candidate is always available.
        """
        X = np.column_stack([r1, r2, np.ones_like(r1)])
        sw = np.sqrt(omega)
        Xw = X * sw[:, None]
        yw = y * sw

        def sub_fit(cols):
            beta_sub, _, rank, _ = np.linalg.lstsq(Xw[:, cols], yw, rcond=None)
            if rank < len(cols):
                return None, np.inf
            beta = np.zeros(3)
            beta[cols] = beta_sub
            res = y - X @ beta
            ssr = float(omega @ (res * res))
            return beta, ssr

        best = None
        for cols in ([0, 1, 2], [1, 2], [0, 2], [2]):
            beta, ssr = sub_fit(cols)
            if beta is None or beta[0] < 0.0 or beta[1] < 0.0:
                continue
            if best is None or ssr < best[1]:
                best = (beta, ssr)
        if best is None:  # numerically impossible, but never guess
            raise RankDeficiencyError("no feasible transfer-equation fit")
        beta, ssr = best
        ssr = max(ssr, 0.0)
        s2 = ssr / self.n_obs_eff
        degenerate = s2 < S2_FLOOR
        return InnerFit(
            sigma1=float(beta[0]),
            sigma2=float(beta[1]),
            t=float(beta[2]),
            s2=max(s2, S2_FLOOR),
            ssr=ssr,
            degenerate=degenerate,
        )

    def concentrated(self, A, Gamma, want_gradient: bool = False):
        """Concentrated log-likelihood at (A, Gamma).

        The transfer-equation parameters (sigma1, sigma2, t, s2) are
        maximised in closed form (weighted least squares of the observed
        transfers on the two potential-based regressors and a constant,
        slopes constrained nonnegative).  Returns ``(value, inner)`` or
        ``(value, inner, gradient)``; the gradient is over (A, Gamma) only
        -- by the envelope theorem the inner fit contributes nothing.
        """
        spec = self.spec
        K = spec.K
        A = np.asarray(A, dtype=np.float64)
        Gamma = np.asarray(Gamma, dtype=np.float64)
        coefs = A * spec.alpha_mask + Gamma * spec.gamma_mask
        phi, pots = self._solve(coefs)
        a_obs, b_obs = self._expand(pots)
        diag = self.matched @ coefs
        alpha_ii = self.matched @ (A * spec.alpha_mask)
        gamma_ii = self.matched @ (Gamma * spec.gamma_mask)
        nw = self.multiplicity
        log_l1 = float(nw @ (diag - a_obs - b_obs))

        obs = self.obs
        inner = None
        total = log_l1 + _binomial_term(self.n_eff, self.n_obs_eff)
        if self.n_obs_eff > 0.0:
            r1 = (gamma_ii - b_obs)[obs]
            r2 = (a_obs - alpha_ii)[obs]
            inner = self._inner_fit(r1, r2, self.sample.transfers[obs], nw[obs])
            total += -inner.ssr / (2.0 * inner.s2) - 0.5 * self.n_obs_eff * np.log(
                inner.s2
            )

        if not want_gradient:
            return float(total), inner

        density = MatchingDensity(log_pi=phi - pots.a[:, None] - pots.b[None, :])
        d_l1_phi = nw @ self.matched - self.n_eff * self.basis.totals(density.pi)
        g = np.zeros(2 * K)
        if inner is not None:
            wage = inner.sigma1 * r1 + inner.sigma2 * r2 + inner.t
            res = self.sample.transfers[obs] - wage
            da_t, db_t = differentiate_potentials(
                self.basis, density, pinned_row=0
            )
            da = da_t[self.row_of][obs]
            db = db_t[self.col_of][obs]
            matched_o = self.matched[obs]
            score = nw[obs] * res / inner.s2
            g[:K] = score @ (inner.sigma2 * (da - matched_o) - inner.sigma1 * db)
            g[K:] = score @ (inner.sigma1 * (matched_o - db) + inner.sigma2 * da)
        g[:K] += d_l1_phi
        g[K:] += d_l1_phi
        g[:K] *= spec.alpha_mask
        g[K:] *= spec.gamma_mask
        return float(total), inner, g


def log_l1(phi, pots: Potentials, weights=None) -> float:
    """Matching part of the log-likelihood from a solved sample system.

    With ``weights`` omitted this is the uniform-weight sum over matched
    pairs, sum_i (phi[i, i] - a[i] - b[i]); with weights it is the
    multiplicity-weighted version sum_i n*w_i (...).
    """
    phi = np.asarray(phi, dtype=np.float64)
    n = phi.shape[0]
    terms = np.diagonal(phi) - pots.a - pots.b
    if weights is None:
        return float(terms.sum())
    weights = np.asarray(weights, dtype=np.float64)
    return float((n * weights) @ terms)


def log_l2(theta: Theta, observed, predicted, weights=None) -> float:
    """Gaussian transfer part over the observed entries.

    ``observed`` may contain NaN for missing transfers; those pairs drop
    out.  Returns 0 when nothing is observed.
    """
    observed = np.asarray(observed, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    mask = ~np.isnan(observed)
    if not mask.any():
        return 0.0
    res = observed[mask] - predicted[mask]
    if weights is None:
        mult = np.ones(res.shape[0])
    else:
        weights = np.asarray(weights, dtype=np.float64)
        mult = (observed.shape[0] * weights)[mask]
    n_obs_eff = float(mult.sum())
    ssr = float(mult @ (res * res))
    return float(-ssr / (2.0 * theta.s2) - 0.5 * n_obs_eff * np.log(theta.s2))


def log_likelihood(
    theta: Theta,
    spec: BasisSpec,
    sample: MatchSample,
    config: SolverConfig | None = None,
) -> LikelihoodBreakdown:
    """Full likelihood breakdown at a parameter point (fresh solve)."""
    return LikelihoodEvaluator(spec, sample, config).breakdown(theta)


def gradient(
    theta: Theta,
    spec: BasisSpec,
    sample: MatchSample,
    config: SolverConfig | None = None,
) -> np.ndarray:
    """Exact likelihood gradient, laid out (dA, dGamma, ds1, ds2, dt, ds2)."""
    return LikelihoodEvaluator(spec, sample, config).value_and_gradient(theta)[1]


def concentrated_log_likelihood(
    A,
    Gamma,
    spec: BasisSpec,
    sample: MatchSample,
    config: SolverConfig | None = None,
):
    """Concentrated likelihood value and inner transfer-equation estimates."""
    return LikelihoodEvaluator(spec, sample, config).concentrated(A, Gamma)
