"""Maximum-likelihood estimation drivers.

Two routes to the same optimum: ``estimate`` runs quasi-Newton over the
full parameter vector (positivity handled by a smooth reparameterisation),
``estimate_concentrated`` optimises only the surplus coefficients while the
transfer-equation parameters are maximised in closed form at every step.
Standard errors come from the observed information: a central finite
difference of the exact analytic gradient, inverted when negative definite.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np
import scipy.optimize
import scipy.linalg
import scipy.stats
from scipy.special import expit

from .equilibrium import SolverConfig
from .likelihood import (
    InnerFit,
    LikelihoodBreakdown,
    LikelihoodEvaluator,
)
from .model import BasisSpec, MatchSample, Theta

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class OptimizerConfig:
    """Outer-loop settings.

    ``tol`` is the convergence criterion: the sup-norm of the gradient of
    the *mean* log-likelihood (total divided by the effective sample size)
    in the optimisation space.  ``reparam`` selects the positivity
    transform for sigma1, sigma2 and s2: "exp" or "softplus"; the reported
    optimum is invariant to the choice up to the tolerance.
    """

    tol: float = 1e-6
    max_iter: int = 500
    reparam: str = "exp"
    boundary_tol: float = 1e-8

    def __post_init__(self):
        if self.reparam not in ("exp", "softplus"):
            raise ValueError(f"unknown reparam {self.reparam!r}")


@dataclasses.dataclass(frozen=True)
class EstimationReport:
    """Everything a fit produces.

    ``std_errors`` is laid out like the parameter vector
    (A, Gamma, sigma1, sigma2, t, s2), length 2K+4, NaN where no standard
    error applies (inactive coefficient, pinned boundary, or unavailable
    information matrix).  ``theta_hat`` is None when the data identify only
    the total-surplus coefficients (no transfers observed); ``phi_hat``
    always carries A + Gamma.
    """

    theta_hat: Theta | None
    phi_hat: np.ndarray
    std_errors: np.ndarray
    vcov: np.ndarray | None
    free_names: tuple
    loglik: LikelihoodBreakdown
    r_squared: float
    iterations: int
    grad_norm: float
    status: str
    message: str
    objective_path: tuple
    split_identified: bool
    boundary: tuple
    inner: InnerFit | None
    phi_se: np.ndarray | None
    method: str
    config: dict


def _positive(u, kind):
    return np.exp(u) if kind == "exp" else np.logaddexp(0.0, u)


def _positive_inv(s, kind):
    if kind == "exp":
        return np.log(s)
    # inverse softplus: log(exp(s) - 1), written stably
    return s + np.log(-np.expm1(-s))


def _positive_chain(u, kind):
    return np.exp(u) if kind == "exp" else expit(u)


class _Packer:
    """Maps between Theta and the unconstrained optimisation vector."""

    def __init__(self, spec: BasisSpec, reparam: str, pin1: bool, pin2: bool):
        self.spec = spec
        self.reparam = reparam
        self.pin1 = pin1
        self.pin2 = pin2
        self.a_idx = np.flatnonzero(spec.alpha_mask)
        self.g_idx = np.flatnonzero(spec.gamma_mask)
        names = [f"A[{k}]" for k in self.a_idx]
        names += [f"Gamma[{k}]" for k in self.g_idx]
        if not pin1:
            names.append("sigma1")
        if not pin2:
            names.append("sigma2")
        names += ["t", "s2"]
        self.names = tuple(names)
        self.size = len(names)

    def pack(self, theta: Theta) -> np.ndarray:
        parts = [theta.A[self.a_idx], theta.Gamma[self.g_idx]]
        tail = []
        if not self.pin1:
            tail.append(_positive_inv(theta.sigma1, self.reparam))
        if not self.pin2:
            tail.append(_positive_inv(theta.sigma2, self.reparam))
        tail.append(theta.t)
        tail.append(_positive_inv(theta.s2, self.reparam))
        return np.concatenate(parts + [np.asarray(tail)])

    def unpack(self, x: np.ndarray) -> Theta:
        K = self.spec.K
        A = np.zeros(K)
        Gamma = np.zeros(K)
        na, ng = self.a_idx.size, self.g_idx.size
        A[self.a_idx] = x[:na]
        Gamma[self.g_idx] = x[na : na + ng]
        pos = na + ng
        if self.pin1:
            sigma1 = 0.0
        else:
            sigma1 = float(_positive(x[pos], self.reparam))
            pos += 1
        if self.pin2:
            sigma2 = 0.0
        else:
            sigma2 = float(_positive(x[pos], self.reparam))
            pos += 1
        t = float(x[pos])
        s2 = float(_positive(x[pos + 1], self.reparam))
        return Theta(A=A, Gamma=Gamma, sigma1=sigma1, sigma2=sigma2, t=t, s2=s2)

    def chain(self, x: np.ndarray, full_grad: np.ndarray) -> np.ndarray:
        """Pull a (2K+4,) theta-space gradient back to the packed space."""
        K = self.spec.K
        na, ng = self.a_idx.size, self.g_idx.size
        out = np.empty(self.size)
        out[:na] = full_grad[: K][self.a_idx]
        out[na : na + ng] = full_grad[K : 2 * K][self.g_idx]
        pos = na + ng
        if not self.pin1:
            out[pos] = full_grad[2 * K] * _positive_chain(x[pos], self.reparam)
            pos += 1
        if not self.pin2:
            out[pos] = full_grad[2 * K + 1] * _positive_chain(x[pos], self.reparam)
            pos += 1
        out[pos] = full_grad[2 * K + 2]
        out[pos + 1] = full_grad[2 * K + 3] * _positive_chain(
            x[-1], self.reparam
        )
        return out


def _validate_for_estimation(spec: BasisSpec, sample: MatchSample):
    for k, f in enumerate(spec.functions):
        if not f.worker_dependent and not f.firm_dependent:
            raise ValueError(
                f"basis {k} ({f.describe()}) is constant; the likelihood is "
                "flat in its coefficient (location is carried by t)"
            )
    needed = spec.K + 4
    if sample.n < needed:
        raise ValueError(
            f"need at least K+4 = {needed} observations, got {sample.n}"
        )


def _default_init(spec: BasisSpec, sample: MatchSample) -> Theta:
    obs = sample.observed
    w = sample.weights[obs]
    w = w / w.sum()
    tv = sample.transfers[obs]
    t0 = float(w @ tv)
    s20 = float(w @ (tv - t0) ** 2)
    return Theta(
        A=np.zeros(spec.K),
        Gamma=np.zeros(spec.K),
        sigma1=0.25,
        sigma2=0.25,
        t=t0,
        s2=max(s20, 1e-6),
    )


def _minimize(fun, x0, optimizer: OptimizerConfig):
    """L-BFGS-B wrapper recording the objective at accepted iterates."""
    history = []
    last = {"x": None, "f": None}

    def wrapped(x):
        f, g = fun(x)
        last["x"] = x.copy()
        last["f"] = f
        return f, g

    def callback(xk):
        if last["x"] is not None and np.array_equal(last["x"], xk):
            history.append(last["f"])
        else:  # line search ended on a different evaluation; recompute
            history.append(wrapped(xk)[0])

    res = scipy.optimize.minimize(
        wrapped,
        x0,
        jac=True,
        method="L-BFGS-B",
        callback=callback,
        options={
            "maxiter": optimizer.max_iter,
            "ftol": 0.0,
            "gtol": optimizer.tol,
            "maxcor": 20,
        },
    )
    return res, history


def _fit_report_pieces(ev: LikelihoodEvaluator, theta: Theta):
    breakdown = ev.breakdown(theta)
    obs = ev.obs
    if ev.n_obs_eff > 0.0:
        nw = ev.multiplicity[obs]
        tv = ev.sample.transfers[obs]
        wage = ev.wages(theta)[obs]
        ssr = float(nw @ ((tv - wage) ** 2))
        mean = float(nw @ tv / nw.sum())
        sst = float(nw @ ((tv - mean) ** 2))
        r2 = 1.0 - ssr / sst if sst > 0 else np.nan
    else:
        r2 = np.nan
    return breakdown, float(r2)


def standard_errors(
    theta: Theta,
    spec: BasisSpec,
    sample: MatchSample,
    solver: SolverConfig | None = None,
    *,
    pins=(False, False),
    step: float = 1e-5,
):
    """Observed-information standard errors at a stationary point.

    Differentiates the exact analytic gradient by central finite
    differences over the free original-scale coordinates, symmetrises, and
    inverts the negative Hessian.  Returns ``(se, vcov, free_names, ok,
    message)`` where ``se`` follows the (A, Gamma, sigma1, sigma2, t, s2)
    layout with NaN at coordinates without a standard error.  When the
    negative Hessian is not positive definite the function warns and
    returns NaN standard errors instead of raising.
    """
    K = spec.K
    ev = LikelihoodEvaluator(spec, sample, solver)
    a_idx = np.flatnonzero(spec.alpha_mask)
    g_idx = np.flatnonzero(spec.gamma_mask)
    pin1, pin2 = pins

    free = [("A", int(k)) for k in a_idx]
    free += [("Gamma", int(k)) for k in g_idx]
    if not pin1:
        free.append(("sigma1", None))
    if not pin2:
        free.append(("sigma2", None))
    free.append(("t", None))
    free.append(("s2", None))
    names = tuple(
        f"{f}[{k}]" if k is not None else f for f, k in free
    )
    p = len(free)

    def with_coord(theta0: Theta, coord, delta: float) -> Theta:
        field, k = coord
        if field in ("A", "Gamma"):
            arr = getattr(theta0, field).copy()
            arr[k] += delta
            return dataclasses.replace(theta0, **{field: arr})
        return dataclasses.replace(
            theta0, **{field: getattr(theta0, field) + delta}
        )

    def coord_value(theta0: Theta, coord) -> float:
        field, k = coord
        val = getattr(theta0, field)
        return float(val[k]) if k is not None else float(val)

    grad_idx = []
    for field, k in free:
        if field == "A":
            grad_idx.append(k)
        elif field == "Gamma":
            grad_idx.append(K + k)
        else:
            grad_idx.append(
                2 * K + {"sigma1": 0, "sigma2": 1, "t": 2, "s2": 3}[field]
            )
    grad_idx = np.asarray(grad_idx)

    H = np.empty((p, p))
    for j, coord in enumerate(free):
        base = coord_value(theta, coord)
        h = step * max(1.0, abs(base))
        field = coord[0]
        if field == "s2":
            h = min(h, theta.s2 / 2.0)
        elif field in ("sigma1", "sigma2"):
            h = min(h, base / 2.0) if base > 0 else h
        gp = ev.value_and_gradient(with_coord(theta, coord, +h))[1]
        gm = ev.value_and_gradient(with_coord(theta, coord, -h))[1]
        H[:, j] = (gp[grad_idx] - gm[grad_idx]) / (2.0 * h)
    H = 0.5 * (H + H.T)

    se = np.full(2 * K + 4, np.nan)
    try:
        chol = scipy.linalg.cho_factor(-H)
        vcov = scipy.linalg.cho_solve(chol, np.eye(p))
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        msg = (
            "negative Hessian is not positive definite; standard errors "
            "unavailable (flat or misspecified model?)"
        )
        logger.warning(msg)
        return se, None, names, False, msg
    diag = np.sqrt(np.diag(vcov))
    for value, (field, k) in zip(diag, free):
        if field == "A":
            se[k] = value
        elif field == "Gamma":
            se[K + k] = value
        else:
            se[2 * K + {"sigma1": 0, "sigma2": 1, "t": 2, "s2": 3}[field]] = value
    return se, vcov, names, True, ""


def _split_phi(spec: BasisSpec, phi_hat: np.ndarray):
    """Attribute total-surplus coefficients to sides for reporting only."""
    A = np.zeros(spec.K)
    G = np.zeros(spec.K)
    shared = spec.shared_mask
    only_a = spec.alpha_mask & ~spec.gamma_mask
    only_g = spec.gamma_mask & ~spec.alpha_mask
    A[only_a] = phi_hat[only_a]
    G[only_g] = phi_hat[only_g]
    A[shared] = 0.5 * phi_hat[shared]
    G[shared] = 0.5 * phi_hat[shared]
    return A, G


def _estimate_matching_only(
    ev: LikelihoodEvaluator, optimizer: OptimizerConfig, config_echo: dict
) -> EstimationReport:
    """No transfers observed: only Phi = A + Gamma is identified."""
    spec = ev.spec
    K = spec.K
    scale = 1.0 / ev.n_eff

    def fun(c):
        val, g = ev.matching_value_and_gradient(c)
        return -val * scale, -g * scale

    res, history = _minimize(fun, np.zeros(K), optimizer)
    phi_hat = res.x.copy()
    grad_norm = float(np.abs(res.jac).max())
    status = "converged" if grad_norm <= optimizer.tol else "not_converged"
    if status != "converged":
        logger.warning(
            "matching-only estimation did not converge: grad %.3e", grad_norm
        )

    # observed information over Phi by differencing the analytic gradient
    h = 1e-5
    Hm = np.empty((K, K))
    for j in range(K):
        cp = phi_hat.copy()
        cp[j] += h
        cm = phi_hat.copy()
        cm[j] -= h
        Hm[:, j] = (
            ev.matching_value_and_gradient(cp)[1]
            - ev.matching_value_and_gradient(cm)[1]
        ) / (2 * h)
    Hm = 0.5 * (Hm + Hm.T)
    try:
        chol = scipy.linalg.cho_factor(-Hm)
        vcov = scipy.linalg.cho_solve(chol, np.eye(K))
        phi_se = np.sqrt(np.diag(vcov))
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        vcov = None
        phi_se = None

    value = float(-res.fun * ev.n_eff)
    breakdown = LikelihoodBreakdown(
        log_l1=value,
        log_l2=0.0,
        binomial=0.0,
        total=value,
        n_observed=0,
        p_observed=0.0,
    )
    A, G = _split_phi(spec, phi_hat)
    return EstimationReport(
        theta_hat=None,
        phi_hat=phi_hat,
        std_errors=np.full(2 * K + 4, np.nan),
        vcov=vcov,
        free_names=tuple(f"Phi[{k}]" for k in range(K)),
        loglik=breakdown,
        r_squared=float("nan"),
        iterations=int(res.nit),
        grad_norm=grad_norm,
        status=status,
        message=(
            "no transfers observed: level split between amenity and "
            "productivity is not identified; reporting Phi = A + Gamma "
            f"(display split: A={A.round(6).tolist()}, Gamma={G.round(6).tolist()})"
        ),
        objective_path=tuple(-f * ev.n_eff for f in history),
        split_identified=False,
        boundary=(False, False),
        inner=None,
        phi_se=phi_se,
        method="matching_only",
        config=config_echo,
    )


def _config_echo(optimizer: OptimizerConfig, solver: SolverConfig, method: str):
    return {
        "method": method,
        "optimizer": dataclasses.asdict(optimizer),
        "solver": dataclasses.asdict(solver),
    }


def estimate(
    spec: BasisSpec,
    sample: MatchSample,
    optimizer: OptimizerConfig | None = None,
    solver: SolverConfig | None = None,
) -> EstimationReport:
    """Full maximum-likelihood fit.

    Args:
        spec: basis family with activity masks.
        sample: matched sample; transfers may be partially missing.
        optimizer: outer-loop settings (tolerance, reparameterisation).
        solver: inner fixed-point settings.

    Returns:
        EstimationReport.  Non-convergence is reported through ``status``,
        never silently.
    """
    optimizer = optimizer or OptimizerConfig()
    solver = solver or SolverConfig()
    _validate_for_estimation(spec, sample)
    ev = LikelihoodEvaluator(spec, sample, solver)
    echo = _config_echo(optimizer, solver, "full")
    if sample.n_observed == 0:
        return _estimate_matching_only(ev, optimizer, echo)

    theta0 = _default_init(spec, sample)
    scale = 1.0 / ev.n_eff
    pin1 = pin2 = False
    theta_start = theta0
    total_iters = 0
    history_all = []
    for _ in range(3):  # at most two boundary refits (sigma1, sigma2)
        packer = _Packer(spec, optimizer.reparam, pin1, pin2)

        def fun(x, packer=packer):
            theta = packer.unpack(x)
            val, g = ev.value_and_gradient(theta)
            return -val * scale, -packer.chain(x, g) * scale

        res, history = _minimize(fun, packer.pack(theta_start), optimizer)
        history_all.extend(-f * ev.n_eff for f in history)
        total_iters += int(res.nit)
        theta_hat = packer.unpack(res.x)
        hit1 = not pin1 and theta_hat.sigma1 < optimizer.boundary_tol
        hit2 = not pin2 and theta_hat.sigma2 < optimizer.boundary_tol
        if not (hit1 or hit2):
            break
        pin1 = pin1 or hit1
        pin2 = pin2 or hit2
        if pin1 and pin2:
            logger.warning("both heterogeneity scales at zero; transfer fit degenerate")
            break
        theta_start = dataclasses.replace(
            theta_hat,
            sigma1=0.0 if pin1 else theta_hat.sigma1,
            sigma2=0.0 if pin2 else theta_hat.sigma2,
        )

    grad_norm = float(np.abs(res.jac).max())
    status = "converged" if grad_norm <= optimizer.tol else "not_converged"
    if status != "converged":
        logger.warning(
            "estimation did not converge: mean-gradient sup-norm %.3e > %.1e (%s)",
            grad_norm,
            optimizer.tol,
            res.message,
        )

    breakdown, r2 = _fit_report_pieces(ev, theta_hat)
    se, vcov, names, ok, msg = standard_errors(
        theta_hat, spec, sample, solver, pins=(pin1, pin2)
    )
    return EstimationReport(
        theta_hat=theta_hat,
        phi_hat=theta_hat.Phi,
        std_errors=se,
        vcov=vcov,
        free_names=names,
        loglik=breakdown,
        r_squared=r2,
        iterations=total_iters,
        grad_norm=grad_norm,
        status=status,
        message=str(res.message) if ok else f"{res.message}; {msg}",
        objective_path=tuple(history_all),
        split_identified=True,
        boundary=(pin1, pin2),
        inner=None,
        phi_se=None,
        method="full",
        config=echo,
    )


def estimate_concentrated(
    spec: BasisSpec,
    sample: MatchSample,
    optimizer: OptimizerConfig | None = None,
    solver: SolverConfig | None = None,
) -> EstimationReport:
    """Maximum likelihood via the concentrated objective.

    Optimises (A, Gamma) only; sigma1, sigma2, t, s2 are profiled out in
    closed form at every evaluation.  Agrees with ``estimate`` up to
    optimiser tolerance.
    """
    optimizer = optimizer or OptimizerConfig()
    solver = solver or SolverConfig()
    _validate_for_estimation(spec, sample)
    ev = LikelihoodEvaluator(spec, sample, solver)
    echo = _config_echo(optimizer, solver, "concentrated")
    if sample.n_observed == 0:
        return _estimate_matching_only(ev, optimizer, echo)

    a_idx = np.flatnonzero(spec.alpha_mask)
    g_idx = np.flatnonzero(spec.gamma_mask)
    na = a_idx.size
    K = spec.K
    scale = 1.0 / ev.n_eff

    def unpack(x):
        A = np.zeros(K)
        G = np.zeros(K)
        A[a_idx] = x[:na]
        G[g_idx] = x[na:]
        return A, G

    def fun(x):
        A, G = unpack(x)
        val, _, g = ev.concentrated(A, G, want_gradient=True)
        packed = np.concatenate([g[:K][a_idx], g[K:][g_idx]])
        return -val * scale, -packed * scale

    x0 = np.zeros(na + g_idx.size)
    res, history = _minimize(fun, x0, optimizer)
    A_hat, G_hat = unpack(res.x)
    value, inner = ev.concentrated(A_hat, G_hat)
    grad_norm = float(np.abs(res.jac).max())
    status = "converged" if grad_norm <= optimizer.tol else "not_converged"
    if status != "converged":
        logger.warning(
            "concentrated estimation did not converge: grad %.3e (%s)",
            grad_norm,
            res.message,
        )

    pin1 = inner.sigma1 <= 0.0
    pin2 = inner.sigma2 <= 0.0
    if pin1 and pin2:
        logger.warning("both heterogeneity scales at zero; reporting Phi only")
        phi_hat = A_hat * spec.alpha_mask + G_hat * spec.gamma_mask
        breakdown = LikelihoodBreakdown(
            log_l1=value, log_l2=0.0, binomial=0.0, total=value,
            n_observed=sample.n_observed, p_observed=float(ev.n_obs_eff / ev.n_eff),
        )
        return EstimationReport(
            theta_hat=None,
            phi_hat=phi_hat,
            std_errors=np.full(2 * K + 4, np.nan),
            vcov=None,
            free_names=tuple(),
            loglik=breakdown,
            r_squared=float("nan"),
            iterations=int(res.nit),
            grad_norm=grad_norm,
            status="degenerate",
            message="transfer equation fit collapsed to sigma1 = sigma2 = 0",
            objective_path=tuple(-f * ev.n_eff for f in history),
            split_identified=False,
            boundary=(True, True),
            inner=inner,
            phi_se=None,
            method="concentrated",
            config=echo,
        )

    theta_hat = Theta(
        A=A_hat * spec.alpha_mask,
        Gamma=G_hat * spec.gamma_mask,
        sigma1=inner.sigma1,
        sigma2=inner.sigma2,
        t=inner.t,
        s2=inner.s2,
    )
    breakdown, r2 = _fit_report_pieces(ev, theta_hat)
    se, vcov, names, ok, msg = standard_errors(
        theta_hat, spec, sample, solver, pins=(pin1, pin2)
    )
    return EstimationReport(
        theta_hat=theta_hat,
        phi_hat=theta_hat.Phi,
        std_errors=se,
        vcov=vcov,
        free_names=names,
        loglik=breakdown,
        r_squared=r2,
        iterations=int(res.nit),
        grad_norm=grad_norm,
        status=status,
        message=str(res.message) if ok else str(res.message) + "; " + msg,
        objective_path=tuple(-f * ev.n_eff for f in history),
        split_identified=True,
        boundary=(pin1, pin2),
        inner=inner,
        phi_se=None,
        method="concentrated",
        config=echo,
    )


def lr_test(restricted: EstimationReport, full: EstimationReport):
    """Likelihood-ratio test of nested fits.

    Returns ``(statistic, df, p_value)`` with the statistic
    2*(logL_full - logL_restricted) referred to chi-square.
    """
    df = len(full.free_names) - len(restricted.free_names)
    if df <= 0:
        raise ValueError("full fit must have more free parameters")
    stat = 2.0 * (full.loglik.total - restricted.loglik.total)
    p = float(scipy.stats.chi2.sf(stat, df))
    return float(stat), int(df), p
