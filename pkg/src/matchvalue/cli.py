"""Command-line entry points.

Subcommands: ``simulate`` (grid market to CSV), ``estimate`` (full or
concentrated maximum likelihood), ``gradcheck`` (analytic gradient vs
finite differences), ``vsl``, ``counterfactual`` and ``hedonic``.  Every
command reads a TOML config, accepts flag overrides, and writes reports
as JSON plus an optional fixed-width coefficient table.  All randomness
flows through ``--seed``; reruns with the same inputs are byte-identical.
Verbosity comes from ``--verbose`` or the ``MATCHVALUE_VERBOSITY``
environment variable (debug/info/warning/error).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .analysis import counterfactual, hedonic_baseline, vsl
from .equilibrium import SolverConfig, SolverError
from .estimator import OptimizerConfig, estimate, estimate_concentrated
from .io import (
    load_config,
    load_sample,
    market_from_config,
    save_sample,
    schema_from_config,
    spec_from_config,
    theta_from_config,
)
from .likelihood import LikelihoodEvaluator
from .model import Theta
from .simulate import build_market, draw_sample

logger = logging.getLogger("matchvalue")


# --------------------------------------------------------------------------
# serialization helpers


def _sanitize(obj):
    """Make a payload JSON-safe: numpy scalars/arrays out, NaN/inf -> None."""
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_sanitize(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer, int)) and not isinstance(obj, bool):
        return int(obj)
    return obj


def _write_json(payload: dict, path) -> None:
    text = json.dumps(_sanitize(payload), sort_keys=True, indent=2) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        logger.info("wrote report to %s", path)


def _coef_table(names, estimates, std_errors) -> str:
    """Fixed-width two-column layout: estimate above its standard error."""
    width = max([len(str(n)) for n in names] + [12])
    lines = [f"{'parameter':<{width}}  {'estimate':>14}"]
    lines.append("-" * (width + 16))
    for name, est, se in zip(names, estimates, std_errors):
        est_s = "." if est is None or not np.isfinite(est) else f"{est:14.6f}"
        lines.append(f"{str(name):<{width}}  {est_s:>14}")
        if se is not None and np.isfinite(se):
            lines.append(f"{'':<{width}}  {f'({se:.6f})':>14}")
    return "\n".join(lines) + "\n"


def _emit_table(text: str, path, json_path) -> None:
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        logger.info("wrote table to %s", path)
    elif json_path is not None:
        sys.stdout.write(text)


def _theta_payload(theta: Theta) -> dict:
    return {
        "A": theta.A,
        "Gamma": theta.Gamma,
        "sigma1": theta.sigma1,
        "sigma2": theta.sigma2,
        "t": theta.t,
        "s2": theta.s2,
    }


def _theta_from_payload(payload: dict) -> Theta:
    return Theta(
        A=np.asarray(payload["A"], dtype=np.float64),
        Gamma=np.asarray(payload["Gamma"], dtype=np.float64),
        sigma1=float(payload["sigma1"]),
        sigma2=float(payload["sigma2"]),
        t=float(payload["t"]),
        s2=float(payload["s2"]),
    )


def _base_payload(command: str, cfg: dict, seed=None) -> dict:
    payload = {"command": command, "version": __version__, "config": cfg}
    if seed is not None:
        payload["seed"] = int(seed)
    return payload


# --------------------------------------------------------------------------
# config plumbing


def _solver_from_config(cfg: dict) -> SolverConfig:
    table = cfg.get("solver", {})
    kwargs = {}
    if "tol" in table:
        kwargs["tol"] = float(table["tol"])
    if "max_iter" in table:
        kwargs["max_iter"] = int(table["max_iter"])
    return SolverConfig(**kwargs)


def _optimizer_from_config(cfg: dict) -> OptimizerConfig:
    table = cfg.get("estimate", {})
    kwargs = {}
    if "tol" in table:
        kwargs["tol"] = float(table["tol"])
    if "max_iter" in table:
        kwargs["max_iter"] = int(table["max_iter"])
    if "reparam" in table:
        kwargs["reparam"] = str(table["reparam"])
    return OptimizerConfig(**kwargs)


def _vsl_settings(cfg: dict, args) -> tuple:
    table = cfg.get("vsl", {})
    earn = args.mean_earnings if args.mean_earnings is not None else table.get("mean_earnings")
    scale = args.risk_unit_scale if args.risk_unit_scale is not None else table.get("risk_unit_scale")
    coord = args.risk_coordinate if args.risk_coordinate is not None else table.get("risk_coordinate", 0)
    if earn is None or scale is None:
        raise ValueError(
            "mean_earnings and risk_unit_scale are required (flags or [vsl] config)"
        )
    return float(earn), float(scale), int(coord)


def _report_theta(path) -> Theta:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("theta_hat") is None:
        raise ValueError(f"{path}: report carries no identified theta_hat")
    return _theta_from_payload(payload["theta_hat"])


# --------------------------------------------------------------------------
# subcommands


def _cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    table = cfg.get("simulate", {})
    n = args.n if args.n is not None else int(table.get("n", 1000))
    missing = (
        args.missing_prob
        if args.missing_prob is not None
        else float(table.get("missing_prob", 0.0))
    )
    seed = args.seed if args.seed is not None else int(table.get("seed", 0))
    gx, fx, gy, fy = market_from_config(cfg)
    spec = spec_from_config(cfg)
    theta = theta_from_config(cfg)
    market = build_market(gx, fx, gy, fy, theta, spec, _solver_from_config(cfg))
    sample = draw_sample(market, n, missing, seed=seed)
    save_sample(args.out, sample, schema_from_config(cfg))
    payload = _base_payload("simulate", cfg, seed)
    payload.update(
        {
            "n": sample.n,
            "n_observed": sample.n_observed,
            "out": str(args.out),
            "theta_star": _theta_payload(theta),
        }
    )
    _write_json(payload, args.report)
    return 0


def _estimate_payload(report, data_path) -> dict:
    return {
        "data": str(data_path),
        "status": report.status,
        "message": report.message,
        "method": report.method,
        "iterations": report.iterations,
        "grad_norm": report.grad_norm,
        "loglik": {
            "log_l1": report.loglik.log_l1,
            "log_l2": report.loglik.log_l2,
            "binomial": report.loglik.binomial,
            "total": report.loglik.total,
            "n_observed": report.loglik.n_observed,
        },
        "r_squared": report.r_squared,
        "theta_hat": None if report.theta_hat is None else _theta_payload(report.theta_hat),
        "phi_hat": report.phi_hat,
        "std_errors": report.std_errors,
        "phi_se": report.phi_se,
        "free_names": list(report.free_names),
        "split_identified": report.split_identified,
        "boundary": list(report.boundary),
        "objective_path": report.objective_path,
        "fit_config": report.config,
    }


def _cmd_estimate(args) -> int:
    cfg = load_config(args.config)
    sample = load_sample(args.data, schema_from_config(cfg))
    spec = spec_from_config(cfg)
    fit = estimate_concentrated if args.concentrated else estimate
    report = fit(spec, sample, _optimizer_from_config(cfg), _solver_from_config(cfg))
    payload = _base_payload("estimate", cfg)
    payload.update(_estimate_payload(report, args.data))
    _write_json(payload, args.out)
    if report.theta_hat is not None:
        names = (
            [f"A[{k}]" for k in range(spec.K)]
            + [f"Gamma[{k}]" for k in range(spec.K)]
            + ["sigma1", "sigma2", "t", "s2"]
        )
        values = np.concatenate(
            [
                report.theta_hat.A,
                report.theta_hat.Gamma,
                [
                    report.theta_hat.sigma1,
                    report.theta_hat.sigma2,
                    report.theta_hat.t,
                    report.theta_hat.s2,
                ],
            ]
        )
        table = _coef_table(names, values, report.std_errors)
    else:
        ses = report.phi_se if report.phi_se is not None else [np.nan] * spec.K
        table = _coef_table(
            [f"Phi[{k}]" for k in range(spec.K)], report.phi_hat, ses
        )
    _emit_table(table, args.table, args.out)
    if report.status != "converged":
        logger.error("estimation finished with status %r", report.status)
        return 1
    return 0


def _fd_base_step(value0: float) -> float:
    """Central-difference step balancing roundoff against truncation.

    Cancellation noise in a central difference grows with the objective's
    magnitude (|f| eps / h), so the step must grow with |f| too; the cube
    root balances it against the O(h^2) truncation term.
    """
    eps = np.finfo(float).eps
    return max(1e-6, (3.0 * eps * max(1.0, abs(value0))) ** (1.0 / 3.0))


def _gradcheck_errors(spec, sample, theta, solver):
    """Central finite differences of the likelihood vs the analytic gradient."""
    ev = LikelihoodEvaluator(spec, sample, solver)
    if sample.n_observed == 0:
        coefs = theta.Phi
        value0, grad = ev.matching_value_and_gradient(coefs)
        base = _fd_base_step(value0)
        names, errors = [], []
        for k in range(coefs.size):
            h = base * max(1.0, abs(coefs[k]))
            up, dn = coefs.copy(), coefs.copy()
            up[k] += h
            dn[k] -= h
            fd = (ev.matching_value_and_gradient(up)[0]
                  - ev.matching_value_and_gradient(dn)[0]) / (2 * h)
            denom = max(abs(grad[k]), abs(fd), 1e-8)
            names.append(f"Phi[{k}]")
            errors.append(abs(grad[k] - fd) / denom)
        return names, errors

    value0, grad = ev.value_and_gradient(theta)
    base = _fd_base_step(value0)
    K = spec.K
    coords = (
        [("A", k) for k in np.flatnonzero(spec.alpha_mask)]
        + [("Gamma", k) for k in np.flatnonzero(spec.gamma_mask)]
        + [("sigma1", None), ("sigma2", None), ("t", None), ("s2", None)]
    )
    flat = {
        "A": lambda k: int(k),
        "Gamma": lambda k: K + int(k),
        "sigma1": lambda _: 2 * K,
        "sigma2": lambda _: 2 * K + 1,
        "t": lambda _: 2 * K + 2,
        "s2": lambda _: 2 * K + 3,
    }

    def shifted(field, k, delta):
        if field in ("A", "Gamma"):
            arr = getattr(theta, field).copy()
            arr[k] += delta
            return dataclasses.replace(theta, **{field: arr})
        return dataclasses.replace(theta, **{field: getattr(theta, field) + delta})

    names, errors = [], []
    for field, k in coords:
        value = getattr(theta, field)[k] if k is not None else getattr(theta, field)
        if field in ("sigma1", "sigma2", "s2"):
            # curvature in these scales like inverse powers of the value, so
            # step multiplicatively and keep both stencil points positive
            h = base * max(value, 1e-3)
            h = min(h, max(value / 2.0, 1e-12))
        else:
            h = base * max(1.0, abs(value))
        fd = (
            ev.breakdown(shifted(field, k, h)).total
            - ev.breakdown(shifted(field, k, -h)).total
        ) / (2 * h)
        g = grad[flat[field](k)]
        denom = max(abs(g), abs(fd), 1e-8)
        names.append(field if k is None else f"{field}[{int(k)}]")
        errors.append(abs(g - fd) / denom)
    return names, errors


def _cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    sample = load_sample(args.data, schema_from_config(cfg))
    spec = spec_from_config(cfg)
    theta = theta_from_config(cfg)
    solver = _solver_from_config(cfg)
    if "solver" not in cfg or "tol" not in cfg.get("solver", {}):
        # FD quality is limited by the inner solve; default much tighter.
        solver = dataclasses.replace(solver, tol=1e-13)
    names, errors = _gradcheck_errors(spec, sample, theta, solver)
    worst = float(np.max(errors))
    payload = _base_payload("gradcheck", cfg)
    payload.update(
        {
            "data": str(args.data),
            "per_coordinate": dict(zip(names, errors)),
            "max_relative_error": worst,
            "tolerance": args.tol,
            "passed": bool(worst <= args.tol),
        }
    )
    _write_json(payload, args.out)
    if worst > args.tol:
        logger.error("gradient check failed: %.3e > %.1e", worst, args.tol)
        return 1
    logger.info("gradient check passed: max relative error %.3e", worst)
    return 0


def _cmd_vsl(args) -> int:
    cfg = load_config(args.config)
    theta = _report_theta(args.report)
    spec = spec_from_config(cfg)
    earn, scale, coord = _vsl_settings(cfg, args)
    value = vsl(theta, spec, earn, scale, coord)
    payload = _base_payload("vsl", cfg)
    payload.update(
        {
            "report": str(args.report),
            "mean_earnings": earn,
            "risk_unit_scale": scale,
            "risk_coordinate": coord,
            "vsl": value,
        }
    )
    _write_json(payload, args.out)
    return 0


def _make_transform(table: dict):
    kind = str(table.get("kind", ""))
    coord = int(table.get("coordinate", 0))
    if kind == "cap":
        bound = float(table["value"])

        def transform(grid):
            grid[:, coord] = np.minimum(grid[:, coord], bound)
            return grid

    elif kind == "scale":
        factor = float(table["value"])

        def transform(grid):
            grid[:, coord] *= factor
            return grid

    elif kind == "shift":
        delta = float(table["value"])

        def transform(grid):
            grid[:, coord] += delta
            return grid

    elif kind == "identity":

        def transform(grid):
            return grid

    else:
        raise ValueError(
            f"unknown counterfactual kind {kind!r}; use cap, scale, shift or identity"
        )
    return transform


def _cmd_counterfactual(args) -> int:
    cfg = load_config(args.config)
    schema = schema_from_config(cfg)
    sample = load_sample(args.data, schema)
    spec = spec_from_config(cfg)
    theta = _report_theta(args.report)
    table = cfg.get("counterfactual", {})
    transform = _make_transform(table)
    transfer_transform = (
        schema.transfer_transform
        if schema.transfer_transform in ("identity", "log")
        else "identity"
    )
    result = counterfactual(
        theta,
        spec,
        sample,
        transform,
        _solver_from_config(cfg),
        transfer_transform=transfer_transform,
    )
    payload = _base_payload("counterfactual", cfg)
    payload.update(
        {
            "data": str(args.data),
            "report": str(args.report),
            "share_changed": result.share_changed,
            "mean_wage_change": result.mean_wage_change,
            "gini_before": result.gini_before,
            "gini_after": result.gini_after,
            "feasibility_residual": result.feasibility_residual,
            "note": result.note,
        }
    )
    _write_json(payload, args.out)
    return 0


def _cmd_hedonic(args) -> int:
    cfg = load_config(args.config)
    sample = load_sample(args.data, schema_from_config(cfg))
    earn, scale, coord = _vsl_settings(cfg, args)
    risk_column = 1 + sample.workers.shape[1] + coord
    fit = hedonic_baseline(
        sample,
        risk_column=risk_column,
        mean_earnings=earn,
        risk_unit_scale=scale,
    )
    payload = _base_payload("hedonic", cfg)
    payload.update(
        {
            "data": str(args.data),
            "coefficients": fit.coefficients,
            "std_errors": fit.std_errors,
            "names": list(fit.names),
            "r_squared": fit.r_squared,
            "risk_column": risk_column,
            "vsl_h": fit.vsl_h,
        }
    )
    _write_json(payload, args.out)
    _emit_table(
        _coef_table(fit.names, fit.coefficients, fit.std_errors),
        args.table,
        args.out,
    )
    return 0


# --------------------------------------------------------------------------
# wiring


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matchvalue",
        description="Matching-market maximum likelihood: simulate, fit, analyze.",
    )
    parser.add_argument("--verbose", action="store_true", help="log at debug level")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, report_in=False, table=False):
        p.add_argument("--config", required=True, help="TOML configuration file")
        p.add_argument("--out", default=None, help="JSON report path (default stdout)")
        if data:
            p.add_argument("--data", required=True, help="input CSV dataset")
        if report_in:
            p.add_argument(
                "--report", required=True, help="JSON report from a previous estimate"
            )
        if table:
            p.add_argument("--table", default=None, help="fixed-width table path")

    p = sub.add_parser("simulate", help="draw a sample from a grid market")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--missing-prob", type=float, default=None)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--report", default=None, help="JSON summary path (default stdout)")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("estimate", help="maximum-likelihood fit from CSV data")
    common(p, data=True, table=True)
    p.add_argument("--concentrated", action="store_true")
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradient")
    common(p, data=True)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=_cmd_gradcheck)

    def vsl_flags(p):
        p.add_argument("--mean-earnings", dest="mean_earnings", type=float, default=None)
        p.add_argument(
            "--risk-unit-scale", dest="risk_unit_scale", type=float, default=None
        )
        p.add_argument(
            "--risk-coordinate", dest="risk_coordinate", type=int, default=None
        )

    p = sub.add_parser("vsl", help="value of a statistical life from a fit")
    common(p, report_in=True)
    vsl_flags(p)
    p.set_defaults(func=_cmd_vsl)

    p = sub.add_parser("counterfactual", help="re-solve after transforming firm types")
    common(p, data=True, report_in=True)
    p.set_defaults(func=_cmd_counterfactual)

    p = sub.add_parser("hedonic", help="reduced-form wage regression baseline")
    common(p, data=True, table=True)
    vsl_flags(p)
    p.set_defaults(func=_cmd_hedonic)
    return parser


def _configure_logging(verbose: bool) -> None:
    level_name = os.environ.get("MATCHVALUE_VERBOSITY", "info" if verbose else "warning")
    if verbose:
        level_name = "debug"
    level = getattr(logging, level_name.upper(), logging.WARNING)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level)


def run_cli(argv) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose)
    try:
        return int(args.func(args))
    except (OSError, ValueError, KeyError) as exc:
        logger.error("%s", exc)
        return 2
    except SolverError as exc:
        logger.error("solver failure: %s", exc)
        return 1


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
