"""Data model: matched samples, basis families, and structural parameters.

The production surplus of a worker-firm pair splits into an amenity part
(alpha, valued by the worker) and a productivity part (gamma, valued by the
firm).  Both are linear in a common family of basis functions evaluated on
the pair of covariate vectors; which coefficients are allowed to be nonzero
on each side is controlled by activity masks.  All coefficients are stored
on the heterogeneity-rescaled scale: multiply by ``sigma1 + sigma2`` to
recover original units.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Union

import numpy as np


def _as_float_matrix(arr, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim == 1:
        out = out[:, np.newaxis]
    if out.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array, got shape {out.shape}")
    return out


@dataclasses.dataclass(frozen=True)
class MatchSample:
    """A cross-section of matched worker-firm pairs.

    Attributes:
        workers: (n, d_x) worker covariates, row i describing worker i.
        firms: (n, d_y) covariates of the firm matched to worker i.
        transfers: length-n observed transfers (wages, possibly transformed);
            NaN marks a transfer that was not observed.
        weights: positive sampling weights summing to one.  Duplicate rows
            are permitted and simply carry their own weight.
    """

    workers: np.ndarray
    firms: np.ndarray
    transfers: np.ndarray = None
    weights: np.ndarray = None

    def __post_init__(self):
        workers = _as_float_matrix(self.workers, "workers")
        firms = _as_float_matrix(self.firms, "firms")
        n = workers.shape[0]
        if n < 1:
            raise ValueError("sample must contain at least one pair")
        if firms.shape[0] != n:
            raise ValueError(
                f"workers and firms disagree on n: {n} vs {firms.shape[0]}"
            )
        if not np.isfinite(workers).all() or not np.isfinite(firms).all():
            raise ValueError("covariates must be finite")

        transfers = self.transfers
        if transfers is None:
            transfers = np.full(n, np.nan)
        transfers = np.asarray(transfers, dtype=np.float64)
        if transfers.shape != (n,):
            raise ValueError(f"transfers must have shape ({n},)")
        if np.isinf(transfers).any():
            raise ValueError("transfers must be finite or NaN")

        weights = self.weights
        if weights is None:
            weights = np.full(n, 1.0 / n)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (n,):
            raise ValueError(f"weights must have shape ({n},)")
        if not np.isfinite(weights).all() or (weights <= 0).any():
            raise ValueError("weights must be finite and strictly positive")
        if abs(float(weights.sum()) - 1.0) > 1e-12:
            raise ValueError("weights must sum to one (within 1e-12)")

        for name, arr in (
            ("workers", workers),
            ("firms", firms),
            ("transfers", transfers),
            ("weights", weights),
        ):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.workers.shape[0]

    @property
    def observed(self) -> np.ndarray:
        """Boolean mask of pairs whose transfer was observed."""
        return ~np.isnan(self.transfers)

    @property
    def n_observed(self) -> int:
        return int(self.observed.sum())


@dataclasses.dataclass(frozen=True)
class ProductBasis:
    """phi(x, y) = x[k]*y[l] with 1-based indices; index 0 is the constant 1."""

    worker_index: int
    firm_index: int

    def __post_init__(self):
        if self.worker_index < 0 or self.firm_index < 0:
            raise ValueError("basis indices must be >= 0")

    @property
    def worker_dependent(self) -> bool:
        return self.worker_index != 0

    @property
    def firm_dependent(self) -> bool:
        return self.firm_index != 0

    def describe(self) -> str:
        xs = f"x[{self.worker_index}]" if self.worker_index else ""
        ys = f"y[{self.firm_index}]" if self.firm_index else ""
        return "*".join(s for s in (xs, ys) if s) or "1"


@dataclasses.dataclass(frozen=True)
class CallableBasis:
    """An opaque basis function evaluated pairwise on covariate rows.

    The callable receives one worker row and one firm row and returns a
    scalar.  Cross matrices are materialised densely, so callable bases are
    intended for small problems and tests; the dependence flags feed the
    identification checks.
    """

    tag: str
    fn: Callable[[np.ndarray, np.ndarray], float] = dataclasses.field(compare=False)
    worker_dependent: bool = True
    firm_dependent: bool = True

    def describe(self) -> str:
        return self.tag


BasisFunction = Union[ProductBasis, CallableBasis]


def _basis_key(f: BasisFunction):
    if isinstance(f, ProductBasis):
        return ("product", f.worker_index, f.firm_index)
    return ("callable", f.tag)


@dataclasses.dataclass(frozen=True)
class BasisSpec:
    """A family of basis functions plus activity masks for the two sides.

    ``alpha_mask[k]`` (resp. ``gamma_mask[k]``) says whether basis k enters
    the amenity (resp. productivity) component.  Every basis must be active
    on at least one side.  Bases depending on worker covariates alone cannot
    be amenity-active, and bases depending on firm covariates alone cannot
    be productivity-active: such terms are absorbed by the matching
    problem's additive normalisations and would not be identified.
    """

    functions: tuple
    alpha_mask: np.ndarray
    gamma_mask: np.ndarray

    def __post_init__(self):
        functions = tuple(self.functions)
        if not functions:
            raise ValueError("basis family must contain at least one function")
        for f in functions:
            if not isinstance(f, (ProductBasis, CallableBasis)):
                raise TypeError(f"unsupported basis descriptor: {f!r}")
        keys = [_basis_key(f) for f in functions]
        if len(set(keys)) != len(keys):
            raise ValueError("basis descriptors must be distinct")

        K = len(functions)
        alpha = np.asarray(self.alpha_mask, dtype=bool)
        gamma = np.asarray(self.gamma_mask, dtype=bool)
        if alpha.shape != (K,) or gamma.shape != (K,):
            raise ValueError(f"masks must have shape ({K},)")
        uncovered = ~(alpha | gamma)
        if uncovered.any():
            k = int(np.flatnonzero(uncovered)[0])
            raise ValueError(f"basis {k} is inactive on both sides")

        for k, f in enumerate(functions):
            if alpha[k] and f.worker_dependent and not f.firm_dependent:
                raise ValueError(
                    f"basis {k} ({f.describe()}) depends on workers only and "
                    "cannot be amenity-active"
                )
            if gamma[k] and f.firm_dependent and not f.worker_dependent:
                raise ValueError(
                    f"basis {k} ({f.describe()}) depends on firms only and "
                    "cannot be productivity-active"
                )

        alpha = alpha.copy()
        gamma = gamma.copy()
        alpha.setflags(write=False)
        gamma.setflags(write=False)
        object.__setattr__(self, "functions", functions)
        object.__setattr__(self, "alpha_mask", alpha)
        object.__setattr__(self, "gamma_mask", gamma)

    @property
    def K(self) -> int:
        return len(self.functions)

    @property
    def shared_mask(self) -> np.ndarray:
        """Bases active on both sides (their level split is a free choice)."""
        return self.alpha_mask & self.gamma_mask

    def describe(self, k: int) -> str:
        return self.functions[k].describe()


@dataclasses.dataclass(frozen=True)
class Theta:
    """Structural parameter point.

    ``A`` and ``Gamma`` are the amenity and productivity coefficients on the
    rescaled scale (original-scale coefficients are ``sigma * A`` etc.),
    ``sigma1``/``sigma2`` the worker/firm taste-heterogeneity scales, ``t``
    the transfer location and ``s2`` the measurement-noise variance.
    """

    A: np.ndarray
    Gamma: np.ndarray
    sigma1: float
    sigma2: float
    t: float
    s2: float

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        Gamma = np.asarray(self.Gamma, dtype=np.float64)
        if A.ndim != 1 or Gamma.shape != A.shape:
            raise ValueError("A and Gamma must be 1-D arrays of equal length")
        if not (np.isfinite(A).all() and np.isfinite(Gamma).all()):
            raise ValueError("coefficients must be finite")
        sigma1 = float(self.sigma1)
        sigma2 = float(self.sigma2)
        t = float(self.t)
        s2 = float(self.s2)
        if not (np.isfinite(sigma1) and sigma1 >= 0):
            raise ValueError("sigma1 must be finite and >= 0")
        if not (np.isfinite(sigma2) and sigma2 >= 0):
            raise ValueError("sigma2 must be finite and >= 0")
        if sigma1 + sigma2 <= 0:
            raise ValueError("sigma1 + sigma2 must be positive")
        if not np.isfinite(t):
            raise ValueError("t must be finite")
        if not (np.isfinite(s2) and s2 >= 0):
            raise ValueError("s2 must be finite and nonnegative")
        A = A.copy()
        Gamma = Gamma.copy()
        A.setflags(write=False)
        Gamma.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Gamma", Gamma)
        object.__setattr__(self, "sigma1", sigma1)
        object.__setattr__(self, "sigma2", sigma2)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "s2", s2)

    @property
    def K(self) -> int:
        return self.A.shape[0]

    @property
    def sigma(self) -> float:
        return self.sigma1 + self.sigma2

    @property
    def Phi(self) -> np.ndarray:
        """Total-surplus coefficients A + Gamma."""
        return self.A + self.Gamma

    def masked(self, spec: BasisSpec) -> "Theta":
        """Copy with inactive coefficients forced to zero."""
        return dataclasses.replace(
            self,
            A=np.where(spec.alpha_mask, self.A, 0.0),
            Gamma=np.where(spec.gamma_mask, self.Gamma, 0.0),
        )

    @classmethod
    def zeros(cls, K: int, sigma1=0.25, sigma2=0.25, t=0.0, s2=1.0) -> "Theta":
        return cls(np.zeros(K), np.zeros(K), sigma1, sigma2, t, s2)


class BasisSystem:
    """All basis columns evaluated on the cross product of two type sets.

    Product bases factor as u_k(x) * v_k(y); only the factors are stored and
    cross matrices are obtained through BLAS contractions.  Callable bases
    are materialised as dense blocks once at construction.
    """

    def __init__(self, spec: BasisSpec, workers, firms):
        workers = _as_float_matrix(workers, "workers")
        firms = _as_float_matrix(firms, "firms")
        self.spec = spec
        self.n_workers = workers.shape[0]
        self.n_firms = firms.shape[0]
        K = spec.K

        sep_cols = []
        dense_cols = []
        u_parts = []
        v_parts = []
        dense_parts = []
        for k, f in enumerate(spec.functions):
            if isinstance(f, ProductBasis):
                ki, li = f.worker_index, f.firm_index
                if ki > workers.shape[1] or li > firms.shape[1]:
                    raise ValueError(
                        f"basis {k} ({f.describe()}) indexes past the "
                        f"covariate columns ({workers.shape[1]} worker, "
                        f"{firms.shape[1]} firm)"
                    )
                u = workers[:, ki - 1] if ki else np.ones(self.n_workers)
                v = firms[:, li - 1] if li else np.ones(self.n_firms)
                sep_cols.append(k)
                u_parts.append(u)
                v_parts.append(v)
            else:
                block = np.empty((self.n_workers, self.n_firms))
                for i in range(self.n_workers):
                    xi = workers[i]
                    for j in range(self.n_firms):
                        block[i, j] = float(f.fn(xi, firms[j]))
                if not np.isfinite(block).all():
                    raise ValueError(f"basis {k} ({f.tag}) produced non-finite values")
                dense_cols.append(k)
                dense_parts.append(block)

        self.K = K
        self.sep_cols = np.asarray(sep_cols, dtype=np.intp)
        self.dense_cols = np.asarray(dense_cols, dtype=np.intp)
        # (n, n_sep) factor matrices; empty second axis when all bases are dense
        self.U = (
            np.column_stack(u_parts) if u_parts else np.empty((self.n_workers, 0))
        )
        self.V = np.column_stack(v_parts) if v_parts else np.empty((self.n_firms, 0))
        self.dense = dense_parts

    def combine(self, coefs) -> np.ndarray:
        """Sum_k coefs[k] * phi_k as an (n_workers, n_firms) matrix."""
        coefs = np.asarray(coefs, dtype=np.float64)
        if coefs.shape != (self.K,):
            raise ValueError(f"coefs must have shape ({self.K},)")
        if self.sep_cols.size:
            out = (self.U * coefs[self.sep_cols]) @ self.V.T
        else:
            out = np.zeros((self.n_workers, self.n_firms))
        for pos, k in enumerate(self.dense_cols):
            c = coefs[k]
            if c != 0.0:
                out = out + c * self.dense[pos]
        return out

    def matched_values(self) -> np.ndarray:
        """(n, K) matrix of phi_k on the matched pairs (i, i)."""
        if self.n_workers != self.n_firms:
            raise ValueError("matched values need equally many workers and firms")
        out = np.empty((self.n_workers, self.K))
        if self.sep_cols.size:
            out[:, self.sep_cols] = self.U * self.V
        for pos, k in enumerate(self.dense_cols):
            out[:, k] = np.diagonal(self.dense[pos])
        return out

    def expect_rows(self, pi) -> np.ndarray:
        """E[i, k] = sum_j pi[i, j] * phi_k(x_i, y_j)."""
        out = np.empty((self.n_workers, self.K))
        if self.sep_cols.size:
            out[:, self.sep_cols] = self.U * (pi @ self.V)
        for pos, k in enumerate(self.dense_cols):
            out[:, k] = (pi * self.dense[pos]).sum(axis=1)
        return out

    def expect_cols(self, pi) -> np.ndarray:
        """F[j, k] = sum_i pi[i, j] * phi_k(x_i, y_j)."""
        out = np.empty((self.n_firms, self.K))
        if self.sep_cols.size:
            out[:, self.sep_cols] = self.V * (pi.T @ self.U)
        for pos, k in enumerate(self.dense_cols):
            out[:, k] = (pi * self.dense[pos]).sum(axis=0)
        return out

    def totals(self, pi) -> np.ndarray:
        """sum_ij pi[i, j] * phi_k(x_i, y_j), one entry per basis."""
        return self.expect_rows(pi).sum(axis=0)

    def column(self, k: int) -> np.ndarray:
        """Materialise basis k as a dense cross matrix (small problems)."""
        pos = np.flatnonzero(self.sep_cols == k)
        if pos.size:
            p = int(pos[0])
            return np.outer(self.U[:, p], self.V[:, p])
        pos = int(np.flatnonzero(self.dense_cols == k)[0])
        return self.dense[pos].copy()

    def tensor(self) -> np.ndarray:
        """Full (n_workers, n_firms, K) basis tensor; memory-heavy."""
        out = np.empty((self.n_workers, self.n_firms, self.K))
        for k in range(self.K):
            out[:, :, k] = self.column(k)
        return out


def matched_basis_values(spec: BasisSpec, workers, firms) -> np.ndarray:
    """Basis values on matched pairs only: out[i, k] = phi_k(x_i, y_i).

    Unlike ``BasisSystem.matched_values`` this never materialises cross
    matrices, so callable bases stay O(n).
    """
    workers = _as_float_matrix(workers, "workers")
    firms = _as_float_matrix(firms, "firms")
    n = workers.shape[0]
    if firms.shape[0] != n:
        raise ValueError("workers and firms must pair up")
    out = np.empty((n, spec.K))
    for k, f in enumerate(spec.functions):
        if isinstance(f, ProductBasis):
            ki, li = f.worker_index, f.firm_index
            if ki > workers.shape[1] or li > firms.shape[1]:
                raise ValueError(
                    f"basis {k} ({f.describe()}) indexes past the covariate columns"
                )
            u = workers[:, ki - 1] if ki else 1.0
            v = firms[:, li - 1] if li else 1.0
            out[:, k] = u * v
        else:
            for i in range(n):
                out[i, k] = float(f.fn(workers[i], firms[i]))
    return out


def eval_basis(spec: BasisSpec, x, y) -> np.ndarray:
    """Evaluate every basis function at a single covariate pair.

    Args:
        spec: the basis family.
        x: worker covariate vector (d_x,).
        y: firm covariate vector (d_y,).

    Returns:
        (K,) array of basis values.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    out = np.empty(spec.K)
    for k, f in enumerate(spec.functions):
        if isinstance(f, ProductBasis):
            xv = x[f.worker_index - 1] if f.worker_index else 1.0
            yv = y[f.firm_index - 1] if f.firm_index else 1.0
            out[k] = xv * yv
        else:
            out[k] = float(f.fn(x, y))
    return out


def alpha_value(theta: Theta, spec: BasisSpec, x, y) -> float:
    """Amenity component alpha(x, y); inactive coefficients contribute 0."""
    vals = eval_basis(spec, x, y)
    return float(np.sum(theta.A * spec.alpha_mask * vals))


def gamma_value(theta: Theta, spec: BasisSpec, x, y) -> float:
    """Productivity component gamma(x, y); inactive coefficients contribute 0."""
    vals = eval_basis(spec, x, y)
    return float(np.sum(theta.Gamma * spec.gamma_mask * vals))


def surplus_coefficients(theta: Theta, spec: BasisSpec) -> np.ndarray:
    """Masked total-surplus coefficients entering phi = alpha + gamma."""
    return theta.A * spec.alpha_mask + theta.Gamma * spec.gamma_mask


def phi_matrix(theta: Theta, spec: BasisSpec, sample: MatchSample) -> np.ndarray:
    """Total surplus phi(x_i, y_j) on the sample's cross product.

    Args:
        theta: parameter point (rescaled coefficients).
        spec: basis family with activity masks.
        sample: matched sample supplying the covariate rows.

    Returns:
        (n, n) matrix with entry (i, j) = alpha(x_i, y_j) + gamma(x_i, y_j).
    """
    system = BasisSystem(spec, sample.workers, sample.firms)
    return system.combine(surplus_coefficients(theta, spec))
