"""Low-level numeric kernels for the potential solver.

The inner sweeps of the matching-equilibrium solver are the hot path of the
whole package: every likelihood evaluation runs tens to hundreds of them.
Each kernel therefore exists twice -- a numba ``@njit`` version and a plain
numpy version.  The numpy path is selected automatically when numba is not
importable, or explicitly by setting the environment variable
``MATCHVALUE_NO_NUMBA`` to a non-empty value (anything but ``0``).

Both implementations compute identical quantities; they may differ in the
last floating-point bits because summation order differs.  Within one
process the selected backend is fixed, so repeated runs are bit-identical.
"""

from __future__ import annotations

import math
import os

import numpy as np

_ENV_FLAG = os.environ.get("MATCHVALUE_NO_NUMBA", "").strip()
_NUMBA_DISABLED = _ENV_FLAG not in ("", "0")

try:  # pragma: no cover - exercised implicitly by backend selection
    if _NUMBA_DISABLED:
        raise ImportError("numba disabled via MATCHVALUE_NO_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        """Stand-in decorator so the numba definitions below still parse."""

        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def _logsumexp_pass_numpy(phi, shift, pot, target):
    """One half-sweep of the log-domain solver, vectorised.

    Returns ``L`` with ``L[i] = log(sum_j(exp(phi[i, j] - shift[j])))`` and
    the sup-norm violation of the row constraints at the *current* ``pot``,
    i.e. ``max_i |exp(L[i] - pot[i]) - target[i]|``.
    """
    z = phi - shift[np.newaxis, :]
    m = z.max(axis=1)
    L = m + np.log(np.exp(z - m[:, np.newaxis]).sum(axis=1))
    res = float(np.abs(np.exp(L - pot) - target).max())
    return L, res


@njit(cache=True)
def _logsumexp_pass_numba(phi, shift, pot, target):  # pragma: no cover
    n, m = phi.shape
    L = np.empty(n)
    res = 0.0
    for i in range(n):
        mx = -np.inf
        for j in range(m):
            v = phi[i, j] - shift[j]
            if v > mx:
                mx = v
        acc = 0.0
        for j in range(m):
            acc += math.exp(phi[i, j] - shift[j] - mx)
        Li = mx + math.log(acc)
        r = abs(math.exp(Li - pot[i]) - target[i])
        if r > res:
            res = r
        L[i] = Li
    return L, res


def _log_density_numpy(phi, a, b):
    """log pi[i, j] = phi[i, j] - a[i] - b[j]."""
    return phi - a[:, np.newaxis] - b[np.newaxis, :]


@njit(cache=True)
def _log_density_numba(phi, a, b):  # pragma: no cover
    n, m = phi.shape
    out = np.empty((n, m))
    for i in range(n):
        ai = a[i]
        for j in range(m):
            out[i, j] = phi[i, j] - ai - b[j]
    return out


if HAS_NUMBA:
    logsumexp_pass = _logsumexp_pass_numba
    log_density = _log_density_numba
    BACKEND = "numba"
else:
    logsumexp_pass = _logsumexp_pass_numpy
    log_density = _log_density_numpy
    BACKEND = "numpy"


def backend() -> str:
    """Name of the active kernel backend ("numba" or "numpy")."""
    return BACKEND
