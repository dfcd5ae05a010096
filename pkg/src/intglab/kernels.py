"""Kernel dispatch: compiled Cython loops when built, numpy otherwise.

Set ``INTGLAB_PURE_PYTHON=1`` to force the numpy fallback. ``BACKEND`` names
the implementation that was selected at import.
"""
import os

import numpy as np

from . import _pykernels

if os.environ.get("INTGLAB_PURE_PYTHON") == "1":
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"


def causal_softmax(x: np.ndarray) -> np.ndarray:
    """Row softmax over ``j <= i`` of a stack of ``(n, k)`` matrices; zeros above."""
    lead = x.shape[:-2]
    flat = np.ascontiguousarray(x, dtype=np.float64).reshape((-1,) + x.shape[-2:])
    return np.asarray(_impl.causal_softmax(flat)).reshape(lead + x.shape[-2:])


def causal_softmax_backward(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    lead = y.shape[:-2]
    yf = np.ascontiguousarray(y, dtype=np.float64).reshape((-1,) + y.shape[-2:])
    gf = np.ascontiguousarray(gy, dtype=np.float64).reshape((-1,) + y.shape[-2:])
    return np.asarray(_impl.causal_softmax_backward(yf, gf)).reshape(lead + y.shape[-2:])


def jacobi_singular_values(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60) -> np.ndarray:
    """The ``min(m, n)`` singular values (descending) by one-sided Hestenes-Jacobi rotations."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {a.shape}")
    if a.shape[0] < a.shape[1]:
        a = a.T  # rotate the shorter side; same spectrum
    a = np.ascontiguousarray(a)
    return np.asarray(_impl.jacobi_singular_values(a, tol, max_sweeps))
