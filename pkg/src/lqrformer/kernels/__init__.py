"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import time: numba when it imports cleanly,
unless ``LQRF_NUMBA=0`` is set in the environment.  ``set_backend`` switches
it at runtime (tests and ``benchmarks/bench_kernels.py`` use this).

The two backends agree to rounding, not bit-for-bit; determinism guarantees
hold within one backend.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from types import ModuleType

import numpy as np

from . import _numpy

try:
    if os.environ.get("LQRF_NUMBA", "1").strip().lower() in ("0", "false", "no", "off"):
        raise ImportError("numba disabled by LQRF_NUMBA")
    from . import _numba
except ImportError:  # pragma: no cover - depends on environment
    _numba = None

BACKENDS = ("numba", "numpy")
_backend = "numba" if _numba is not None else "numpy"


def numba_available() -> bool:
    return _numba is not None


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and _numba is None:
        raise RuntimeError("numba backend requested but numba is unavailable")
    _backend = name


@contextmanager
def use_backend(name: str):
    prev = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def _impl() -> ModuleType:
    return _numba if _backend == "numba" else _numpy


def _f64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def riccati_iterate(A, B, Q, R, tol: float, max_iter: int):
    """Value iteration on the discrete Riccati map starting from ``P = Q``.

    Returns ``(P, iterations, last_delta)`` where ``last_delta`` is the
    Frobenius norm of the final update.
    """
    P, k, delta = _impl().riccati_iterate(_f64(A), _f64(B), _f64(Q), _f64(R), float(tol), int(max_iter))
    return P, int(k), float(delta)


def closed_loop_rollout(A, B, K, X0, T: int):
    """Simulate ``x+ = A x + B u`` with ``u = -K x`` for a batch of initial states.

    ``X0`` is ``(J, n)``; returns states ``(J, T, n)`` and controls ``(J, T, m)``
    for steps ``0 .. T-1``.
    """
    return _impl().closed_loop_rollout(_f64(A), _f64(B), _f64(K), _f64(np.atleast_2d(X0)), int(T))


def quadratic_cost(X, U, Q, R) -> np.ndarray:
    """Per-trajectory ``sum_t x'Qx + u'Ru`` for ``X (J,T,n)``, ``U (J,T,m)``."""
    return _impl().quadratic_cost(_f64(X), _f64(U), _f64(Q), _f64(R))


def layer_norm_forward(x, gamma, beta, rho: float):
    """Row-wise layer norm over the last axis.  Returns ``(y, xhat, inv_std)``."""
    x = _f64(x)
    shape = x.shape
    y, xhat, inv_std = _impl().layer_norm_forward(x.reshape(-1, shape[-1]), _f64(gamma), _f64(beta), float(rho))
    return y.reshape(shape), xhat.reshape(shape), inv_std.reshape(shape[:-1])


def layer_norm_backward(gy, xhat, inv_std, gamma):
    gy = _f64(gy)
    shape = gy.shape
    d = shape[-1]
    gx, ggamma, gbeta = _impl().layer_norm_backward(
        gy.reshape(-1, d), _f64(xhat).reshape(-1, d), _f64(inv_std).reshape(-1), _f64(gamma)
    )
    return gx.reshape(shape), ggamma, gbeta


def softmax_rows(x):
    x = _f64(x)
    return _impl().softmax_rows(x.reshape(-1, x.shape[-1])).reshape(x.shape)


def softmax_rows_backward(gy, y):
    gy = _f64(gy)
    d = gy.shape[-1]
    return _impl().softmax_rows_backward(gy.reshape(-1, d), _f64(y).reshape(-1, d)).reshape(gy.shape)


def gelu_forward(x):
    return _impl().gelu_forward(_f64(x))


def gelu_backward(gy, x):
    return _impl().gelu_backward(_f64(gy), _f64(x))
