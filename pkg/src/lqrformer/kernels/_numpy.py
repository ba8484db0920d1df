"""Pure-numpy implementations of the hot kernels.

Every function here has a loop-level twin in ``_numba.py`` with the same
signature.  Inputs are assumed to be C-contiguous float64 arrays; the
dispatcher in ``__init__`` takes care of that.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def riccati_iterate(A, B, Q, R, tol, max_iter):
    P = Q.copy()
    delta = np.inf
    for k in range(1, max_iter + 1):
        PA = P @ A
        PB = P @ B
        S = R + B.T @ PB
        BtPA = PB.T @ A
        gain = cho_solve(cho_factor(S, lower=True), BtPA)
        P_next = Q + A.T @ PA - BtPA.T @ gain
        P_next = 0.5 * (P_next + P_next.T)
        delta = float(np.sqrt(np.sum((P_next - P) ** 2)))
        P = P_next
        if delta < tol:
            return P, k, delta
    return P, max_iter, delta


def closed_loop_rollout(A, B, K, X0, T):
    J, n = X0.shape
    m = K.shape[0]
    X = np.empty((J, T, n))
    U = np.empty((J, T, m))
    x = X0.copy()
    for t in range(T):
        u = -(x @ K.T)
        X[:, t] = x
        U[:, t] = u
        x = x @ A.T + u @ B.T
    return X, U


def quadratic_cost(X, U, Q, R):
    sx = np.einsum("jti,ik,jtk->j", X, Q, X)
    su = np.einsum("jti,ik,jtk->j", U, R, U)
    return sx + su


def layer_norm_forward(x, gamma, beta, rho):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + rho)
    xhat = xc * inv_std
    return gamma * xhat + beta, xhat, inv_std[:, 0]


def layer_norm_backward(gy, xhat, inv_std, gamma):
    gxhat = gy * gamma
    d = xhat.shape[1]
    m1 = gxhat.sum(axis=1, keepdims=True) / d
    m2 = (gxhat * xhat).sum(axis=1, keepdims=True) / d
    gx = inv_std[:, None] * (gxhat - m1 - xhat * m2)
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


def softmax_rows(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(gy, y):
    return y * (gy - (gy * y).sum(axis=1, keepdims=True))


def gelu_forward(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_backward(gy, x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return gy * (cdf + x * pdf)
