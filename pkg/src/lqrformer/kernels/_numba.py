"""Numba ``@njit`` kernels, loop-for-loop equivalents of ``_numpy.py``.

Importing this module triggers no compilation; each kernel compiles on
first call and is cached on disk (``cache=True``).
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


@njit(cache=True)
def _cholesky_solve(S, rhs):
    # S is SPD (R + B'PB with R > 0); rhs is m x n
    m = S.shape[0]
    Lc = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1):
            s = S[i, j]
            for k in range(j):
                s -= Lc[i, k] * Lc[j, k]
            if i == j:
                if s <= 0.0:
                    raise ValueError("matrix is not positive definite")
                Lc[i, i] = math.sqrt(s)
            else:
                Lc[i, j] = s / Lc[j, j]
    n = rhs.shape[1]
    out = np.empty((m, n))
    y = np.empty(m)
    for c in range(n):
        for i in range(m):
            s = rhs[i, c]
            for k in range(i):
                s -= Lc[i, k] * y[k]
            y[i] = s / Lc[i, i]
        for i in range(m - 1, -1, -1):
            s = y[i]
            for k in range(i + 1, m):
                s -= Lc[k, i] * out[k, c]
            out[i, c] = s / Lc[i, i]
    return out


@njit(cache=True)
def riccati_iterate(A, B, Q, R, tol, max_iter):
    P = Q.copy()
    At = np.ascontiguousarray(A.T)
    Bt = np.ascontiguousarray(B.T)
    delta = np.inf
    for k in range(1, max_iter + 1):
        PA = P @ A
        PB = P @ B
        S = R + Bt @ PB
        BtPA = Bt @ PA
        gain = _cholesky_solve(S, BtPA)
        P_next = Q + At @ PA - np.ascontiguousarray(BtPA.T) @ gain
        n = P.shape[0]
        acc = 0.0
        for i in range(n):
            for j in range(i, n):
                v = 0.5 * (P_next[i, j] + P_next[j, i])
                P_next[i, j] = v
                P_next[j, i] = v
        for i in range(n):
            for j in range(n):
                d = P_next[i, j] - P[i, j]
                acc += d * d
        delta = math.sqrt(acc)
        P = P_next
        if delta < tol:
            return P, k, delta
    return P, max_iter, delta


@njit(cache=True)
def closed_loop_rollout(A, B, K, X0, T):
    J, n = X0.shape
    m = K.shape[0]
    X = np.empty((J, T, n))
    U = np.empty((J, T, m))
    x = np.empty(n)
    u = np.empty(m)
    for j in range(J):
        for i in range(n):
            x[i] = X0[j, i]
        for t in range(T):
            for a in range(m):
                s = 0.0
                for i in range(n):
                    s -= K[a, i] * x[i]
                u[a] = s
            for i in range(n):
                X[j, t, i] = x[i]
            for a in range(m):
                U[j, t, a] = u[a]
            xn = np.zeros(n)
            for i in range(n):
                s = 0.0
                for k in range(n):
                    s += A[i, k] * x[k]
                for a in range(m):
                    s += B[i, a] * u[a]
                xn[i] = s
            x[:] = xn
    return X, U


@njit(cache=True)
def quadratic_cost(X, U, Q, R):
    J, T, n = X.shape
    m = U.shape[2]
    out = np.zeros(J)
    for j in range(J):
        acc = 0.0
        for t in range(T):
            for i in range(n):
                row = 0.0
                for k in range(n):
                    row += Q[i, k] * X[j, t, k]
                acc += X[j, t, i] * row
            for a in range(m):
                row = 0.0
                for b in range(m):
                    row += R[a, b] * U[j, t, b]
                acc += U[j, t, a] * row
        out[j] = acc
    return out


@njit(cache=True)
def layer_norm_forward(x, gamma, beta, rho):
    rows, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    inv_std = np.empty(rows)
    for r in range(rows):
        mu = 0.0
        for c in range(d):
            mu += x[r, c]
        mu /= d
        var = 0.0
        for c in range(d):
            v = x[r, c] - mu
            var += v * v
        var /= d
        s = 1.0 / math.sqrt(var + rho)
        inv_std[r] = s
        for c in range(d):
            h = (x[r, c] - mu) * s
            xhat[r, c] = h
            y[r, c] = gamma[c] * h + beta[c]
    return y, xhat, inv_std


@njit(cache=True)
def layer_norm_backward(gy, xhat, inv_std, gamma):
    rows, d = gy.shape
    gx = np.empty_like(gy)
    ggamma = np.zeros(d)
    gbeta = np.zeros(d)
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for c in range(d):
            g = gy[r, c] * gamma[c]
            m1 += g
            m2 += g * xhat[r, c]
            ggamma[c] += gy[r, c] * xhat[r, c]
            gbeta[c] += gy[r, c]
        m1 /= d
        m2 /= d
        for c in range(d):
            gx[r, c] = inv_std[r] * (gy[r, c] * gamma[c] - m1 - xhat[r, c] * m2)
    return gx, ggamma, gbeta


@njit(cache=True)
def softmax_rows(x):
    rows, d = x.shape
    y = np.empty_like(x)
    for r in range(rows):
        mx = x[r, 0]
        for c in range(1, d):
            if x[r, c] > mx:
                mx = x[r, c]
        tot = 0.0
        for c in range(d):
            e = math.exp(x[r, c] - mx)
            y[r, c] = e
            tot += e
        for c in range(d):
            y[r, c] /= tot
    return y


@njit(cache=True)
def softmax_rows_backward(gy, y):
    rows, d = y.shape
    gx = np.empty_like(y)
    for r in range(rows):
        dot = 0.0
        for c in range(d):
            dot += gy[r, c] * y[r, c]
        for c in range(d):
            gx[r, c] = y[r, c] * (gy[r, c] - dot)
    return gx


@njit(cache=True)
def gelu_forward(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        out[i] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))
    return out.reshape(x.shape)


@njit(cache=True)
def gelu_backward(gy, x):
    flat = x.ravel()
    gflat = gy.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
        pdf = _INV_SQRT2PI * math.exp(-0.5 * v * v)
        out[i] = gflat[i] * (cdf + v * pdf)
    return out.reshape(x.shape)
