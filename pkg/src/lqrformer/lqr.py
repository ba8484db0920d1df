"""Discrete algebraic Riccati equation, optimal gains and closed-loop costs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels
from .errors import NumericError, SolverError
from .lti import LtiSystem, spectral_radius

DEFAULT_TOL = 1e-12
DEFAULT_MAX_ITER = 100_000
DEFAULT_BLOWUP = 1e6


@dataclass(eq=False)
class LqrSolution:
    P: np.ndarray
    K: np.ndarray
    residual: float
    iterations: int = 0

    def closed_loop(self, sys: LtiSystem) -> np.ndarray:
        return sys.A - sys.B @ self.K

    def optimal_cost(self, x0) -> float:
        x0 = np.asarray(x0, dtype=np.float64)
        return float(x0 @ self.P @ x0)


def are_residual(A, B, Q, R, P) -> float:
    """Frobenius norm of ``Q + A'PA - A'PB (R + B'PB)^-1 B'PA - P``."""
    S = R + B.T @ P @ B
    BtPA = B.T @ P @ A
    defect = Q + A.T @ P @ A - BtPA.T @ np.linalg.solve(S, BtPA) - P
    return float(np.linalg.norm(defect))


def optimal_gain(A, B, R, P) -> np.ndarray:
    S = R + B.T @ P @ B
    try:
        c = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise NumericError("R + B'PB is not positive definite") from None
    rhs = B.T @ P @ A
    y = np.linalg.solve(c, rhs)
    return np.linalg.solve(c.T, y)


def solve_dare(sys: LtiSystem, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> LqrSolution:
    """Riccati value iteration ``P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA`` from ``P = Q``.

    Stops when the Frobenius norm of the update drops below ``tol``.
    """
    P, iters, delta = kernels.riccati_iterate(sys.A, sys.B, sys.Q, sys.R, tol, max_iter)
    if not np.all(np.isfinite(P)):
        raise SolverError(f"{sys.name}: Riccati iteration produced non-finite values", residual=float("nan"))
    if delta >= tol:
        raise SolverError(
            f"{sys.name}: Riccati iteration did not converge in {max_iter} iterations "
            f"(last update {delta:.3e})",
            residual=delta,
        )
    K = optimal_gain(sys.A, sys.B, sys.R, P)
    return LqrSolution(P=P, K=K, residual=are_residual(sys.A, sys.B, sys.Q, sys.R, P), iterations=iters)


def tail_factor(sys: LtiSystem, sol: LqrSolution, horizon: int) -> float:
    """``rho(A - BK) ** horizon``: how much of the state survives past the horizon."""
    return spectral_radius(sol.closed_loop(sys)) ** horizon


def closed_loop_cost(
    sys: LtiSystem,
    policy: Callable[[np.ndarray], np.ndarray],
    x0,
    horizon: int,
    blowup: float = DEFAULT_BLOWUP,
) -> float:
    """``sum_{t < horizon} x'Qx + u'Ru`` under ``u = policy(x)``.

    Returns ``inf`` if the state leaves the ball of radius
    ``blowup * max(1, |x0|)`` or turns non-finite.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    x = np.asarray(x0, dtype=np.float64).copy()
    bound = blowup * max(1.0, float(np.linalg.norm(x)))
    cost = 0.0
    for _ in range(horizon):
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > bound:
            return float("inf")
        u = np.asarray(policy(x), dtype=np.float64).reshape(sys.n_u)
        cost += float(x @ sys.Q @ x + u @ sys.R @ u)
        x = sys.A @ x + sys.B @ u
    return cost if np.isfinite(cost) else float("inf")


def linear_policy(K: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    return lambda x: -(K @ x)
