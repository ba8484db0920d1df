import math

import numpy as np
import pytest
import scipy.linalg as sla

from lqrformer import lti
from lqrformer.errors import SolverError
from lqrformer.lqr import (
    are_residual, closed_loop_cost, linear_policy, optimal_gain, solve_dare, tail_factor,
)
from lqrformer.lti import LtiSystem

GOLDEN = (1 + math.sqrt(5)) / 2


def scalar(a, b=1.0, q=1.0, r=1.0):
    return LtiSystem("scalar", [[a]], [[b]], [[q]], [[r]])


def test_deadbeat_scalar():
    sol = solve_dare(scalar(0.0))
    assert sol.P[0, 0] == 1.0
    assert sol.K[0, 0] == 0.0


def test_golden_ratio_scalar():
    sol = solve_dare(scalar(1.0))
    assert abs(sol.P[0, 0] - GOLDEN) < 1e-12
    assert abs(sol.K[0, 0] - GOLDEN / (1 + GOLDEN)) < 1e-12
    assert abs(sol.K[0, 0] - 0.618034) < 1e-6


def test_double_integrator_residual_and_stability():
    sys = lti.get_entry("Double Integrator").build()
    sol = solve_dare(sys)
    assert sol.residual < 1e-10
    assert lti.spectral_radius(sol.closed_loop(sys)) < 1


@pytest.mark.parametrize("entry", lti.catalog(), ids=lambda e: e.name)
def test_catalog_matches_scipy(entry):
    sys = entry.build()
    sol = solve_dare(sys)
    P_ref = sla.solve_discrete_are(sys.A, sys.B, sys.Q, sys.R)
    assert np.linalg.norm(sol.P - P_ref) <= 1e-7 * np.linalg.norm(P_ref)
    np.testing.assert_allclose(sol.P, sol.P.T, atol=1e-10)
    assert np.linalg.eigvalsh(sol.P).min() >= -1e-10
    assert sol.residual < 1e-10
    assert lti.spectral_radius(sol.closed_loop(sys)) < 1


def test_non_convergence_raises_with_residual():
    sys = lti.get_entry("Fluid Tank").build()
    with pytest.raises(SolverError) as info:
        solve_dare(sys, max_iter=3)
    assert info.value.residual > 0


def test_gain_uses_stored_p():
    sys = lti.get_entry("Two Link Arm").build()
    sol = solve_dare(sys)
    K = np.linalg.solve(sys.R + sys.B.T @ sol.P @ sys.B, sys.B.T @ sol.P @ sys.A)
    np.testing.assert_allclose(optimal_gain(sys.A, sys.B, sys.R, sol.P), K, rtol=1e-10, atol=1e-12)
    assert are_residual(sys.A, sys.B, sys.Q, sys.R, sol.P) == sol.residual


def test_closed_loop_cost_examples():
    sys = scalar(1.0)
    sol = solve_dare(sys)
    assert closed_loop_cost(sys, linear_policy(sol.K), [0.0], 50) == 0.0
    assert abs(closed_loop_cost(sys, linear_policy(sol.K), [1.0], 200) - GOLDEN) < 1e-8
    with pytest.raises(ValueError):
        closed_loop_cost(sys, linear_policy(sol.K), [1.0], 0)


def test_divergence_guard_returns_inf():
    sys = scalar(1.5)
    assert closed_loop_cost(sys, lambda x: np.zeros(1), [1.0], 500) == math.inf
    assert closed_loop_cost(sys, lambda x: np.array([np.nan]), [1.0], 5) == math.inf


def test_value_function_oracle_on_catalog():
    rng = np.random.default_rng(0)
    for entry in lti.catalog()[::3]:
        sys = entry.build()
        sol = solve_dare(sys)
        assert tail_factor(sys, sol, 1250) < 1e-4
        x0 = rng.uniform(-1, 1, sys.n_x)
        c = closed_loop_cost(sys, linear_policy(sol.K), x0, 1250)
        assert abs(c - sol.optimal_cost(x0)) <= 1e-6 * sol.optimal_cost(x0)


def test_optimality_probe():
    rng = np.random.default_rng(1)
    for name in ("Segway Robot", "Two Link Arm", "DC Motor"):
        sys = lti.get_entry(name).build()
        sol = solve_dare(sys)
        x0 = rng.uniform(-1, 1, sys.n_x)
        base = closed_loop_cost(sys, linear_policy(sol.K), x0, 1500)
        for _ in range(10):
            dK = rng.normal(size=sol.K.shape)
            dK *= 1e-2 * rng.uniform() / np.linalg.norm(dK)
            K = sol.K + dK
            if lti.spectral_radius(sys.A - sys.B @ K) >= 1:
                continue
            assert closed_loop_cost(sys, linear_policy(K), x0, 1500) >= base - 1e-9 * base
