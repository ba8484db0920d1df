import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from lqrformer import lti
from lqrformer.errors import GenerationError, NumericError
from lqrformer.lti import LtiSystem, VariantSpec


def test_catalog_sizes_and_groups():
    cat = lti.catalog()
    assert len([e for e in cat if e.group == "seen"]) == 17
    assert len([e for e in cat if e.group == "unseen"]) == 11
    assert len({e.name for e in cat}) == len(cat)
    assert lti.catalog_version() >= 1


@pytest.mark.parametrize("entry", lti.catalog(), ids=lambda e: e.name)
def test_every_catalog_system_is_valid(entry):
    sys = entry.build()
    assert 1 <= sys.n_x <= lti.N_X_MAX and 1 <= sys.n_u <= lti.N_U_MAX
    assert lti.is_stabilizable(sys.A, sys.B)
    assert lti.is_detectable(sys.A, lti.psd_sqrt(sys.Q))
    np.testing.assert_array_equal(sys.R, 0.1 * np.eye(sys.n_u))


def test_double_integrator_is_exact_zoh():
    sys = lti.get_entry("Double Integrator").build(dt=0.02)
    dt = 0.02
    np.testing.assert_allclose(sys.A, [[1, dt], [0, 1]], atol=1e-15)
    np.testing.assert_allclose(sys.B, [[dt * dt / 2], [dt]], atol=1e-15)


def test_mass_spring_damper_matches_expm():
    entry = lti.get_entry("Mass Spring Damper")
    Ac, Bc = entry.continuous
    np.testing.assert_allclose(Ac, [[0, 1], [-1, -0.5]])
    sys = entry.build()
    np.testing.assert_allclose(sys.A, sla.expm(Ac * 0.02), atol=1e-13)
    assert lti.spectral_radius(sys.A) < 1


def test_discretize_examples():
    A, B = lti.discretize(np.zeros((2, 2)), np.eye(2), 0.02)
    np.testing.assert_array_equal(A, np.eye(2))
    np.testing.assert_allclose(B, 0.02 * np.eye(2), atol=1e-17)
    A, _ = lti.discretize(np.array([[-3.0]]), np.array([[1.0]]), 0.02)
    assert abs(A[0, 0] - np.exp(-0.06)) < 1e-15


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.floats(0.001, 0.5), st.integers(0, 10**6))
def test_discretize_matches_scipy(n, m, dt, seed):
    rng = np.random.default_rng(seed)
    Ac, Bc = rng.normal(size=(n, n)) * 3, rng.normal(size=(n, m))
    A, B = lti.discretize(Ac, Bc, dt)
    aug = np.zeros((n + m, n + m))
    aug[:n, :n], aug[:n, n:] = Ac, Bc
    E = sla.expm(aug * dt)
    assert np.linalg.norm(A - E[:n, :n]) < 1e-10 * max(1, np.linalg.norm(E))
    assert np.linalg.norm(B - E[:n, n:]) < 1e-10 * max(1, np.linalg.norm(E))


def test_discretize_rejects_bad_input():
    with pytest.raises(ValueError):
        lti.discretize(np.eye(2), np.ones((2, 1)), 0.0)
    with pytest.raises(NumericError):
        lti.discretize(np.eye(2) * 1e6, np.ones((2, 1)), 1.0, tol=1e-300)


def test_pbh_tests():
    A = np.diag([1.5, 0.5])
    assert lti.is_stabilizable(A, np.array([[1.0], [0.0]]))
    assert not lti.is_stabilizable(A, np.array([[0.0], [1.0]]))
    assert lti.is_detectable(A, np.array([[1.0, 0.0]]))
    assert not lti.is_detectable(A, np.array([[0.0, 1.0]]))


def test_system_rejects_invalid_designs():
    A, B = np.array([[1.1]]), np.array([[1.0]])
    with pytest.raises(ValueError):
        LtiSystem("bad R", A, B, np.eye(1), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        LtiSystem("bad Q", A, B, -np.eye(1), np.eye(1))
    with pytest.raises(ValueError):
        LtiSystem("unstabilizable", np.diag([1.1, 0.5]), np.array([[0.0], [1.0]]), np.eye(2), np.eye(1))
    with pytest.raises(ValueError):
        LtiSystem("undetectable", A, B, np.zeros((1, 1)), np.eye(1))
    with pytest.raises(ValueError):
        LtiSystem("too big", np.eye(13) * 0.5, np.ones((13, 1)), np.eye(13), np.eye(1))


def test_system_dict_round_trip():
    sys = lti.get_entry("Segway Robot").build(system_id=3)
    back = LtiSystem.from_dict(sys.to_dict())
    for k in "ABQR":
        np.testing.assert_array_equal(getattr(back, k), getattr(sys, k))
    assert (back.name, back.id, back.dt) == (sys.name, 3, sys.dt)


def test_select():
    assert len(lti.select("seen")) == 17
    assert len(lti.select("all")) == 28
    two = lti.select("Double Integrator, DC Motor")
    assert [e.name for e in two] == ["Double Integrator", "DC Motor"]
    with pytest.raises(KeyError):
        lti.select("No Such System")


def test_zero_delta_variants_equal_nominal():
    nominal = lti.get_entry("DC Motor").build()
    for v in lti.make_variants(VariantSpec("DC Motor", delta=0.0, count=3)):
        np.testing.assert_array_equal(v.A, nominal.A)
        np.testing.assert_array_equal(v.B, nominal.B)


@pytest.mark.parametrize("domain", ["continuous", "discrete"])
def test_variants_are_valid_bounded_and_reproducible(domain):
    spec = VariantSpec("Inverted Pendulum", delta=0.3, seed=4, count=20, domain=domain)
    vs = lti.make_variants(spec)
    again = lti.make_variants(spec)
    assert len(vs) == 20
    entry = lti.get_entry("Inverted Pendulum")
    Ac, Bc = entry.continuous
    A0, B0 = lti.discretize(Ac, Bc, spec.dt)
    for k, (v, w) in enumerate(zip(vs, again)):
        assert v.variant == k and v.base_name == "Inverted Pendulum"
        np.testing.assert_array_equal(v.A, w.A)
        np.testing.assert_array_equal(v.B, w.B)
        v.check()
        np.testing.assert_array_equal(v.Q, entry.cost_matrices()[0])
    if domain == "discrete":
        for v in vs:
            assert np.all(np.abs(v.A - A0) <= 0.3 * np.abs(A0) + 1e-15)
            assert np.all(np.abs(v.B - B0) <= 0.3 * np.abs(B0) + 1e-15)
            assert np.all((A0 != 0) | (v.A == 0))


def test_perturb_bounds_and_structural_zeros():
    rng = np.random.default_rng(0)
    M = np.array([[1.0, 0.0], [-2.0, 3.0]])
    for _ in range(100):
        P = lti.perturb(M, 0.3, rng)
        assert P[0, 1] == 0.0
        assert np.all(np.abs(P - M) <= 0.3 * np.abs(M) + 1e-15)


def test_variant_streams_are_order_independent():
    a = lti.variant_rng(1, "X", 3, 0).uniform(size=4)
    lti.variant_rng(1, "X", 2, 0).uniform(size=100)
    b = lti.variant_rng(1, "X", 3, 0).uniform(size=4)
    np.testing.assert_array_equal(a, b)


def test_retry_budget_exhaustion_names_base():
    with pytest.raises(GenerationError, match="Inverted Pendulum"):
        # a zero retry budget can never produce a variant
        lti.make_variants(VariantSpec("Inverted Pendulum", delta=0.3, count=1, max_retries=0))


def test_delta_bounds():
    with pytest.raises(ValueError):
        VariantSpec("DC Motor", delta=1.0)
    with pytest.raises(ValueError):
        VariantSpec("DC Motor", delta=-0.1)
