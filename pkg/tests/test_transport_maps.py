import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ensemble_kalman import transport_maps as tm
from ensemble_kalman.gaussian_core import SeededStream, condition_joint, psd_inv_sqrt, psd_sqrt


def setup(seed=0, d_v=3, d_y=2):
    s = SeededStream(seed, ("t",))
    j = tm.random_joint(d_v, d_y, s.child("joint"))
    y = s.child("y").normal(d_y, 1)[:, 0]
    return j, y, condition_joint(j, y)


def assert_moments(T, j, target, tol=1e-9):
    g = tm.pushforward_moments(T, j)
    np.testing.assert_allclose(g.mean, target.mean, atol=tol)
    np.testing.assert_allclose(g.cov, target.cov, atol=tol)


def test_canonical_member_is_symmetric_scaling_map():
    j, y, target = setup()
    T = tm.build_stochastic(j, y, tm.FamilySelector.canonical(3, 2))
    np.testing.assert_allclose(T.B, 0.0, atol=0)
    np.testing.assert_allclose(T.A, psd_sqrt(target.cov) @ psd_inv_sqrt(j.c_vv), atol=1e-12)
    assert_moments(T, j, target)


def test_kalman_selector_gives_identity_plus_gain():
    j, y, target = setup(1)
    T = tm.build_stochastic(j, y, tm.kalman_selector(j))
    np.testing.assert_allclose(T.A, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(T.B, -tm.gain(j), atol=1e-12)
    assert_moments(T, j, target)


def test_identity_selector_gives_adjustment_through_data_space():
    j, y, _ = setup(2)
    Gamma = np.diag([0.3, 0.6])
    T = tm.build_deterministic(j, Gamma, y, tm.identity_selector(j, Gamma))
    np.testing.assert_allclose(T.R, np.eye(3), atol=1e-10)
    jy = tm._with_noise(j, Gamma)
    assert_moments(T, j, condition_joint(jy, y))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 4), st.integers(1, 3))
def test_random_family_members_push_forward_to_posterior(seed, d_v, d_y):
    j, y, target = setup(seed, d_v, d_y)
    s = SeededStream(seed, ("sel",))
    T = tm.build_stochastic(j, y, tm.random_selector(j, tm.stochastic_residual_cov(j), s.child("s")))
    assert_moments(T, j, target, tol=1e-8)
    Gamma = 0.4 * np.eye(d_y)
    post = condition_joint(tm._with_noise(j, Gamma), y)
    D = tm.build_deterministic(j, Gamma, y, tm.random_selector(
        j, tm.deterministic_residual_cov(j), s.child("d"), target_cov=post.cov))
    assert_moments(D, j, post, tol=1e-8)


def test_free_matrix_outside_family_is_rejected():
    j, y, _ = setup(3)
    big = tm.FamilySelector(100 * np.ones((3, 2)), np.eye(3), np.ones(3))
    with pytest.raises(tm.NotInFamily):
        tm.build_stochastic(j, y, big)


def test_selector_validation():
    with pytest.raises(ValueError):
        tm.FamilySelector(np.zeros((2, 1)), np.array([[1.0, 1.0], [0.0, 1.0]]), np.ones(2))
    with pytest.raises(ValueError):
        tm.FamilySelector(np.zeros((2, 1)), np.eye(2), np.array([1.0, 0.5]))


def test_blue_matches_conditioning():
    j, y, target = setup(4)
    est, cov = tm.blue(j, y)
    np.testing.assert_allclose(est, target.mean, atol=1e-12)
    np.testing.assert_allclose(cov, target.cov, atol=1e-12)


def test_exact_cost_matches_monte_carlo():
    j, y, _ = setup(5)
    T = tm.build_stochastic(j, y, tm.kalman_selector(j))
    W = np.diag([1.0, 2.0, 0.5])
    V, Y = tm.sample_joint(j, 400_000, SeededStream(0))
    exact = tm.transport_cost(T, j, W)
    assert tm.transport_cost_mc(T, V, Y, W) == pytest.approx(exact, rel=0.02)


def test_optimal_pair_pushes_forward_and_beats_family_for_identity_weight():
    j, y, target = setup(6)
    A, B = tm.optimal_pair(j)
    T = tm.transport_from_pair(j, y, A, B)
    assert_moments(T, j, target)
    c_opt = tm.transport_cost(T, j, np.eye(3))
    for k in range(20):
        sel = tm.random_selector(j, tm.stochastic_residual_cov(j), SeededStream(k, ("m",)))
        assert c_opt <= tm.transport_cost(tm.build_stochastic(j, y, sel), j, np.eye(3)) + 1e-12


def test_weighted_pair_improves_on_unweighted_pair_for_general_weight():
    j, y, target = setup(7)
    W = np.array([[3.0, 1.2, 0.0], [1.2, 1.0, 0.3], [0.0, 0.3, 0.5]])
    Tu = tm.transport_from_pair(j, y, *tm.optimal_pair(j, W))
    Tw = tm.transport_from_pair(j, y, *tm.weighted_optimal_pair(j, W))
    assert_moments(Tw, j, target)
    assert tm.transport_cost(Tw, j, W) < tm.transport_cost(Tu, j, W) - 1e-6
    # with W = I the two coincide
    np.testing.assert_allclose(tm.weighted_optimal_pair(j, np.eye(3))[0], tm.optimal_pair(j)[0], atol=1e-12)


def test_check_suite_passes():
    results = tm.transport_check_suite(seed=0, n_members=10, mc_samples=20_000)
    assert all(isinstance(r.passed, bool) for r in results)
    assert all(r.passed for r in results), [(r.name, r.detail) for r in results if not r.passed]
