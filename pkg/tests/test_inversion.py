import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ensemble_kalman import inversion as inv
from ensemble_kalman import models
from ensemble_kalman.gaussian_core import (
    Gaussian,
    SeededStream,
    TooFewMembers,
    empirical_moments,
    sample,
)


def conjugate_1d():
    return inv.InverseProblem.linear([[1.0]], [1.0], [[1.0]], Gaussian([0.0], [[1.0]]))


def linear_2d():
    L = np.array([[1.0, 0.5], [0.0, 1.0], [1.0, -1.0]])
    prior = Gaussian([0.2, -0.1], [[1.0, 0.3], [0.3, 0.8]])
    return inv.InverseProblem.linear(L, [1.0, 0.5, -0.2], 0.5 * np.eye(3), prior)


# ---------------------------------------------------------------- problem algebra

def test_misfit_hand_values():
    p = conjugate_1d()
    np.testing.assert_allclose(p.misfit(np.array([[1.0, 3.0, -1.0]])), [0.0, 2.0, 2.0])
    np.testing.assert_allclose(p.regularized_misfit(np.array([[1.0]])), [0.5])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-5, 5, allow_nan=False)))
def test_regularized_problem_misfit_identity(U):
    p = linear_2d()
    r = inv.regularize(p)
    np.testing.assert_allclose(r.misfit(U), p.regularized_misfit(U), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(r.as_problem().L, np.vstack([p.L, np.eye(2)]))


def test_problem_validation():
    with pytest.raises(ValueError):
        inv.InverseProblem.linear([[1.0]], [1.0], [[0.0]], Gaussian([0.0], [[1.0]]))


def test_linear_posterior_conjugate_hand_example():
    g = inv.linear_posterior(np.eye(1), conjugate_1d())
    assert g.mean[0] == pytest.approx(0.5, abs=1e-15)
    assert g.cov[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_linear_posterior_matches_grid_quadrature():
    p = linear_2d()
    post = inv.linear_posterior(p.L, p)
    axes = [np.linspace(m - 8 * np.sqrt(c), m + 8 * np.sqrt(c), 401)
            for m, c in zip(post.mean, np.diag(post.cov))]
    grid = inv.grid_posterior(p, 1.0, axes).moments()
    np.testing.assert_allclose(grid.mean, post.mean, atol=1e-8)
    np.testing.assert_allclose(grid.cov, post.cov, atol=1e-8)


def test_grid_at_time_zero_is_prior_and_underflow_is_reported():
    p = conjugate_1d()
    g = inv.grid_posterior(p, 0.0, [np.linspace(-10, 10, 2001)]).moments()
    assert g.mean[0] == pytest.approx(0.0, abs=1e-12)
    assert g.cov[0, 0] == pytest.approx(1.0, abs=1e-8)
    with pytest.raises(inv.GridUnderflow):
        inv.grid_posterior(p, 1.0, [np.linspace(60, 70, 11)])
    with pytest.raises(ValueError):
        inv.grid_posterior(p, 1.0, [np.zeros(3), np.zeros(3)])


# ---------------------------------------------------------------- Kalman inversion

def test_projected_inversion_is_exact_for_linear_map():
    p = linear_2d()
    g = p.prior
    for n in range(10):
        g = inv.gpf_inversion_step(p, g, 0.1, 50, SeededStream(0).child(n))
    post = inv.linear_posterior(p.L, p)
    np.testing.assert_allclose(g.mean, post.mean, atol=1e-10)
    np.testing.assert_allclose(g.cov, post.cov, atol=1e-10)


def test_transport_iteration_reaches_posterior_in_law():
    p = linear_2d()
    J = 20_000
    e = sample(p.prior, J, SeededStream(1))
    hist = inv.run_iterations(lambda e, s: inv.eki_transport_step(p, e, 0.1, s), e, 10, SeededStream(2))
    g = empirical_moments(hist.ensembles[-1])
    post = inv.linear_posterior(p.L, p)
    np.testing.assert_allclose(g.mean, post.mean, atol=6 / np.sqrt(J) * np.sqrt(np.trace(post.cov)))
    np.testing.assert_allclose(g.cov, post.cov, atol=10 / np.sqrt(J))


def test_eki_history_and_collapse_stop():
    p = conjugate_1d()
    e = sample(p.prior, 50, SeededStream(3))
    hist = inv.run_iterations(lambda e, s: inv.eki_step(p, e, s), e, 30, SeededStream(4), collapse_tol=0.2)
    assert hist.stopped_early and len(hist.ensembles) < 31
    assert hist.means().shape == (len(hist.ensembles), 1)
    assert hist.spreads()[-1] ** 2 < 0.2 * hist.spreads()[0] ** 2


def test_iteration_is_reproducible():
    p = linear_2d()
    e = sample(p.prior, 30, SeededStream(5))
    a = inv.run_iterations(lambda e, s: inv.eki_step(p, e, s), e, 5, SeededStream(6)).means()
    b = inv.run_iterations(lambda e, s: inv.eki_step(p, e, s), e, 5, SeededStream(6)).means()
    np.testing.assert_array_equal(a, b)


def test_iterinf_fixed_point_is_regularized_least_squares():
    L = np.array([[1.0, 0.2, 0.0], [0.0, 1.0, 0.5], [0.3, 0.0, 1.0], [1.0, 1.0, 1.0]])
    p = inv.InverseProblem.linear(L, [1.0, -0.5, 0.3, 0.8], 0.3 * np.eye(4), Gaussian(np.zeros(3), np.eye(3)))
    params = inv.IterInfParams(alpha=0.5, sigma_p=0.1, gamma_p=2.0)
    m, C, C_hat = inv.iterinf_moment_fixed_point(L, p, params)
    assert np.abs(inv.tikhonov_phillips_gradient(L, p, params, C_hat, m)).max() < 1e-8
    np.testing.assert_allclose(C_hat, 0.25 * C + 0.1 * np.eye(3), atol=1e-14)


def test_iterinf_params_validation():
    with pytest.raises(ValueError):
        inv.IterInfParams(alpha=0.0)
    with pytest.raises(ValueError):
        inv.IterInfParams(sigma_p=-1.0)


def test_iterinf_step_without_prediction_is_unit_eki_with_scaled_noise():
    p = linear_2d()
    e = sample(p.prior, 40, SeededStream(7))
    params = inv.IterInfParams(alpha=1.0, sigma_p=0.0, gamma_p=1.0)
    a = inv.eki_iterinf_step(p, params, e, SeededStream(8))
    b = inv.eki_step(p, e, SeededStream(8))
    np.testing.assert_allclose(a.members, b.members, atol=1e-12)


def test_bayesian_iteration_settles_near_posterior():
    p = linear_2d()
    J = 4000
    e = sample(p.prior, J, SeededStream(9))
    step = lambda e, s: inv.eki_bayes_iterinf_step(p, 0.2, e, s)
    hist = inv.run_iterations(step, e, 80, SeededStream(10))
    g = empirical_moments(hist.ensembles[-1])
    post = inv.linear_posterior(p.L, p)
    np.testing.assert_allclose(g.mean, post.mean, atol=10 / np.sqrt(J))
    np.testing.assert_allclose(g.cov, post.cov, atol=10 / np.sqrt(J))


def test_sampler_drift_is_linear_posterior_gradient():
    p = linear_2d()
    U = sample(p.prior, 25, SeededStream(11)).members
    C = empirical_moments(U).cov
    post = inv.linear_posterior(p.L, p)
    expected = -C @ np.linalg.solve(post.cov, U - post.mean[:, None])
    np.testing.assert_allclose(inv.eks_drift(p, U), expected, atol=1e-10)
    with pytest.raises(TooFewMembers):
        inv.eks_step(p, U[:, :2], 0.01, SeededStream(0))


# ---------------------------------------------------------------- rates

def test_rate_and_bias_closed_forms():
    L = np.array([[2.0, 0.3], [0.1, 1.5]])
    Gamma = np.diag([0.5, 0.2])
    prior = Gaussian([1.0, -1.0], 3.0 * np.eye(2))
    w = np.array([0.4, 0.9])
    rep = inv.analyze_linear_rates(L, Gamma, prior, w, np.array([0.5, 1.0, 5.0, 20.0]))
    assert rep.condition_min_eig >= 1.0
    assert rep.rate_holds
    assert rep.max_bias_residual < 1e-8
    m0 = prior.mean
    u0 = m0 + np.sqrt(3.0) * np.ones(2) / np.sqrt(2)
    for t, dev in zip(rep.times, rep.deviation_sq):
        assert dev == pytest.approx(inv.deviation_closed_form(L, Gamma, prior.cov, u0 - m0, t), rel=1e-8)


def test_rate_analysis_rejects_singular_forward():
    with pytest.raises(inv.SingularForward):
        inv.analyze_linear_rates(np.zeros((2, 2)), np.eye(2), Gaussian(np.zeros(2), np.eye(2)),
                                 np.zeros(2), np.array([1.0]))


# ---------------------------------------------------------------- time-averaged forward map

def test_time_average_matches_two_pass_statistics():
    p = models.L96Params()
    s = SeededStream(0)
    out = inv.time_averaged_forward_map(p, 10.0, 0.5, 0.01, s)
    v = np.sqrt(40.0) * s.child("initial").normal(9, 1)
    traj = []
    for _ in range(50):
        v = models.l96_rk4(models.with_forcing(p, np.array([10.0])), v, 0.01, 1e-3)
        traj.append(v[:, 0])
    traj = np.array(traj)
    assert out[0] == pytest.approx(traj.mean(axis=0).mean(), rel=1e-12)
    assert out[1] == pytest.approx(traj.var(axis=0).mean(), rel=1e-10)


def test_time_average_vector_forcing_and_call_numbering():
    p = models.L96Params()
    s = SeededStream(1)
    both = inv.time_averaged_forward_map(p, np.array([8.0, 10.0]), 0.2, 0.01, s)
    assert both.shape == (2, 2)
    G = inv.L96TimeAverageMap(p, 0.2, 0.01, SeededStream(2))
    a = G(np.array([[10.0]]))
    b = G(np.array([[10.0]]))
    assert G.calls == 2 and not np.allclose(a, b)
    G2 = inv.L96TimeAverageMap(p, 0.2, 0.01, SeededStream(2))
    np.testing.assert_array_equal(G2(np.array([[10.0]])), a)
    with pytest.raises(ValueError):
        inv.time_averaged_forward_map(p, 10.0, 0.015, 0.01, s)


def test_noise_covariance_estimate():
    rng = np.random.default_rng(0)
    G = lambda U: np.vstack([U[0] + rng.standard_normal(U.shape[1]), 2 * rng.standard_normal(U.shape[1])])
    C = inv.estimate_noise_cov(G, 1.0, 20_000)
    np.testing.assert_allclose(C, np.diag([1.0, 4.0]), atol=0.1)
