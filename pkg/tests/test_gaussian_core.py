import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ensemble_kalman.gaussian_core import (
    SCALING_J,
    SCALING_J1,
    DimensionMismatch,
    Ensemble,
    Gaussian,
    JointGaussian,
    MemberCountMismatch,
    NonFinite,
    NonPSD,
    NonSymmetric,
    SeededStream,
    SingularDataCovariance,
    TooFewMembers,
    condition_joint,
    cross_covariance,
    empirical_moments,
    gaussian_noise,
    gaussian_noise_batch,
    moment_matched_normals,
    normalized_deviations,
    psd_inv_sqrt,
    psd_sqrt,
    sample,
    spd_solve,
    spd_solve_batch,
)


def random_spd(rng, d, floor=0.1):
    A = rng.standard_normal((d, d))
    return A @ A.T + floor * np.eye(d)


square_factors = st.integers(1, 5).flatmap(
    lambda d: arrays(np.float64, (d, d), elements=st.floats(-3, 3, allow_nan=False)))


# ---------------------------------------------------------------- types

def test_gaussian_rejects_bad_covariances():
    with pytest.raises(NonSymmetric):
        Gaussian([0, 0], [[1, 0.5], [0, 1]])
    with pytest.raises(NonPSD):
        Gaussian([0, 0], [[1, 0], [0, -1]])
    with pytest.raises(DimensionMismatch):
        Gaussian([0, 0, 0], np.eye(2))
    with pytest.raises(NonFinite):
        Gaussian([np.nan], [[1.0]])


def test_joint_gaussian_round_trip():
    rng = np.random.default_rng(0)
    C = random_spd(rng, 5)
    g = Gaussian(rng.standard_normal(5), C)
    j = JointGaussian.from_gaussian(g, 3)
    assert (j.d_v, j.d_y) == (3, 2)
    np.testing.assert_array_equal(j.as_gaussian().cov, g.cov)
    np.testing.assert_array_equal(j.as_gaussian().mean, g.mean)


def test_joint_gaussian_rejects_indefinite_block():
    with pytest.raises(NonPSD):
        JointGaussian([0.0], [0.0], [[1.0]], [[2.0]], [[1.0]])


def test_ensemble_shape_checks():
    e = Ensemble(np.arange(6.0).reshape(2, 3))
    assert (e.dim, e.size) == (2, 3)
    np.testing.assert_allclose(e.mean(), [1.0, 4.0])
    with pytest.raises(NonFinite):
        Ensemble([[np.inf, 1.0]])
    with pytest.raises(DimensionMismatch):
        Ensemble(np.zeros((2, 2, 2)))


# ---------------------------------------------------------------- empirical moments

@pytest.mark.parametrize("scaling,ddof", [(SCALING_J1, 1), (SCALING_J, 0)])
def test_empirical_moments_match_numpy(scaling, ddof):
    X = np.random.default_rng(1).standard_normal((4, 17))
    g = empirical_moments(X, scaling)
    np.testing.assert_allclose(g.mean, X.mean(axis=1), atol=1e-15)
    np.testing.assert_allclose(g.cov, np.cov(X, ddof=ddof), atol=1e-14)


def test_cross_covariance_matches_numpy_block():
    rng = np.random.default_rng(2)
    X, Y = rng.standard_normal((3, 40)), rng.standard_normal((2, 40))
    full = np.cov(np.vstack([X, Y]))
    np.testing.assert_allclose(cross_covariance(X, Y), full[:3, 3:], atol=1e-14)
    with pytest.raises(MemberCountMismatch):
        cross_covariance(X, Y[:, :-1])


def test_too_few_members_and_unknown_scaling():
    with pytest.raises(TooFewMembers):
        normalized_deviations(np.ones((3, 1)))
    with pytest.raises(ValueError):
        normalized_deviations(np.ones((3, 4)), "1/sqrt(J)")


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-10, 10, allow_nan=False)),
       arrays(np.float64, (3,), elements=st.floats(-10, 10, allow_nan=False)))
def test_deviations_are_translation_invariant(X, shift):
    np.testing.assert_allclose(normalized_deviations(X + shift[:, None]), normalized_deviations(X),
                               atol=1e-9)


# ---------------------------------------------------------------- square roots and solves

@settings(max_examples=60, deadline=None)
@given(square_factors)
def test_psd_sqrt_squares_back(A):
    M = A @ A.T
    S = psd_sqrt(M)
    np.testing.assert_allclose(S, S.T, atol=1e-12)
    np.testing.assert_allclose(S @ S, M, atol=1e-8 * max(1.0, np.abs(M).max()))
    assert np.linalg.eigvalsh(S).min() > -1e-8 * max(1.0, np.abs(S).max())


def test_psd_sqrt_matches_scipy_sqrtm():
    M = random_spd(np.random.default_rng(3), 6)
    np.testing.assert_allclose(psd_sqrt(M), np.real(sla.sqrtm(M)), atol=1e-12)
    np.testing.assert_allclose(psd_inv_sqrt(M), np.linalg.inv(np.real(sla.sqrtm(M))), atol=1e-11)


def test_diagonal_path_agrees_with_eigen_path():
    D = np.diag([4.0, 0.0, 2.25])
    np.testing.assert_allclose(psd_sqrt(D), np.diag([2.0, 0.0, 1.5]), atol=0)
    S, info = psd_sqrt(D, return_info=True)       # forces the eigen path
    np.testing.assert_allclose(S, np.diag([2.0, 0.0, 1.5]), atol=1e-15)
    assert info.clipped == 1


def test_psd_inv_sqrt_is_pseudo_inverse_on_range():
    P = np.diag([4.0, 1.0, 0.0])
    np.testing.assert_allclose(psd_inv_sqrt(P), np.diag([0.5, 1.0, 0.0]), atol=1e-15)


def test_psd_sqrt_rejects_asymmetric():
    with pytest.raises(NonSymmetric):
        psd_sqrt(np.array([[1.0, 1.0], [0.0, 1.0]]))


def test_spd_solve_and_conditioning():
    rng = np.random.default_rng(4)
    A = random_spd(rng, 5)
    B = rng.standard_normal((5, 3))
    np.testing.assert_allclose(A @ spd_solve(A, B), B, atol=1e-12)
    with pytest.raises(SingularDataCovariance):
        spd_solve(np.diag([1.0, 1e-16]), np.ones(2))
    with pytest.raises(SingularDataCovariance):
        spd_solve(np.diag([1.0, -1.0]), np.ones(2))


def test_spd_solve_batch_matches_loop():
    rng = np.random.default_rng(5)
    A = np.stack([random_spd(rng, 4) for _ in range(6)])
    B = rng.standard_normal((6, 4, 2))
    X = spd_solve_batch(A, B)
    for k in range(6):
        np.testing.assert_allclose(X[k], spd_solve(A[k], B[k]), atol=1e-12)
    A[3] = np.diag([1.0, 1.0, 1.0, 0.0])
    with pytest.raises(SingularDataCovariance, match="entry 3"):
        spd_solve_batch(A, B)


# ---------------------------------------------------------------- conditioning

def test_condition_joint_matches_precision_form():
    # independent oracle: the conditional law read off the joint precision matrix
    rng = np.random.default_rng(6)
    C = random_spd(rng, 5)
    m = rng.standard_normal(5)
    y = rng.standard_normal(2)
    j = JointGaussian.from_gaussian(Gaussian(m, C), 3)
    P = np.linalg.inv(C)
    cov = np.linalg.inv(P[:3, :3])
    mean = m[:3] - cov @ P[:3, 3:] @ (y - m[3:])
    g = condition_joint(j, y)
    np.testing.assert_allclose(g.cov, cov, atol=1e-12)
    np.testing.assert_allclose(g.mean, mean, atol=1e-12)


def test_condition_joint_scalar_hand_example():
    # v ~ N(0, 1), y = v + N(0, 1): posterior N(y/2, 1/2)
    j = JointGaussian([0.0], [0.0], [[1.0]], [[1.0]], [[2.0]])
    g = condition_joint(j, [3.0])
    assert g.mean[0] == pytest.approx(1.5, abs=1e-15)
    assert g.cov[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_condition_joint_pinv_handles_singular_data_block():
    # duplicated observation: c_yy is singular; the pseudo-inverse gives the single-observation answer
    j = JointGaussian([0.0], [0.0, 0.0], [[1.0]], [[1.0, 1.0]], np.full((2, 2), 1.0) + np.eye(2) * 0)
    with pytest.raises(SingularDataCovariance):
        condition_joint(j, [1.0, 1.0])
    g = condition_joint(j, [1.0, 1.0], pinv=True)
    assert g.mean[0] == pytest.approx(1.0, abs=1e-12)
    assert g.cov[0, 0] == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------- streams and sampling

def test_stream_is_deterministic_and_keyed():
    a = SeededStream(7, ("filter", 3)).normal(4, 5)
    b = SeededStream(7, ("filter", 3)).normal(4, 5)
    c = SeededStream(7, ("filter", 4)).normal(4, 5)
    d = SeededStream(8, ("filter", 3)).normal(4, 5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c) and not np.allclose(a, d)


def test_stream_string_and_integer_tags_do_not_collide():
    assert not np.allclose(SeededStream(0, (1,)).normal(3, 1), SeededStream(0, ("1",)).normal(3, 1))
    with pytest.raises(ValueError):
        SeededStream(0, (-1,)).spawn_key()


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 30), st.integers(1, 30))
def test_stream_columns_are_prefix_stable(d, n1, n2):
    s = SeededStream(11, ("x",))
    a, b = s.normal(d, n1), s.normal(d, n2)
    k = min(n1, n2)
    np.testing.assert_array_equal(a[:, :k], b[:, :k])


def test_sample_and_noise_have_target_moments():
    rng = np.random.default_rng(8)
    C = random_spd(rng, 3)
    g = Gaussian([1.0, -2.0, 0.5], C)
    e = sample(g, 200_000, SeededStream(1))
    np.testing.assert_allclose(e.mean(), g.mean, atol=0.02)
    np.testing.assert_allclose(empirical_moments(e).cov, C, atol=0.05 * np.abs(C).max())
    N = gaussian_noise(np.diag([0.1, 2.0]), 200_000, SeededStream(2))
    np.testing.assert_allclose(np.cov(N), np.diag([0.1, 2.0]), atol=0.02)


def test_diagonal_noise_matches_dense_route():
    s = SeededStream(3, ("n",))
    D = np.diag([0.3, 1.7, 0.0])
    np.testing.assert_allclose(gaussian_noise(D, 50, s), psd_sqrt(D + 0.0) @ s.normal(3, 50), atol=1e-15)


def test_batched_noise_slices_equal_single_draws():
    streams = [SeededStream(k, ("b",)) for k in range(3)]
    for cov in (np.diag([0.3, 1.7]), np.array([[1.0, 0.4], [0.4, 0.5]])):
        Z = gaussian_noise_batch(cov, 20, streams)
        assert Z.shape == (2, 3, 20)
        for b, s in enumerate(streams):
            np.testing.assert_allclose(Z[:, b], gaussian_noise(cov, 20, s), atol=1e-15)


def test_moment_matched_normals_are_exact():
    Z = moment_matched_normals(4, 50, SeededStream(4))
    np.testing.assert_allclose(Z.mean(axis=1), 0.0, atol=1e-14)
    np.testing.assert_allclose(Z @ Z.T / 50, np.eye(4), atol=1e-13)
    with pytest.raises(TooFewMembers):
        moment_matched_normals(4, 4, SeededStream(4))
