"""Discrete-time filters: 3DVAR, Kalman, Gaussian projected, stochastic EnKF and square-root filters."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .gaussian_core import (
    DEFAULT_SCALING,
    SCALING_J,
    DimensionMismatch,
    EnsembleKalmanError,
    Ensemble,
    Gaussian,
    JointGaussian,
    SeededStream,
    TooFewMembers,
    as_ensemble,
    condition_joint,
    gaussian_noise,
    gaussian_noise_batch,
    moment_matched_normals,
    normalized_deviations,
    psd_inv_sqrt,
    psd_sqrt,
    _scale,
    spd_solve,
    spd_solve_batch,
    symmetrize,
)
from .models import DynamicsModel, ObservationModel


class RankDeficientState(EnsembleKalmanError, ValueError):
    pass


def _apply_h(obs: ObservationModel, X: np.ndarray) -> np.ndarray:
    out = np.asarray(obs.h(X), dtype=float)
    if out.ndim == 1:
        out = out.reshape(obs.dim, -1)
    return out


def threedvar_step(dyn: DynamicsModel, obs: ObservationModel, K: np.ndarray,
                   v: np.ndarray, y_obs: np.ndarray) -> np.ndarray:
    """Fixed-gain update v <- Psi(v) + K (y - h(Psi(v)))."""
    vhat = dyn.flow(v)
    return vhat + K @ (y_obs - obs.h(vhat))


def noisy_threedvar_step(dyn: DynamicsModel, obs: ObservationModel, K: np.ndarray,
                         v: np.ndarray, y_obs: np.ndarray, stream: SeededStream = None,
                         xi: np.ndarray = None, eta: np.ndarray = None) -> np.ndarray:
    """3DVAR with simulated state and data noise: vhat = Psi(v) + xi, yhat = h(vhat) + eta.

    xi ~ N(0, Sigma) and eta ~ N(0, Gamma) are drawn from stream unless supplied.
    """
    if xi is None:
        xi = gaussian_noise(dyn.noise_cov, 1, stream.child("forecast"))[:, 0]
    if eta is None:
        eta = gaussian_noise(obs.noise_cov, 1, stream.child("data"))[:, 0]
    vhat = dyn.flow(v) + xi
    return vhat + K @ (y_obs - obs.h(vhat) - eta)


def kalman_predict(M: np.ndarray, Sigma: np.ndarray, prior: Gaussian) -> Gaussian:
    return Gaussian(M @ prior.mean, symmetrize(M @ prior.cov @ M.T + Sigma))


def kalman_step(M: np.ndarray, H: np.ndarray, Sigma: np.ndarray, Gamma: np.ndarray,
                prior: Gaussian, y_obs: np.ndarray) -> Gaussian:
    """One Kalman filter cycle: linear prediction then Gaussian conditioning on y_obs."""
    M, H = np.atleast_2d(M), np.atleast_2d(H)
    pred = kalman_predict(M, np.atleast_2d(Sigma), prior)
    HC = H @ pred.cov
    j = JointGaussian(pred.mean, H @ pred.mean, pred.cov, HC.T,
                      symmetrize(HC @ H.T + np.atleast_2d(Gamma)))
    return condition_joint(j, y_obs)


def gpf_step(dyn: DynamicsModel, obs: ObservationModel, prior: Gaussian, y_obs: np.ndarray,
             quad_size: int, stream: SeededStream, moment_match: bool = True) -> Gaussian:
    """Gaussian projected filter step with Monte Carlo moments.

    Samples of the prior are pushed through the noisy model and observation;
    the joint (state, data) Gaussian fitted to them is conditioned on y_obs.
    With moment_match the prior samples and both noise samples are whitened so
    their first two empirical moments are exact, which removes sampling error
    entirely when the model and observation are linear.
    """
    d, dy = prior.dim, obs.dim
    if moment_match:
        blocks = moment_matched_normals(2 * d + dy, quad_size, stream.child("quadrature"))
        z, xi, eta = blocks[:d], blocks[d:2 * d], blocks[2 * d:]
    else:
        z = stream.child("prior").normal(d, quad_size)
        xi = stream.child("forecast").normal(d, quad_size)
        eta = stream.child("data").normal(dy, quad_size)
    U = prior.mean[:, None] + psd_sqrt(prior.cov) @ z
    Vhat = dyn.flow(U) + psd_sqrt(dyn.noise_cov) @ xi
    Yhat = _apply_h(obs, Vhat) + psd_sqrt(obs.noise_cov) @ eta
    n = quad_size
    mv, my = Vhat.mean(axis=1), Yhat.mean(axis=1)
    Dv, Dy = Vhat - mv[:, None], Yhat - my[:, None]
    j = JointGaussian(mv, my, Dv @ Dv.T / n, Dv @ Dy.T / n, Dy @ Dy.T / n)
    return condition_joint(j, y_obs)


def forecast_ensemble(dyn: DynamicsModel, e: Ensemble, stream: SeededStream) -> np.ndarray:
    """vhat_j = Psi(v_j) + xi_j with xi_j ~ N(0, Sigma)."""
    e = as_ensemble(e)
    X = dyn.flow(e.members)
    if np.any(dyn.noise_cov):
        X = X + gaussian_noise(dyn.noise_cov, e.size, stream.child("forecast"))
    return X


@dataclass
class AnalysisMoments:
    """Normalized forecast deviations and related quantities shared by the analysis maps."""

    Vhat: np.ndarray       # state deviations / sqrt(J or J-1)
    Hhat: np.ndarray       # observation deviations / sqrt(J or J-1)
    mhat: np.ndarray
    hbar: np.ndarray
    Gamma: np.ndarray

    @property
    def c_vh(self):
        return self.Vhat @ self.Hhat.T

    @property
    def c_hh(self):
        return symmetrize(self.Hhat @ self.Hhat.T)

    @property
    def c_vv(self):
        return symmetrize(self.Vhat @ self.Vhat.T)

    def gain(self) -> np.ndarray:
        """K = C^{vh} (C^{hh} + Gamma)^{-1}."""
        return spd_solve(self.c_hh + self.Gamma, self.c_vh.T).T

    def target_cov(self) -> np.ndarray:
        """C - C^{vh} (C^{hh} + Gamma)^{-1} (C^{vh})^T."""
        return symmetrize(self.c_vv - self.gain() @ self.c_vh.T)


def analysis_moments(Xhat: np.ndarray, HX: np.ndarray, Gamma: np.ndarray,
                     scaling: str = DEFAULT_SCALING) -> AnalysisMoments:
    J = Xhat.shape[1]
    if J < 2:
        raise TooFewMembers(f"need at least 2 members, got {J}")
    mhat, hbar = Xhat.mean(axis=1), HX.mean(axis=1)
    r = np.sqrt(_scale(J, scaling))
    return AnalysisMoments((Xhat - mhat[:, None]) * r, (HX - hbar[:, None]) * r,
                           mhat, hbar, np.atleast_2d(Gamma))


def tilde_gain(c_vh: np.ndarray, c_hh: np.ndarray, Gamma: np.ndarray) -> np.ndarray:
    """K~ = C^{vh} [ (C^{hh}+Gamma) + Gamma^{1/2} (C^{hh}+Gamma)^{1/2} ]^{-1}."""
    D = symmetrize(c_hh + Gamma)
    Y = D + psd_sqrt(Gamma) @ psd_sqrt(D)
    return np.linalg.solve(Y.T, c_vh.T).T


def _check_members(e: Ensemble):
    if e.size < 2:
        raise TooFewMembers(f"need at least 2 members, got {e.size}")


INNOVATIONS = ("control", "stochastic", "deterministic")


def innovation(y_obs: np.ndarray, HX: np.ndarray, Gamma: np.ndarray, stream: SeededStream,
               variant: str = "stochastic") -> np.ndarray:
    """Per-member innovations, d_y x J.

    control: y - h_j; stochastic: y - h_j - eta_j with eta_j ~ N(0, Gamma);
    deterministic: y - (h_j + mean h) / 2.
    """
    y = np.asarray(y_obs, float)[:, None]
    if variant == "control":
        return y - HX
    if variant == "stochastic":
        return y - HX - gaussian_noise(Gamma, HX.shape[1], stream.child("data"))
    if variant == "deterministic":
        return y - 0.5 * (HX + HX.mean(axis=1, keepdims=True))
    raise ValueError(f"unknown innovation variant {variant!r}")


def enkf_analysis(Xhat: np.ndarray, obs: ObservationModel, y_obs: np.ndarray,
                  stream: SeededStream, scaling: str = DEFAULT_SCALING,
                  variant: str = "stochastic") -> np.ndarray:
    """Analysis v_j = vhat_j + K I_j, by default with perturbed observations."""
    HX = _apply_h(obs, Xhat)
    am = analysis_moments(Xhat, HX, obs.noise_cov, scaling)
    return Xhat + am.gain() @ innovation(y_obs, HX, am.Gamma, stream, variant)


def enkf_step(dyn: DynamicsModel, obs: ObservationModel, e: Ensemble, y_obs: np.ndarray,
              stream: SeededStream, scaling: str = DEFAULT_SCALING,
              variant: str = "stochastic") -> Ensemble:
    """Stochastic EnKF: forecast with model noise, analyse against simulated data."""
    e = as_ensemble(e)
    _check_members(e)
    Xhat = forecast_ensemble(dyn, e, stream)
    return Ensemble(enkf_analysis(Xhat, obs, y_obs, stream, scaling, variant))


def enkf_step_batch(dyn: DynamicsModel, obs: ObservationModel, X: np.ndarray, y_obs: np.ndarray,
                    streams, scaling: str = DEFAULT_SCALING,
                    variant: str = "stochastic") -> np.ndarray:
    """EnKF cycle for B independent ensembles advanced in lockstep.

    X is (d, B, J) so the model acts on a (d, B*J) view; y_obs is (B, d_y) and
    streams holds one stream per ensemble. Entry b draws exactly the noise
    enkf_step would draw from streams[b] and does not depend on the other
    entries. Against enkf_step it agrees to rounding (LU instead of Cholesky).
    """
    X = np.ascontiguousarray(X, dtype=float)
    d, B, J = X.shape
    if J < 2:
        raise TooFewMembers(f"need at least 2 members, got {J}")
    if len(streams) != B or np.shape(y_obs)[0] != B:
        raise DimensionMismatch("need one data vector and one stream per ensemble")
    Xh = np.array(dyn.flow(X.reshape(d, B * J)), dtype=float).reshape(d, B, J)
    if np.any(dyn.noise_cov):
        Xh += gaussian_noise_batch(dyn.noise_cov, J, [s.child("forecast") for s in streams])
    HX = _apply_h(obs, Xh.reshape(d, B * J)).reshape(obs.dim, B, J)
    r = np.sqrt(_scale(J, scaling))
    Hd = ((HX - HX.mean(axis=2, keepdims=True)) * r).transpose(1, 0, 2)
    # the observation deviations sum to zero, so the state need not be centred
    c_vh = (Xh.transpose(1, 0, 2) @ Hd.transpose(0, 2, 1)) * r
    c_hh = Hd @ Hd.transpose(0, 2, 1)
    K = spd_solve_batch(c_hh + obs.noise_cov, c_vh.transpose(0, 2, 1)).transpose(0, 2, 1)
    y = np.asarray(y_obs, dtype=float)
    if variant == "stochastic":
        innov = gaussian_noise_batch(obs.noise_cov, J, [s.child("data") for s in streams])
        np.subtract(y.T[:, :, None] - HX, innov, out=innov)
        innov = innov.transpose(1, 0, 2)
    elif variant in INNOVATIONS:
        innov = np.stack([innovation(y[b], HX[:, b], obs.noise_cov, streams[b], variant)
                          for b in range(B)])
    else:
        raise ValueError(f"unknown innovation variant {variant!r}")
    Xh += (K @ innov).transpose(1, 0, 2)
    return Xh


def eakf_state_analysis(Xhat: np.ndarray, obs: ObservationModel, y_obs: np.ndarray,
                        scaling: str = DEFAULT_SCALING, strict: bool = False) -> np.ndarray:
    HX = _apply_h(obs, Xhat)
    am = analysis_moments(Xhat, HX, obs.noise_cov, scaling)
    m = am.mhat + am.gain() @ (np.asarray(y_obs, float) - am.hbar)
    Chat = am.c_vv
    if strict and np.linalg.matrix_rank(Chat) < Chat.shape[0]:
        raise RankDeficientState("forecast covariance is rank deficient")
    # target covariance, equal to Vhat (I + Hhat^T Gamma^{-1} Hhat)^{-1} Vhat^T without a J x J solve
    T = psd_sqrt(am.target_cov()) @ psd_inv_sqrt(Chat)
    return m[:, None] + T @ (Xhat - am.mhat[:, None])


def eakf_state_step(dyn: DynamicsModel, obs: ObservationModel, e: Ensemble, y_obs: np.ndarray,
                    stream: SeededStream, scaling: str = DEFAULT_SCALING,
                    strict: bool = False) -> Ensemble:
    """Adjustment filter acting on state space: deviations mapped by C^{1/2} Chat^{-1/2}.

    Chat^{-1/2} acts on the range of the forecast deviations only, so J <= d is allowed
    unless strict is set.
    """
    e = as_ensemble(e)
    _check_members(e)
    Xhat = forecast_ensemble(dyn, e, stream)
    return Ensemble(eakf_state_analysis(Xhat, obs, y_obs, scaling, strict))


def eakf_obs_analysis(Xhat: np.ndarray, obs: ObservationModel, y_obs: np.ndarray,
                      scaling: str = DEFAULT_SCALING) -> np.ndarray:
    HX = _apply_h(obs, Xhat)
    am = analysis_moments(Xhat, HX, obs.noise_cov, scaling)
    m = am.mhat + am.gain() @ (np.asarray(y_obs, float) - am.hbar)
    Kt = tilde_gain(am.c_vh, am.c_hh, am.Gamma)
    return m[:, None] + (Xhat - am.mhat[:, None]) - Kt @ (HX - am.hbar[:, None])


def eakf_obs_step(dyn: DynamicsModel, obs: ObservationModel, e: Ensemble, y_obs: np.ndarray,
                  stream: SeededStream, scaling: str = DEFAULT_SCALING) -> Ensemble:
    """Adjustment filter acting through data space: v_j = m + (vhat_j - mhat) - K~ (h_j - hbar)."""
    e = as_ensemble(e)
    _check_members(e)
    Xhat = forecast_ensemble(dyn, e, stream)
    return Ensemble(eakf_obs_analysis(Xhat, obs, y_obs, scaling))


def etkf_weights(Xhat: np.ndarray, HX: np.ndarray, Gamma: np.ndarray, y_obs: np.ndarray,
                 scaling: str = DEFAULT_SCALING) -> Tuple[np.ndarray, np.ndarray]:
    """Transform Z = (I + Hhat^T Gamma^{-1} Hhat)^{-1/2} and the J x J weights S with Xhat S = analysis."""
    am = analysis_moments(Xhat, HX, Gamma, scaling)
    J = Xhat.shape[1]
    GinvH = np.linalg.solve(am.Gamma, am.Hhat)
    A = symmetrize(np.eye(J) + am.Hhat.T @ GinvH)
    Z = psd_inv_sqrt(A)
    # mean increment K (y - hbar) = Vhat Z^2 Hhat^T Gamma^{-1} (y - hbar), written as Xhat-weights
    c = J if scaling == SCALING_J else J - 1
    w = (Z @ Z) @ (GinvH.T @ (np.asarray(y_obs, float) - am.hbar)) / np.sqrt(c)
    ones = np.ones((J, 1))
    P = np.eye(J) - ones @ ones.T / J
    S = ones @ ones.T / J + P @ (w[:, None] @ ones.T + Z)
    return Z, S


def _etkf_factors(am: AnalysisMoments):
    """Thin SVD of Gamma^{-1/2} Hhat = U s V^T, so I + Hhat^T Gamma^{-1} Hhat = I + V s^2 V^T."""
    L = np.linalg.cholesky(am.Gamma)
    _, s, Vt = np.linalg.svd(np.linalg.solve(L, am.Hhat), full_matrices=False)
    return s, Vt


def etkf_analysis(Xhat: np.ndarray, obs: ObservationModel, y_obs: np.ndarray,
                  scaling: str = DEFAULT_SCALING) -> np.ndarray:
    """Same ensemble as Xhat @ S from etkf_weights, applied in O(d_y^2 J) without J x J matrices.

    Z = I + V ((1 + s^2)^{-1/2} - 1) V^T and Z^2 = I + V ((1 + s^2)^{-1} - 1) V^T.
    """
    HX = _apply_h(obs, Xhat)
    am = analysis_moments(Xhat, HX, obs.noise_cov, scaling)
    s, Vt = _etkf_factors(am)
    J = Xhat.shape[1]
    c = J if scaling == SCALING_J else J - 1
    g = am.Hhat.T @ np.linalg.solve(am.Gamma, np.asarray(y_obs, float) - am.hbar)
    w = (g + Vt.T @ ((1.0 / (1.0 + s * s) - 1.0) * (Vt @ g))) / np.sqrt(c)
    D = Xhat - am.mhat[:, None]
    DZ = D + ((D @ Vt.T) * (1.0 / np.sqrt(1.0 + s * s) - 1.0)) @ Vt
    return (am.mhat + D @ w)[:, None] + DZ


def etkf_step(dyn: DynamicsModel, obs: ObservationModel, e: Ensemble, y_obs: np.ndarray,
              stream: SeededStream, scaling: str = DEFAULT_SCALING) -> Ensemble:
    """Transform filter: analysis deviations are forecast deviations times Z."""
    e = as_ensemble(e)
    _check_members(e)
    Xhat = forecast_ensemble(dyn, e, stream)
    return Ensemble(etkf_analysis(Xhat, obs, y_obs, scaling))


ANALYSES = {
    "enkf": enkf_analysis,
    "eakf_state": lambda X, obs, y, stream, scaling=DEFAULT_SCALING: eakf_state_analysis(X, obs, y, scaling),
    "eakf_obs": lambda X, obs, y, stream, scaling=DEFAULT_SCALING: eakf_obs_analysis(X, obs, y, scaling),
    "etkf": lambda X, obs, y, stream, scaling=DEFAULT_SCALING: etkf_analysis(X, obs, y, scaling),
}


def ensemble_step(name: str, dyn: DynamicsModel, obs: ObservationModel, e: Ensemble,
                  y_obs: np.ndarray, stream: SeededStream,
                  scaling: str = DEFAULT_SCALING) -> Ensemble:
    """Forecast then the named analysis ('enkf', 'eakf_state', 'eakf_obs', 'etkf')."""
    if name not in ANALYSES:
        raise KeyError(f"unknown ensemble filter {name!r}")
    e = as_ensemble(e)
    _check_members(e)
    Xhat = forecast_ensemble(dyn, e, stream)
    return Ensemble(ANALYSES[name](Xhat, obs, y_obs, stream, scaling))
