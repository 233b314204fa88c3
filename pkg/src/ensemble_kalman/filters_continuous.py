"""Continuous-time filters integrated with Euler-Maruyama: 3DVAR, Kalman-Bucy and ensemble Kalman-Bucy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .gaussian_core import (
    DEFAULT_SCALING,
    Ensemble,
    NonFinite,
    NonPSD,
    SeededStream,
    TooFewMembers,
    as_ensemble,
    cross_covariance,
    gaussian_noise,
    psd_sqrt,
    spd_solve,
    symmetrize,
)
from .models import BLOWUP


@dataclass
class ContinuousModel:
    """dv = f(v) dt + sqrt(Sigma) dW,  dz = h(v) dt + sqrt(Gamma) dB.

    f and h act column-wise on d x J arrays (and on 1D vectors). F and H may
    be given when the model is linear; they are used only by helpers.
    """

    drift: Callable
    diffusion_cov: np.ndarray
    h: Callable
    obs_noise_cov: np.ndarray
    F: Optional[np.ndarray] = None
    H: Optional[np.ndarray] = None

    def __post_init__(self):
        self.diffusion_cov = np.atleast_2d(np.asarray(self.diffusion_cov, dtype=float))
        self.obs_noise_cov = np.atleast_2d(np.asarray(self.obs_noise_cov, dtype=float))
        for name in ("diffusion_cov", "obs_noise_cov"):
            M = getattr(self, name)
            if np.linalg.eigvalsh(symmetrize(M)).min() < -1e-12 * max(1.0, np.abs(M).max()):
                raise NonPSD(f"{name} is not positive semidefinite")

    @property
    def dim(self) -> int:
        return self.diffusion_cov.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.obs_noise_cov.shape[0]

    @classmethod
    def linear(cls, F, H, Sigma, Gamma) -> "ContinuousModel":
        F, H = np.atleast_2d(np.asarray(F, float)), np.atleast_2d(np.asarray(H, float))
        return cls(lambda v: F @ v, Sigma, lambda v: H @ v, Gamma, F=F, H=H)


@dataclass
class SdePath:
    """Values on the uniform grid times[k] = k dt; states has leading axis of length n+1."""

    times: np.ndarray
    states: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def increments(self) -> np.ndarray:
        return np.diff(self.states, axis=0)


def time_grid(T: float, dt: float) -> np.ndarray:
    n = int(round(T / dt))
    if n <= 0 or abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"dt={dt} does not divide T={T}")
    return dt * np.arange(n + 1)


def _finite(x: np.ndarray, t: float):
    if not np.all(np.isfinite(x)) or np.abs(x).max(initial=0.0) > BLOWUP:
        raise NonFinite(f"state blew up at t={t:g}")


def _col(x) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(-1)


def synthesize_truth(cm: ContinuousModel, v0, T: float, dt: float, stream: SeededStream):
    """Euler-Maruyama for the signal and its integrated observation, z(0) = 0."""
    times = time_grid(T, dt)
    n = len(times) - 1
    v = _col(v0)
    sq_S, sq_G = psd_sqrt(cm.diffusion_cov), psd_sqrt(cm.obs_noise_cov)
    V = np.empty((n + 1, v.size))
    Z = np.zeros((n + 1, cm.obs_dim))
    V[0] = v
    rdt = np.sqrt(dt)
    for k in range(n):
        s = stream.child("truth", k)
        dW = sq_S @ s.child("signal").normal(v.size, 1)[:, 0]
        dB = sq_G @ s.child("obs").normal(cm.obs_dim, 1)[:, 0]
        Z[k + 1] = Z[k] + _col(cm.h(v)) * dt + rdt * dB
        v = v + _col(cm.drift(v)) * dt + rdt * dW
        _finite(v, times[k + 1])
        V[k + 1] = v
    return SdePath(times, V), SdePath(times, Z)


def interpolate_data(times_coarse: np.ndarray, z_coarse: np.ndarray, dt: float) -> SdePath:
    """Piecewise-linear interpolation of an observation path onto a finer uniform grid."""
    times_coarse = np.asarray(times_coarse, float)
    z_coarse = np.asarray(z_coarse, float).reshape(len(times_coarse), -1)
    times = times_coarse[0] + time_grid(times_coarse[-1] - times_coarse[0], dt)
    Z = np.column_stack([np.interp(times, times_coarse, z_coarse[:, i]) for i in range(z_coarse.shape[1])])
    return SdePath(times, Z)


def continuous_3dvar(cm: ContinuousModel, K: np.ndarray, v0, data: SdePath) -> SdePath:
    """Euler steps of dv = f(v) dt + K (dz - h(v) dt)."""
    dt = data.dt
    dz = data.increments()
    v = _col(v0)
    out = np.empty((len(data.times), v.size))
    out[0] = v
    for k in range(len(dz)):
        v = v + _col(cm.drift(v)) * dt + K @ (dz[k] - _col(cm.h(v)) * dt)
        _finite(v, data.times[k + 1])
        out[k + 1] = v
    return SdePath(data.times, out)


@dataclass
class GaussianPath:
    times: np.ndarray
    means: np.ndarray   # (n+1, d)
    covs: np.ndarray    # (n+1, d, d)


def kalman_bucy(F, H, Sigma, Gamma, m0, C0, data: SdePath) -> GaussianPath:
    """Euler integration of the Kalman-Bucy mean SDE and Riccati equation."""
    F, H = np.atleast_2d(F), np.atleast_2d(H)
    Sigma, Gamma = np.atleast_2d(Sigma), np.atleast_2d(Gamma)
    dt = data.dt
    dz = data.increments()
    m, C = _col(m0), np.atleast_2d(np.asarray(C0, float)).copy()
    n = len(dz)
    means = np.empty((n + 1, m.size))
    covs = np.empty((n + 1, m.size, m.size))
    means[0], covs[0] = m, C
    for k in range(n):
        G = spd_solve(Gamma, H @ C).T        # C H^T Gamma^{-1}
        m_new = m + F @ m * dt + G @ (dz[k] - H @ m * dt)
        C = symmetrize(C + (F @ C + C @ F.T + Sigma - G @ H @ C) * dt)
        m = m_new
        _finite(m, data.times[k + 1])
        means[k + 1], covs[k + 1] = m, C
    return GaussianPath(data.times, means, covs)


def rescaled_discrete(F, H, Sigma, Gamma, dt: float):
    """Discrete (M, H, Sigma, Gamma) whose Kalman filter approximates Kalman-Bucy at step dt.

    M = I + dt F, H_d = dt H, Sigma_d = dt Sigma, Gamma_d = dt Gamma; data y_n = z(t_n) - z(t_{n-1}).
    """
    F = np.atleast_2d(F)
    return (np.eye(F.shape[0]) + dt * F, dt * np.atleast_2d(H),
            dt * np.atleast_2d(Sigma), dt * np.atleast_2d(Gamma))


def _enkbf_gain(X: np.ndarray, HX: np.ndarray, Gamma: np.ndarray, scaling: str) -> np.ndarray:
    c_vh = cross_covariance(X, HX, scaling)
    return spd_solve(Gamma, c_vh.T).T     # C^{vh} Gamma^{-1}


def _enkbf_prepare(e, cm: ContinuousModel):
    e = as_ensemble(e)
    if e.size < 2:
        raise TooFewMembers(f"need at least 2 members, got {e.size}")
    X = e.members
    HX = np.asarray(cm.h(X), float).reshape(cm.obs_dim, e.size)
    return X, HX


def _signal_noise(cm: ContinuousModel, X: np.ndarray, dt: float, stream: SeededStream) -> np.ndarray:
    if not np.any(cm.diffusion_cov):
        return 0.0
    return np.sqrt(dt) * gaussian_noise(cm.diffusion_cov, X.shape[1], stream.child("signal"))


def enkbf_stochastic_step(cm: ContinuousModel, e, dz, dt: float, stream: SeededStream,
                          scaling: str = DEFAULT_SCALING) -> Ensemble:
    """dv_j = f dt + sqrt(Sigma) dW_j + C^{vh} Gamma^{-1} (dz - h_j dt - sqrt(Gamma) dB_j)."""
    X, HX = _enkbf_prepare(e, cm)
    Kc = _enkbf_gain(X, HX, cm.obs_noise_cov, scaling)
    dB = np.sqrt(dt) * gaussian_noise(cm.obs_noise_cov, X.shape[1], stream.child("obs"))
    innov = _col(dz)[:, None] - HX * dt - dB
    Xn = X + np.asarray(cm.drift(X), float) * dt + _signal_noise(cm, X, dt, stream) + Kc @ innov
    return Ensemble(Xn)


def enkbf_deterministic_step(cm: ContinuousModel, e, dz, dt: float, stream: SeededStream,
                             scaling: str = DEFAULT_SCALING) -> Ensemble:
    """dv_j = f dt + sqrt(Sigma) dW_j + C^{vh} Gamma^{-1} (dz - (h_j + mean h) dt / 2)."""
    X, HX = _enkbf_prepare(e, cm)
    Kc = _enkbf_gain(X, HX, cm.obs_noise_cov, scaling)
    innov = _col(dz)[:, None] - 0.5 * (HX + HX.mean(axis=1, keepdims=True)) * dt
    Xn = X + np.asarray(cm.drift(X), float) * dt + _signal_noise(cm, X, dt, stream) + Kc @ innov
    return Ensemble(Xn)


ENKBF_STEPS = {"stochastic": enkbf_stochastic_step, "deterministic": enkbf_deterministic_step}


def run_enkbf(cm: ContinuousModel, e0, data: SdePath, stream: SeededStream,
              variant: str = "stochastic", scaling: str = DEFAULT_SCALING,
              keep_members: bool = False):
    """Integrate an EnKBF over the data path; returns the GaussianPath of empirical moments
    and, when keep_members is set, the (n+1, d, J) member array."""
    step = ENKBF_STEPS[variant]
    e = as_ensemble(e0)
    dt = data.dt
    dz = data.increments()
    n, d = len(dz), e.dim
    means = np.empty((n + 1, d))
    covs = np.empty((n + 1, d, d))
    members = np.empty((n + 1, d, e.size)) if keep_members else None

    def record(k, e):
        means[k] = e.mean()
        D = e.deviations()
        covs[k] = D @ D.T / (e.size - 1 if scaling == DEFAULT_SCALING else e.size)
        if keep_members:
            members[k] = e.members

    record(0, e)
    for k in range(n):
        e = step(cm, e, dz[k], dt, stream.child("step", k), scaling)
        _finite(e.members, data.times[k + 1])
        record(k + 1, e)
    path = GaussianPath(data.times, means, covs)
    return (path, members) if keep_members else path
