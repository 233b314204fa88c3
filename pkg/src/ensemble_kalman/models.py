"""Lorenz '96 models, linear-Gaussian systems, RK4 flow maps and observation operators."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Tuple

import numba
import numpy as np

from .gaussian_core import DimensionMismatch, NonFinite, SeededStream

BLOWUP = 1e6

# Cubic closure m(x) = c3 x^3 + c2 x^2 + c1 x + c0 produced by fit_default_closure
# at the default multiscale parameters (grid [-10, 15] step 1, T_avg = 5, seed 0).
# tests/test_models.py refits and checks these values.
DEFAULT_CLOSURE_COEFFS = (
    -0.00060917121695938,
    0.002558785935618814,
    0.27726410865401346,
    0.2285039706940085,
)


@dataclass(frozen=True)
class CubicClosure:
    """Polynomial closure, coefficients highest degree first (numpy.polyval order)."""

    coeffs: Tuple[float, ...]

    def __call__(self, x):
        return np.polyval(self.coeffs, x)


def default_closure() -> CubicClosure:
    return CubicClosure(DEFAULT_CLOSURE_COEFFS)


@dataclass(frozen=True)
class L96Params:
    L: int = 9
    F: float = 10.0
    h_v: float = -0.8
    closure: Optional[Callable] = field(default_factory=default_closure)

    def __post_init__(self):
        if self.L < 4:
            raise ValueError("Lorenz '96 needs L >= 4")


@dataclass(frozen=True)
class L96MultiscaleParams:
    L: int = 9
    J: int = 8
    eps: float = 2.0 ** -7
    h_v: float = -0.8
    h_w: float = 1.0
    F: float = 10.0

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.J < 4 or self.L < 4:
            raise ValueError("need L >= 4 and J >= 4")


@dataclass
class DynamicsModel:
    """Flow map over one observation interval plus additive Gaussian noise covariance."""

    flow: Callable[[np.ndarray], np.ndarray]
    noise_cov: np.ndarray
    linear: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.noise_cov.shape[0]


@dataclass
class ObservationModel:
    h: Callable[[np.ndarray], np.ndarray]
    noise_cov: np.ndarray
    H: Optional[np.ndarray] = None

    def __post_init__(self):
        self.noise_cov = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        if np.linalg.eigvalsh(self.noise_cov)[0] <= 0:
            raise ValueError("observation noise covariance must be positive definite")

    @property
    def dim(self) -> int:
        return self.noise_cov.shape[0]


def _l96_core(v: np.ndarray, F) -> np.ndarray:
    # axis 0 is the cyclic index; trailing axes (ensemble members) broadcast
    return (np.roll(v, -1, axis=0) - np.roll(v, 2, axis=0)) * np.roll(v, 1, axis=0) - v + F


def l96_vector_field(p: L96Params, v: np.ndarray) -> np.ndarray:
    """Singlescale Lorenz '96 tendency; v has shape (L,) or (L, J)."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != p.L:
        raise DimensionMismatch(f"state has {v.shape[0]} components, expected {p.L}")
    out = _l96_core(v, p.F)
    if p.h_v != 0.0 and p.closure is not None:
        out = out + p.h_v * p.closure(v)
    return out


def l96ms_vector_field(p: L96MultiscaleParams, v: np.ndarray, w: np.ndarray):
    """Two-scale Lorenz '96 tendencies; v is (L,), w is (L, J), trailing batch axes allowed.

    The fast variables form a single cyclic chain of length L*J, which encodes
    w_{l, j+J} = w_{l+1, j}.
    """
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if v.shape[0] != p.L or w.shape[:2] != (p.L, p.J):
        raise DimensionMismatch(f"expected v ({p.L},) and w ({p.L}, {p.J})")
    batch = w.shape[2:]
    chain = w.reshape((p.L * p.J,) + batch)
    rv = (-np.roll(chain, -1, axis=0) * (np.roll(chain, -2, axis=0) - np.roll(chain, 1, axis=0))
          - chain).reshape(w.shape)
    dw = (rv + p.h_w * v[:, None]) / p.eps
    dv = _l96_core(v, p.F) + p.h_v * w.mean(axis=1)
    return dv, dw


def _check_finite(v: np.ndarray):
    if not np.all(np.isfinite(v)) or np.abs(v).max(initial=0.0) > BLOWUP:
        raise NonFinite(f"state left the finite range (|v|_inf > {BLOWUP:g})")


def n_substeps(tau: float, dt_inner: float) -> int:
    n = int(round(tau / dt_inner))
    if n < 1 or abs(n * dt_inner - tau) > 1e-9 * max(tau, 1.0):
        raise ValueError(f"dt_inner={dt_inner} does not divide tau={tau}")
    return n


def rk4_flow(field: Callable, v0: np.ndarray, tau: float, dt_inner: float) -> np.ndarray:
    """Classical fourth-order Runge-Kutta over [0, tau] with fixed step dt_inner."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    n = n_substeps(tau, dt_inner)
    h = tau / n
    v = np.array(v0, dtype=float)
    for _ in range(n):
        k1 = field(v)
        k2 = field(v + 0.5 * h * k1)
        k3 = field(v + 0.5 * h * k2)
        k4 = field(v + h * k3)
        v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    _check_finite(v)
    return v


@numba.njit(cache=True)
def _l96_field_into(v, F, h_v, coeffs, out):
    L, J = v.shape
    nc = coeffs.shape[0]
    for l in range(L):
        lp1 = (l + 1) % L
        lm1 = (l - 1) % L
        lm2 = (l - 2) % L
        for j in range(J):
            x = v[l, j]
            m = 0.0
            for c in range(nc):
                m = m * x + coeffs[c]
            out[l, j] = (v[lp1, j] - v[lm2, j]) * v[lm1, j] - x + F[j] + h_v * m


@numba.njit(cache=True)
def _l96_rk4_kernel(v0, F, h_v, coeffs, h, n):
    v = v0.copy()
    L, J = v.shape
    k1 = np.empty_like(v)
    k2 = np.empty_like(v)
    k3 = np.empty_like(v)
    k4 = np.empty_like(v)
    tmp = np.empty_like(v)
    for _ in range(n):
        _l96_field_into(v, F, h_v, coeffs, k1)
        for l in range(L):
            for j in range(J):
                tmp[l, j] = v[l, j] + 0.5 * h * k1[l, j]
        _l96_field_into(tmp, F, h_v, coeffs, k2)
        for l in range(L):
            for j in range(J):
                tmp[l, j] = v[l, j] + 0.5 * h * k2[l, j]
        _l96_field_into(tmp, F, h_v, coeffs, k3)
        for l in range(L):
            for j in range(J):
                tmp[l, j] = v[l, j] + h * k3[l, j]
        _l96_field_into(tmp, F, h_v, coeffs, k4)
        for l in range(L):
            for j in range(J):
                v[l, j] = v[l, j] + (h / 6.0) * (
                    k1[l, j] + 2.0 * k2[l, j] + 2.0 * k3[l, j] + k4[l, j])
    return v


def l96_rk4(p: L96Params, v0: np.ndarray, tau: float, dt_inner: float) -> np.ndarray:
    """RK4 flow of the singlescale model; compiled path for polynomial closures.

    p.F may be a scalar or one forcing value per ensemble member.
    """
    if not isinstance(p.closure, CubicClosure) and p.closure is not None and p.h_v != 0.0:
        return rk4_flow(lambda x: l96_vector_field(p, x), v0, tau, dt_inner)
    n = n_substeps(tau, dt_inner)
    v = np.asarray(v0, dtype=float)
    if v.shape[0] != p.L:
        raise DimensionMismatch(f"state has {v.shape[0]} components, expected {p.L}")
    flat = v.reshape(p.L, -1)
    F = np.broadcast_to(np.asarray(p.F, dtype=float), (flat.shape[1],)).copy()
    coeffs = np.zeros(1) if p.closure is None else np.asarray(p.closure.coeffs, dtype=float)
    out = _l96_rk4_kernel(np.ascontiguousarray(flat), F, float(p.h_v), coeffs, tau / n, n)
    _check_finite(out)
    return out.reshape(v.shape)


def l96_flow(p: L96Params, tau: float, dt_inner: Optional[float] = None) -> Callable:
    dt = min(tau, 1e-3) if dt_inner is None else dt_inner
    return lambda v: l96_rk4(p, v, tau, dt)


def l96ms_flow(p: L96MultiscaleParams, tau: float, dt_inner: Optional[float] = None) -> Callable:
    """Flow of the stacked state (v, w.ravel()) of length L + L*J (batch axes allowed).

    The default inner step is the largest divisor of tau not above eps/20.
    """
    dt = tau / int(np.ceil(tau / (p.eps / 20) - 1e-9)) if dt_inner is None else dt_inner
    L, J = p.L, p.J

    def field_(x):
        v, w = x[:L], x[L:].reshape((L, J) + x.shape[1:])
        dv, dw = l96ms_vector_field(p, v, w)
        return np.concatenate([dv, dw.reshape((L * J,) + x.shape[1:])], axis=0)

    return lambda x: rk4_flow(field_, x, tau, dt)


def l96_dynamics(p: L96Params, tau: float, sigma2: float,
                 dt_inner: Optional[float] = None) -> DynamicsModel:
    return DynamicsModel(l96_flow(p, tau, dt_inner), sigma2 * np.eye(p.L))


def linear_dynamics(M: np.ndarray, Sigma: np.ndarray) -> DynamicsModel:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return DynamicsModel(lambda v: M @ v, np.atleast_2d(np.asarray(Sigma, float)), linear=M)


def linear_observation(H: np.ndarray, Gamma: np.ndarray) -> ObservationModel:
    H = np.atleast_2d(np.asarray(H, dtype=float))
    return ObservationModel(lambda v: H @ v, Gamma, H=H)


def l96_observation() -> Tuple[np.ndarray, np.ndarray]:
    """Observation matrix H (components 1,2,4,5,7,8 of 9) and the 3DVAR gain K with HK = I."""
    observed = [0, 1, 3, 4, 6, 7]
    H = np.zeros((6, 9))
    H[np.arange(6), observed] = 1.0
    return H, H.T.copy()


def fast_subsystem_average(p: L96MultiscaleParams, v_grid: np.ndarray, T_avg: float,
                           seed: int = 0, spinup: float = 0.5,
                           dt_inner: Optional[float] = None) -> np.ndarray:
    """Time average of the block mean of w with the slow state frozen at each grid value.

    With v frozen every block sees the same forcing h_w x, so the L*J chain is run
    with all slow components equal to x.  The spin-up interval is discarded.
    """
    v_grid = np.asarray(v_grid, dtype=float)
    G = v_grid.size
    L, J = p.L, p.J
    dt = p.eps / 20 if dt_inner is None else dt_inner
    rng = SeededStream(seed).child("closure", "fast-init").rng()
    w = rng.standard_normal((L * J, G))
    forcing = p.h_w * np.broadcast_to(v_grid, (L * J, G))

    def field_(x):
        return (-np.roll(x, -1, 0) * (np.roll(x, -2, 0) - np.roll(x, 1, 0)) - x + forcing) / p.eps

    n_spin = n_substeps(spinup, dt) if spinup > 0 else 0
    n_avg = n_substeps(T_avg, dt)
    acc = np.zeros(G)
    for k in range(n_spin + n_avg):
        k1 = field_(w)
        k2 = field_(w + 0.5 * dt * k1)
        k3 = field_(w + 0.5 * dt * k2)
        k4 = field_(w + dt * k3)
        w = w + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if k >= n_spin:
            acc += w.mean(axis=0)
    _check_finite(w)
    return acc / n_avg


def fit_default_closure(p: L96MultiscaleParams = L96MultiscaleParams(),
                        v_grid: Optional[np.ndarray] = None, T_avg: float = 5.0,
                        seed: int = 0, spinup: float = 0.5) -> CubicClosure:
    """Cubic least-squares fit of the averaged fast response m(x) over a grid of frozen x."""
    if v_grid is None:
        v_grid = np.arange(-10.0, 15.0 + 0.5, 1.0)
    avg = fast_subsystem_average(p, v_grid, T_avg, seed=seed, spinup=spinup)
    coeffs = np.polyfit(v_grid, avg, 3)
    return CubicClosure(tuple(float(c) for c in coeffs))


def with_forcing(p: L96Params, F) -> L96Params:
    return replace(p, F=F)
