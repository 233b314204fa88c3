"""Ensemble Kalman methods for inverse problems w = G(u) + eta.

Forward maps act column-wise: G maps a d_u x J array to a d_w x J array.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .gaussian_core import (
    DEFAULT_SCALING,
    EnsembleKalmanError,
    Ensemble,
    Gaussian,
    NonFinite,
    SeededStream,
    TooFewMembers,
    as_ensemble,
    cross_covariance,
    empirical_moments,
    gaussian_noise,
    moment_matched_normals,
    psd_sqrt,
    spd_solve,
    symmetrize,
)
from .models import BLOWUP, L96Params, l96_rk4, with_forcing


class GridUnderflow(EnsembleKalmanError, ArithmeticError):
    pass


class SingularForward(EnsembleKalmanError, ValueError):
    pass


def _apply(G: Callable, U: np.ndarray) -> np.ndarray:
    out = np.asarray(G(U), dtype=float)
    if out.ndim == 1:
        out = out.reshape(-1, U.shape[1]) if U.ndim == 2 else out
    return out


@dataclass
class InverseProblem:
    G: Callable
    w: np.ndarray
    noise_cov: np.ndarray
    prior: Gaussian
    L: Optional[np.ndarray] = None    # set when G is linear

    def __post_init__(self):
        self.w = np.atleast_1d(np.asarray(self.w, dtype=float))
        self.noise_cov = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        if np.linalg.eigvalsh(symmetrize(self.noise_cov)).min() <= 0:
            raise ValueError("noise covariance must be positive definite")
        if np.linalg.eigvalsh(self.prior.cov).min() <= 0:
            raise ValueError("prior covariance must be positive definite")

    @property
    def d_u(self) -> int:
        return self.prior.dim

    @property
    def d_w(self) -> int:
        return self.w.size

    @classmethod
    def linear(cls, L, w, noise_cov, prior: Gaussian) -> "InverseProblem":
        L = np.atleast_2d(np.asarray(L, dtype=float))
        return cls(lambda U: L @ U, w, noise_cov, prior, L=L)

    def misfit(self, U: np.ndarray) -> np.ndarray:
        """Phi(u) = |w - G(u)|^2_Gamma / 2 per column."""
        U = np.asarray(U, float).reshape(self.d_u, -1)
        R = self.w[:, None] - _apply(self.G, U)
        return 0.5 * np.sum(R * np.linalg.solve(self.noise_cov, R), axis=0)

    def regularized_misfit(self, U: np.ndarray) -> np.ndarray:
        U = np.asarray(U, float).reshape(self.d_u, -1)
        D = U - self.prior.mean[:, None]
        return self.misfit(U) + 0.5 * np.sum(D * np.linalg.solve(self.prior.cov, D), axis=0)


@dataclass
class RegularizedProblem:
    """Extended problem w_R = G_R(u) + eta_R with G_R(u) = (G(u), u) and Gamma_R = diag(Gamma, C0)."""

    G_R: Callable
    w_R: np.ndarray
    noise_cov_R: np.ndarray
    base: InverseProblem

    def misfit(self, U: np.ndarray) -> np.ndarray:
        U = np.asarray(U, float).reshape(self.base.d_u, -1)
        R = self.w_R[:, None] - self.G_R(U)
        return 0.5 * np.sum(R * np.linalg.solve(self.noise_cov_R, R), axis=0)

    def as_problem(self) -> InverseProblem:
        L_R = None if self.base.L is None else np.vstack([self.base.L, np.eye(self.base.d_u)])
        return InverseProblem(self.G_R, self.w_R, self.noise_cov_R, self.base.prior, L=L_R)


def regularize(p: InverseProblem) -> RegularizedProblem:
    d_w, d_u = p.d_w, p.d_u

    def G_R(U):
        U = np.asarray(U, float).reshape(d_u, -1)
        return np.vstack([_apply(p.G, U), U])

    Gam = np.zeros((d_w + d_u, d_w + d_u))
    Gam[:d_w, :d_w] = p.noise_cov
    Gam[d_w:, d_w:] = p.prior.cov
    return RegularizedProblem(G_R, np.concatenate([p.w, p.prior.mean]), Gam, p)


def linear_posterior(L: np.ndarray, p: InverseProblem) -> Gaussian:
    """Posterior N(m_R, C_R) with C_R^{-1} = L^T Gamma^{-1} L + C0^{-1}."""
    L = np.atleast_2d(L)
    GiL = np.linalg.solve(p.noise_cov, L)
    P0 = np.linalg.inv(p.prior.cov)
    prec = symmetrize(L.T @ GiL + P0)
    rhs = GiL.T @ p.w + P0 @ p.prior.mean
    C = symmetrize(np.linalg.inv(prec))
    return Gaussian(np.linalg.solve(prec, rhs), C)


@dataclass
class GridDensity:
    """Normalized weights on a tensor grid; points is d x N."""

    points: np.ndarray
    weights: np.ndarray
    shape: tuple

    def mean(self) -> np.ndarray:
        return self.points @ self.weights

    def cov(self) -> np.ndarray:
        D = self.points - self.mean()[:, None]
        return symmetrize((D * self.weights) @ D.T)

    def moments(self) -> Gaussian:
        return Gaussian(self.mean(), self.cov())


def grid_posterior(p: InverseProblem, t: float, axes: Sequence[np.ndarray]) -> GridDensity:
    """Density proportional to exp(-t Phi(u)) rho_0(u) on the tensor grid spanned by axes.

    Weights include the cell volume of each axis (uniform spacing assumed).
    """
    axes = [np.asarray(a, dtype=float) for a in axes]
    if len(axes) != p.d_u or p.d_u > 3:
        raise ValueError("grid oracle needs one axis per parameter and d_u <= 3")
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.vstack([m.ravel() for m in mesh])
    D = pts - p.prior.mean[:, None]
    P0 = np.linalg.inv(p.prior.cov)
    _, logdet = np.linalg.slogdet(p.prior.cov)
    log_prior = -0.5 * np.sum(D * (P0 @ D), axis=0) - 0.5 * (logdet + p.d_u * np.log(2 * np.pi))
    log_vol = sum(np.log(a[1] - a[0]) for a in axes if a.size > 1)
    logw = log_prior + log_vol
    if t != 0:
        logw = logw - t * p.misfit(pts)
    top = np.max(logw)
    if not np.isfinite(top) or top < np.log(1e-300):
        raise GridUnderflow("all grid weights underflow; move or widen the grid")
    w = np.exp(logw - top)
    return GridDensity(pts, w / w.sum(), tuple(a.size for a in axes))


# ---------------------------------------------------------------- EKI updates

def _kalman_inversion_update(U: np.ndarray, GU: np.ndarray, w: np.ndarray, eta: np.ndarray,
                             gain_noise: np.ndarray, weight: float, scaling: str) -> np.ndarray:
    """u_j + weight C^{uG} (weight C^{GG} + gain_noise)^{-1} (w + eta_j - G(u_j))."""
    c_ug = cross_covariance(U, GU, scaling)
    c_gg = symmetrize(cross_covariance(GU, GU, scaling))
    S = symmetrize(weight * c_gg + gain_noise)
    K = weight * spd_solve(S, c_ug.T).T
    return U + K @ (w[:, None] + eta - GU)


def _members(e) -> np.ndarray:
    e = as_ensemble(e)
    if e.size < 2:
        raise TooFewMembers(f"need at least 2 members, got {e.size}")
    return e.members


def _finite(U: np.ndarray):
    if not np.all(np.isfinite(U)) or np.abs(U).max(initial=0.0) > BLOWUP:
        raise NonFinite("ensemble blew up")


def eki_transport_step(p: InverseProblem, e, dt: float, stream: SeededStream,
                       scaling: str = DEFAULT_SCALING) -> Ensemble:
    """u_j <- u_j + dt C^{uG} (dt C^{GG} + Gamma)^{-1} (w + eta_j - G(u_j)), eta_j ~ N(0, Gamma/dt)."""
    U = _members(e)
    GU = _apply(p.G, U)
    eta = gaussian_noise(p.noise_cov / dt, U.shape[1], stream.child("data"))
    Un = _kalman_inversion_update(U, GU, p.w, eta, p.noise_cov, dt, scaling)
    _finite(Un)
    return Ensemble(Un)


def eki_step(p: InverseProblem, e, stream: SeededStream, scaling: str = DEFAULT_SCALING) -> Ensemble:
    """Unit-step ensemble Kalman inversion: one transport step with dt = 1, iterated as an optimizer."""
    return eki_transport_step(p, e, 1.0, stream, scaling)


@dataclass(frozen=True)
class IterInfParams:
    alpha: float = 0.5
    sigma_p: float = 0.0
    gamma_p: float = 1.0
    r0: Optional[np.ndarray] = None
    Sigma: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.sigma_p < 0 or self.gamma_p <= 0:
            raise ValueError("need sigma' >= 0 and gamma' > 0")


def eki_iterinf_step(p: InverseProblem, params: IterInfParams, e, stream: SeededStream,
                     scaling: str = DEFAULT_SCALING) -> Ensemble:
    """Predict u^ = alpha u + (1 - alpha) r0 + xi, then analyse with gain C^{uG}(C^{GG} + gamma' Gamma)^{-1}."""
    U = _members(e)
    J = U.shape[1]
    if params.alpha != 1.0:
        r0 = p.prior.mean if params.r0 is None else np.asarray(params.r0, float)
        U = params.alpha * U + (1.0 - params.alpha) * r0[:, None]
    if params.sigma_p > 0:
        Sigma = np.eye(p.d_u) if params.Sigma is None else np.atleast_2d(params.Sigma)
        U = U + gaussian_noise(params.sigma_p * Sigma, J, stream.child("prediction"))
    GU = _apply(p.G, U)
    gam = params.gamma_p * p.noise_cov
    eta = gaussian_noise(gam, J, stream.child("data"))
    Un = _kalman_inversion_update(U, GU, p.w, eta, gam, 1.0, scaling)
    _finite(Un)
    return Ensemble(Un)


def iterinf_moment_fixed_point(L: np.ndarray, p: InverseProblem, params: IterInfParams,
                               tol: float = 1e-15, max_iter: int = 100_000):
    """Steady state of the exact Gaussian filter for u_{n+1} = alpha u_n + (1-alpha) r0 + xi, w = L u + eta.

    The covariance is iterated in Kalman (gain) form from the prior until it stops moving;
    the mean then solves the fixed-point equation of the mean recursion. Returns (m, C, C_hat).
    """
    L = np.atleast_2d(L)
    a = params.alpha
    Sigma = np.eye(p.d_u) if params.Sigma is None else np.atleast_2d(params.Sigma)
    Q = params.sigma_p * Sigma
    gam = params.gamma_p * p.noise_cov
    C = p.prior.cov.copy()
    for _ in range(max_iter):
        Ch = symmetrize(a * a * C + Q)
        K = spd_solve(symmetrize(L @ Ch @ L.T + gam), L @ Ch).T
        Cn = symmetrize(Ch - K @ L @ Ch)
        done = np.abs(Cn - C).max() <= tol * max(1.0, np.abs(C).max())
        C = Cn
        if done:
            break
    Ch = symmetrize(a * a * C + Q)
    K = spd_solve(symmetrize(L @ Ch @ L.T + gam), L @ Ch).T
    r0 = p.prior.mean if params.r0 is None else np.asarray(params.r0, float)
    # m = (I - K L)(a m + (1-a) r0) + K w
    IKL = np.eye(p.d_u) - K @ L
    m = np.linalg.solve(np.eye(p.d_u) - a * IKL, IKL @ ((1 - a) * r0) + K @ p.w)
    return m, C, Ch


def tikhonov_phillips_gradient(L: np.ndarray, p: InverseProblem, params: IterInfParams,
                               C_hat: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Gradient of |w - Lm|^2_Gamma / (2 gamma') + (1 - alpha) |m - r0|^2_{C_hat} / 2."""
    L = np.atleast_2d(L)
    r0 = p.prior.mean if params.r0 is None else np.asarray(params.r0, float)
    g = -L.T @ np.linalg.solve(p.noise_cov, p.w - L @ m) / params.gamma_p
    return g + (1 - params.alpha) * np.linalg.solve(C_hat, m - r0)


def eki_bayes_iterinf_step(p: InverseProblem, alpha: float, e, stream: SeededStream,
                           deterministic_inflation: bool = False,
                           scaling: str = DEFAULT_SCALING) -> Ensemble:
    """Iteration whose steady state is the posterior.

    Prediction adds N(0, alpha C_n) noise (or inflates deviations by sqrt(1 + alpha));
    the analysis acts on the regularized problem with noise covariance (1 + 1/alpha) Gamma_R.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    U = _members(e)
    J = U.shape[1]
    m = U.mean(axis=1, keepdims=True)
    if deterministic_inflation:
        U = m + np.sqrt(1.0 + alpha) * (U - m)
    else:
        C = empirical_moments(U, scaling).cov
        U = U + gaussian_noise(alpha * C, J, stream.child("prediction"))
    r = regularize(p)
    gam = (1.0 + 1.0 / alpha) * r.noise_cov_R
    eta = gaussian_noise(gam, J, stream.child("data"))
    Un = _kalman_inversion_update(U, r.G_R(U), r.w_R, eta, gam, 1.0, scaling)
    _finite(Un)
    return Ensemble(Un)


def eks_drift(p: InverseProblem, U: np.ndarray, scaling: str = DEFAULT_SCALING) -> np.ndarray:
    """-[C^{uG} Gamma^{-1} (G(u) - w) + C C0^{-1} (u - m0)] for every member."""
    GU = _apply(p.G, U)
    c_ug = cross_covariance(U, GU, scaling)
    C = empirical_moments(U, scaling).cov
    data_term = c_ug @ np.linalg.solve(p.noise_cov, GU - p.w[:, None])
    prior_term = C @ np.linalg.solve(p.prior.cov, U - p.prior.mean[:, None])
    return -(data_term + prior_term)


def eks_step(p: InverseProblem, e, dt: float, stream: SeededStream,
             scaling: str = DEFAULT_SCALING) -> Ensemble:
    """Euler-Maruyama step of the statistically linearized Langevin system du = drift dt + sqrt(2C) dW."""
    U = _members(e)
    if U.shape[1] < 3:
        raise TooFewMembers("ensemble Kalman sampling needs at least 3 members")
    C = empirical_moments(U, scaling).cov
    noise = np.sqrt(2.0 * dt) * gaussian_noise(C, U.shape[1], stream.child("diffusion"))
    Un = U + dt * eks_drift(p, U, scaling) + noise
    _finite(Un)
    return Ensemble(Un)


def gpf_inversion_step(p: InverseProblem, g: Gaussian, dt: float, quad_size: int,
                       stream: SeededStream) -> Gaussian:
    """Gaussian projected update of (m, C) with moments of G under N(m, C) from moment-matched samples."""
    Z = moment_matched_normals(p.d_u, quad_size, stream.child("quadrature"))
    U = g.mean[:, None] + psd_sqrt(g.cov) @ Z
    GU = _apply(p.G, U)
    n = quad_size
    Du = U - U.mean(axis=1, keepdims=True)
    EG = GU.mean(axis=1)
    Dg = GU - EG[:, None]
    c_ug, c_gg = Du @ Dg.T / n, symmetrize(Dg @ Dg.T / n)
    K = dt * spd_solve(symmetrize(p.noise_cov + dt * c_gg), c_ug.T).T
    return Gaussian(g.mean + K @ (p.w - EG), symmetrize(g.cov - K @ c_ug.T))


@dataclass
class EkiHistory:
    ensembles: List[Ensemble] = field(default_factory=list)
    stopped_early: bool = False

    def means(self) -> np.ndarray:
        return np.array([e.mean() for e in self.ensembles])

    def spreads(self) -> np.ndarray:
        """Square root of the trace of the empirical covariance."""
        return np.array([np.sqrt(np.trace(empirical_moments(e).cov)) for e in self.ensembles])


def run_iterations(step: Callable, e0, n_iter: int, stream: SeededStream,
                   collapse_tol: Optional[float] = None) -> EkiHistory:
    """Apply step(e, stream) n_iter times; stop early once trace(C_n) < collapse_tol trace(C_0)."""
    e = as_ensemble(e0)
    hist = EkiHistory([e])
    tr0 = np.trace(empirical_moments(e).cov)
    for n in range(n_iter):
        e = step(e, stream.child("iter", n))
        hist.ensembles.append(e)
        if collapse_tol is not None and np.trace(empirical_moments(e).cov) < collapse_tol * tr0:
            hist.stopped_early = True
            break
    return hist


# ---------------------------------------------------------------- linear rate analysis

@dataclass
class RateReport:
    times: np.ndarray
    deviation_ratio: np.ndarray      # t |B^{1/2} d(t)|^2 / |B^{1/2} d(0)|^2
    deviation_sq: np.ndarray         # |B^{1/2} d(t)|^2
    bias_residual: np.ndarray        # |m(t) - u_dagger - closed form| per time
    condition_min_eig: float         # smallest eigenvalue of B^{1/2} C0 B^{1/2}

    @property
    def rate_holds(self) -> bool:
        mask = self.times >= 1.0
        d0 = self.deviation_sq[0]
        return bool(np.all(self.deviation_sq[mask] * self.times[mask] <= d0 * (1 + 1e-9) + 1e-300))

    @property
    def max_bias_residual(self) -> float:
        return float(self.bias_residual.max())


def _sigma_points(m: np.ndarray, C: np.ndarray) -> np.ndarray:
    """2d points m +- sqrt(d) C^{1/2} e_i; their 1/(2d) moments are exactly (m, C)."""
    d = m.size
    S = np.sqrt(d) * psd_sqrt(C)
    return np.hstack([m[:, None] + S, m[:, None] - S])


def bias_closed_form(L: np.ndarray, Gamma: np.ndarray, C0: np.ndarray, m0: np.ndarray,
                     u_dag: np.ndarray, t: float) -> np.ndarray:
    """m(t) - u_dagger = t^{-1} L^{-1} Gamma (L C0 L^T + Gamma / t)^{-1} L (m0 - u_dagger)."""
    inner = np.linalg.solve(L @ C0 @ L.T + Gamma / t, L @ (m0 - u_dag))
    return np.linalg.solve(L, Gamma @ inner) / t


def analyze_linear_rates(L: np.ndarray, Gamma: np.ndarray, prior: Gaussian, w: np.ndarray,
                         t_grid: np.ndarray, u0: Optional[np.ndarray] = None,
                         rel_step: float = 1e-4) -> RateReport:
    """Integrate du/dt = -C B ((u + m)/2 - u_dagger) with RK4 and check the rate and bias claims.

    The law is represented by 2d sigma points, whose 1/(2d) moments obey the exact moment
    equations in the linear case; the monitored particle u0 is advanced in the same field
    without entering the moments. Steps are rel_step * max(1, t).
    """
    L = np.atleast_2d(np.asarray(L, float))
    Gamma = np.atleast_2d(np.asarray(Gamma, float))
    if L.shape[0] != L.shape[1] or abs(np.linalg.det(L)) < 1e-14 * max(1.0, np.abs(L).max()) ** L.shape[0]:
        raise SingularForward("rate analysis needs a square invertible forward matrix")
    w = np.atleast_1d(np.asarray(w, float))
    u_dag = np.linalg.solve(L, w)
    B = symmetrize(L.T @ np.linalg.solve(Gamma, L))
    Bh = psd_sqrt(B)
    m0, C0 = prior.mean, prior.cov
    if u0 is None:
        u0 = m0 + psd_sqrt(C0) @ np.ones(m0.size) / np.sqrt(m0.size)
    X = np.hstack([_sigma_points(m0, C0), np.asarray(u0, float)[:, None]])
    npts = X.shape[1] - 1

    def field_(X):
        P = X[:, :npts]
        m = P.mean(axis=1, keepdims=True)
        D = P - m
        C = D @ D.T / npts
        return -C @ B @ (0.5 * (X + m) - u_dag[:, None])

    t_grid = np.sort(np.asarray(t_grid, float))
    times, dev, bias = [0.0], [], []

    def record(X, t):
        m = X[:, :npts].mean(axis=1)
        d = X[:, -1] - m
        dev.append(float(np.sum((Bh @ d) ** 2)))
        if t > 0:
            bias.append(float(np.abs(m - u_dag - bias_closed_form(L, Gamma, C0, m0, u_dag, t)).max()))

    record(X, 0.0)
    t = 0.0
    for target in t_grid:
        while t < target - 1e-15:
            h = min(rel_step * max(1.0, t), target - t)
            k1 = field_(X)
            k2 = field_(X + 0.5 * h * k1)
            k3 = field_(X + 0.5 * h * k2)
            k4 = field_(X + h * k3)
            X = X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
        t = target
        times.append(t)
        record(X, t)
    min_eig = float(np.linalg.eigvalsh(symmetrize(Bh @ C0 @ Bh)).min())
    return RateReport(np.array(times), np.array(dev) * np.array(times) / dev[0] if dev[0] > 0
                      else np.zeros(len(dev)), np.array(dev), np.array([0.0] + bias), min_eig)


def deviation_closed_form(L, Gamma, C0, d0, t) -> float:
    """|B^{1/2} d(t)|^2 for the exact flow: e0^T P (P + t I)^{-1} e0, P = (B^{1/2} C0 B^{1/2})^{-1}, e0 = B^{1/2} d0."""
    B = symmetrize(np.atleast_2d(L).T @ np.linalg.solve(np.atleast_2d(Gamma), np.atleast_2d(L)))
    Bh = psd_sqrt(B)
    P = np.linalg.inv(symmetrize(Bh @ C0 @ Bh))
    e0 = Bh @ d0
    return float(e0 @ P @ np.linalg.solve(P + t * np.eye(P.shape[0]), e0))


# ---------------------------------------------------------------- Lorenz '96 time averages

def time_averaged_forward_map(p: L96Params, u, T: float, tau: float, stream: SeededStream,
                              v0_var: float = 40.0, dt_inner: Optional[float] = None) -> np.ndarray:
    """Mean over components of the time mean, and mean over components of the time variance.

    u is a scalar forcing or one forcing per member; samples are taken every tau for
    n = 1..T/tau after a random start v0 ~ N(0, v0_var I) drawn from stream. Returns
    shape (2,) for scalar u and (2, J) otherwise.
    """
    u_arr = np.atleast_1d(np.asarray(u, dtype=float)).ravel()
    J = u_arr.size
    n = int(round(T / tau))
    if n < 2 or abs(n * tau - T) > 1e-9 * T:
        raise ValueError("T must be a multiple of tau with at least two samples")
    dt = min(tau, 1e-3) if dt_inner is None else dt_inner
    pu = with_forcing(p, u_arr)
    v = np.sqrt(v0_var) * stream.child("initial").normal(p.L, J)
    s1 = np.zeros((p.L, J))
    s2 = np.zeros((p.L, J))
    shift = None
    for _ in range(n):
        v = l96_rk4(pu, v, tau, dt)
        if shift is None:
            shift = v.copy()  # shifted sums keep the variance accurate
        x = v - shift
        s1 += x
        s2 += x * x
    mean_l = s1 / n
    var_l = np.maximum(s2 / n - mean_l ** 2, 0.0)
    out = np.vstack([(mean_l + shift).mean(axis=0), var_l.mean(axis=0)])
    return out[:, 0] if np.ndim(u) == 0 else out


class L96TimeAverageMap:
    """Forward map u -> G_T(u) on 1 x J arrays; every call draws fresh initial conditions.

    Calls are numbered so that the sequence of evaluations is reproducible for a fixed seed.
    """

    def __init__(self, p: L96Params, T: float, tau: float, stream: SeededStream,
                 v0_var: float = 40.0, dt_inner: Optional[float] = None):
        self.p, self.T, self.tau, self.stream = p, T, tau, stream
        self.v0_var, self.dt_inner = v0_var, dt_inner
        self.calls = 0

    def __call__(self, U) -> np.ndarray:
        U = np.atleast_2d(np.asarray(U, dtype=float))
        s = self.stream.child("G", self.calls)
        self.calls += 1
        return time_averaged_forward_map(self.p, U[0], self.T, self.tau, s, self.v0_var, self.dt_inner).reshape(2, -1)


def estimate_noise_cov(G: Callable, u: float, n_rep: int) -> np.ndarray:
    """Sample covariance of repeated forward evaluations at one parameter value."""
    Y = G(np.full((1, n_rep), float(u)))
    D = Y - Y.mean(axis=1, keepdims=True)
    return symmetrize(D @ D.T / (n_rep - 1))
