"""Families of affine maps that transport a joint Gaussian to its conditional at second order.

Stochastic maps use simulated data: v = A vhat + B yhat + a.
Deterministic maps use the predicted observation: v = R vhat + S hhat + r.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.stats import ortho_group

from .gaussian_core import (
    EnsembleKalmanError,
    Gaussian,
    JointGaussian,
    SeededStream,
    condition_joint,
    psd_inv_sqrt,
    psd_sqrt,
    spd_solve,
    symmetrize,
)


class NotInFamily(EnsembleKalmanError, ValueError):
    pass


@dataclass
class StochasticTransport:
    A: np.ndarray
    B: np.ndarray
    a: np.ndarray

    def apply(self, Vhat: np.ndarray, Yhat: np.ndarray) -> np.ndarray:
        return self.A @ Vhat + self.B @ Yhat + self.a.reshape(-1, *([1] * (Vhat.ndim - 1)))


@dataclass
class DeterministicTransport:
    R: np.ndarray
    S: np.ndarray
    r: np.ndarray

    def apply(self, Vhat: np.ndarray, Hhat: np.ndarray) -> np.ndarray:
        return self.R @ Vhat + self.S @ Hhat + self.r.reshape(-1, *([1] * (Vhat.ndim - 1)))


@dataclass
class FamilySelector:
    """Free coupling matrix (B or S), orthogonal matrix (V or Z) and eigen-branch signs."""

    free: np.ndarray
    orth: np.ndarray
    signs: np.ndarray

    def __post_init__(self):
        self.free = np.atleast_2d(np.asarray(self.free, dtype=float))
        self.orth = np.atleast_2d(np.asarray(self.orth, dtype=float))
        self.signs = np.asarray(self.signs, dtype=float).ravel()
        d = self.orth.shape[0]
        if np.abs(self.orth.T @ self.orth - np.eye(d)).max() > 1e-10:
            raise ValueError("orth must be orthogonal to 1e-10")
        if not np.all(np.abs(self.signs) == 1.0) or self.signs.size != d:
            raise ValueError("signs must be a vector of +-1 of the state dimension")

    @classmethod
    def canonical(cls, d_v: int, d_y: int) -> "FamilySelector":
        return cls(np.zeros((d_v, d_y)), np.eye(d_v), np.ones(d_v))


def _in_family(M: np.ndarray) -> bool:
    d = M.shape[0]
    floor = 1e-10 * max(np.trace(M), 0.0) / d
    return bool(np.linalg.eigvalsh(symmetrize(M)).min() > floor)


def _signed_root(M: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """U diag(+-s) U^T for M = U diag(s^2) U^T with eigenvalues ascending."""
    lam, U = np.linalg.eigh(symmetrize(M))
    return (U * (signs * np.sqrt(np.clip(lam, 0.0, None)))) @ U.T


def gain(j: JointGaussian) -> np.ndarray:
    return spd_solve(j.c_yy, j.c_vy.T).T


def stochastic_residual_cov(j: JointGaussian) -> np.ndarray:
    """C~ = C^{yy} - (C^{vy})^T Chat^{-1} C^{vy}."""
    return symmetrize(j.c_yy - j.c_vy.T @ np.linalg.solve(j.c_vv, j.c_vy))


def build_stochastic(j: JointGaussian, y_obs, sel: FamilySelector) -> StochasticTransport:
    """Member of the stochastic family selected by (B, V, signs).

    F = U Sigma U^T V^T Chat^{1/2} where U Sigma^2 U^T = C - B C~ B^T; writing the free
    orthogonal factor as U V keeps the canonical choice (B = 0, V = I, signs +) equal to
    the symmetric scaling map C^{1/2} Chat^{-1/2}.
    """
    y_obs = np.asarray(y_obs, dtype=float)
    post = condition_joint(j, y_obs)
    B = sel.free
    Cp = symmetrize(post.cov - B @ stochastic_residual_cov(j) @ B.T)
    if not _in_family(Cp):
        raise NotInFamily("C - B C~ B^T is not positive definite")
    F = _signed_root(Cp, sel.signs) @ sel.orth.T @ psd_sqrt(j.c_vv)
    A = np.linalg.solve(j.c_vv, (F - B @ j.c_vy.T).T).T
    K = gain(j)
    a = (np.eye(j.d_v) - A) @ j.mean_v + K @ y_obs - (B + K) @ j.mean_y
    return StochasticTransport(A, B, a)


def stochastic_orth_for(j: JointGaussian, B: np.ndarray, F: np.ndarray,
                        signs: Optional[np.ndarray] = None) -> np.ndarray:
    """Orthogonal V with U Sigma U^T V^T Chat^{1/2} = F, for F satisfying the family identity."""
    post = condition_joint(j, np.zeros(j.d_y))
    Cp = symmetrize(post.cov - B @ stochastic_residual_cov(j) @ B.T)
    signs = np.ones(j.d_v) if signs is None else signs
    Vt = np.linalg.solve(_signed_root(Cp, signs), F) @ psd_inv_sqrt(j.c_vv)
    return Vt.T


def kalman_selector(j: JointGaussian) -> FamilySelector:
    """Selector reproducing the Kalman transport B = -K, A = I (F = C)."""
    K = gain(j)
    C = condition_joint(j, np.zeros(j.d_y)).cov
    return FamilySelector(-K, stochastic_orth_for(j, -K, C), np.ones(j.d_v))


def deterministic_residual_cov(j: JointGaussian) -> np.ndarray:
    """C-check = C^{hh} - (C^{vh})^T Chat^{-1} C^{vh}, with j holding (vhat, hhat) moments."""
    return symmetrize(j.c_yy - j.c_vy.T @ np.linalg.solve(j.c_vv, j.c_vy))


def _with_noise(j: JointGaussian, Gamma: np.ndarray) -> JointGaussian:
    return JointGaussian(j.mean_v, j.mean_y, j.c_vv, j.c_vy, symmetrize(j.c_yy + Gamma))


def build_deterministic(j: JointGaussian, Gamma: np.ndarray, y_obs,
                        sel: FamilySelector) -> DeterministicTransport:
    """Member of the deterministic family; j carries the (vhat, h(vhat)) moments, data noise is Gamma."""
    y_obs = np.asarray(y_obs, dtype=float)
    Gamma = np.atleast_2d(Gamma)
    jy = _with_noise(j, Gamma)
    post = condition_joint(jy, y_obs)
    S = sel.free
    Cp = symmetrize(post.cov - S @ deterministic_residual_cov(j) @ S.T)
    if not _in_family(Cp):
        raise NotInFamily("C - S C-check S^T is not positive definite")
    E = _signed_root(Cp, sel.signs) @ sel.orth.T @ psd_sqrt(j.c_vv)
    R = np.linalg.solve(j.c_vv, (E - S @ j.c_vy.T).T).T
    K = gain(jy)
    r = (np.eye(j.d_v) - R) @ j.mean_v + K @ y_obs - (S + K) @ j.mean_y
    return DeterministicTransport(R, S, r)


def identity_selector(j: JointGaussian, Gamma: np.ndarray) -> FamilySelector:
    """Selector reproducing R = I, S = -K~ (adjustment through data space)."""
    Gamma = np.atleast_2d(Gamma)
    D = symmetrize(j.c_yy + Gamma)
    Y = D + psd_sqrt(Gamma) @ psd_sqrt(D)
    S = -np.linalg.solve(Y.T, j.c_vy.T).T
    E = j.c_vv + S @ j.c_vy.T
    post = condition_joint(_with_noise(j, Gamma), np.zeros(j.d_y))
    Cp = symmetrize(post.cov - S @ deterministic_residual_cov(j) @ S.T)
    Zt = np.linalg.solve(_signed_root(Cp, np.ones(j.d_v)), E) @ psd_inv_sqrt(j.c_vv)
    return FamilySelector(S, Zt.T, np.ones(j.d_v))


def optimal_pair(j: JointGaussian, W: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """(A, B) with B = 0 and A = C^{1/2} (C^{1/2} Chat C^{1/2})^{-1/2} C^{1/2}.

    This map does not depend on W. It minimizes the W-weighted cost exactly when W
    commutes with A (for instance W = I); see weighted_optimal_pair for general W.
    """
    C = condition_joint(j, np.zeros(j.d_y)).cov
    Cs = psd_sqrt(C)
    A = symmetrize(Cs @ psd_inv_sqrt(symmetrize(Cs @ j.c_vv @ Cs)) @ Cs)
    return A, np.zeros((j.d_v, j.d_y))


def weighted_optimal_pair(j: JointGaussian, W: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Minimizer of the W-weighted cost: the symmetric map in coordinates W^{1/2} v, mapped back."""
    Wh = psd_sqrt(np.atleast_2d(W))
    Wih = np.linalg.inv(Wh)
    C = condition_joint(j, np.zeros(j.d_y)).cov
    Cy = psd_sqrt(symmetrize(Wh @ C @ Wh))
    Ay = Cy @ psd_inv_sqrt(symmetrize(Cy @ Wh @ j.c_vv @ Wh @ Cy)) @ Cy
    return Wih @ Ay @ Wh, np.zeros((j.d_v, j.d_y))


def transport_from_pair(j: JointGaussian, y_obs, A: np.ndarray, B: np.ndarray) -> StochasticTransport:
    K = gain(j)
    y_obs = np.asarray(y_obs, dtype=float)
    return StochasticTransport(A, B, (np.eye(j.d_v) - A) @ j.mean_v + K @ y_obs - (B + K) @ j.mean_y)


def pushforward_moments(T, j: JointGaussian) -> Gaussian:
    """Exact mean and covariance of an affine transport applied to the joint Gaussian."""
    if isinstance(T, StochasticTransport):
        M, c = np.hstack([T.A, T.B]), T.a
    else:
        M, c = np.hstack([T.R, T.S]), T.r
    mean = M @ np.concatenate([j.mean_v, j.mean_y]) + c
    return Gaussian(mean, symmetrize(M @ j.block() @ M.T))


def transport_cost(T: StochasticTransport, j: JointGaussian, W: np.ndarray) -> float:
    """I_W = E <v - vhat, W (v - vhat)> / 2 under the joint Gaussian, in closed form."""
    M = np.hstack([T.A - np.eye(j.d_v), T.B])
    mu = M @ np.concatenate([j.mean_v, j.mean_y]) + T.a
    Sd = M @ j.block() @ M.T
    return 0.5 * float(np.trace(W @ Sd) + mu @ W @ mu)


def sample_joint(j: JointGaussian, n: int, stream: SeededStream) -> Tuple[np.ndarray, np.ndarray]:
    Z = stream.normal(j.d_v + j.d_y, n)
    X = np.concatenate([j.mean_v, j.mean_y])[:, None] + psd_sqrt(j.block()) @ Z
    return X[:j.d_v], X[j.d_v:]


def transport_cost_mc(T: StochasticTransport, Vhat: np.ndarray, Yhat: np.ndarray,
                      W: np.ndarray) -> float:
    """Monte Carlo I_W on given joint samples (reuse samples across maps for common random numbers)."""
    D = T.apply(Vhat, Yhat) - Vhat
    return 0.5 * float(np.mean(np.sum(D * (W @ D), axis=0)))


def blue(j: JointGaussian, y_obs) -> Tuple[np.ndarray, np.ndarray]:
    """Best linear unbiased estimate of vhat from yhat evaluated at y_obs, and its error covariance."""
    y_obs = np.asarray(y_obs, dtype=float)
    L = np.linalg.cholesky(symmetrize(j.c_yy))
    # K = C^{vy} C^{yy}^{-1} via two triangular solves
    Kt = np.linalg.solve(L.T, np.linalg.solve(L, j.c_vy.T))
    est = j.mean_v + Kt.T @ (y_obs - j.mean_y)
    cov = symmetrize(j.c_vv - Kt.T @ j.c_vy.T)
    return est, cov


def random_joint(d_v: int, d_y: int, stream: SeededStream, noise: float = 0.3) -> JointGaussian:
    """Random joint Gaussian with positive-definite block covariance."""
    rng = stream.rng()
    X = rng.standard_normal((d_v + d_y, d_v + d_y))
    M = X @ X.T / (d_v + d_y) + noise * np.eye(d_v + d_y)
    mu = rng.standard_normal(d_v + d_y)
    return JointGaussian(mu[:d_v], mu[d_v:], M[:d_v, :d_v], M[:d_v, d_v:], M[d_v:, d_v:])


def random_selector(j: JointGaussian, residual_cov: np.ndarray, stream: SeededStream,
                    target_cov: Optional[np.ndarray] = None, shrink: float = 0.7) -> FamilySelector:
    """Random (free matrix, orthogonal matrix, signs) with the free matrix inside the family.

    A Gaussian direction is scaled so that target_cov - F C_res F^T keeps its smallest
    eigenvalue above a fraction (1 - shrink**2) of target_cov's.
    """
    rng = stream.rng()
    C = condition_joint(j, np.zeros(j.d_y)).cov if target_cov is None else target_cov
    B0 = rng.standard_normal((j.d_v, j.d_y))
    # largest t with t^2 B0 C_res B0^T <= C
    Cih = psd_inv_sqrt(C)
    lam = np.linalg.eigvalsh(symmetrize(Cih @ B0 @ residual_cov @ B0.T @ Cih)).max()
    t = shrink * rng.uniform(0.2, 1.0) / np.sqrt(max(lam, 1e-300))
    V = ortho_group.rvs(j.d_v, random_state=rng) if j.d_v > 1 else np.array([[1.0]])
    signs = rng.choice([-1.0, 1.0], size=j.d_v)
    return FamilySelector(t * B0, V, signs)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _moment_error(g: Gaussian, target: Gaussian) -> float:
    return max(np.abs(g.mean - target.mean).max(), np.abs(g.cov - target.cov).max())


def transport_check_suite(seed: int = 0, n_members: int = 50, d_v: int = 3, d_y: int = 2,
                          n_weights: int = 3, mc_samples: int = 100_000,
                          tol: float = 1e-9) -> List[CheckResult]:
    """Verify both families on a random joint and compare optimal_pair against sampled members."""
    root = SeededStream(seed, ("transport-check",))
    j = random_joint(d_v, d_y, root.child("joint"))
    y_obs = root.child("y").normal(d_y, 1)[:, 0]
    target = condition_joint(j, y_obs)
    results = []

    st_members, worst = [], 0.0
    for k in range(n_members):
        sel = random_selector(j, stochastic_residual_cov(j), root.child("stochastic", k))
        T = build_stochastic(j, y_obs, sel)
        st_members.append(T)
        worst = max(worst, _moment_error(pushforward_moments(T, j), target))
    results.append(CheckResult("stochastic family pushforward", bool(worst <= tol), f"max error {worst:.2e}"))

    # deterministic family: the joint plays (vhat, h(vhat)), data noise Gamma
    Gamma = 0.5 * np.eye(d_y)
    jd = _with_noise(j, Gamma)
    target_d = condition_joint(jd, y_obs)
    worst = 0.0
    for k in range(n_members):
        sel = random_selector(j, deterministic_residual_cov(j), root.child("deterministic", k),
                              target_cov=target_d.cov)
        T = build_deterministic(j, Gamma, y_obs, sel)
        worst = max(worst, _moment_error(pushforward_moments(T, j), target_d))
    results.append(CheckResult("deterministic family pushforward", bool(worst <= tol), f"max error {worst:.2e}"))

    # Monte Carlo variant on one member of each family
    Vh, Yh = sample_joint(j, mc_samples, root.child("mc"))
    band = 5.0 / np.sqrt(mc_samples)
    for name, T, tgt in (("stochastic", st_members[0], target),
                         ("deterministic", build_deterministic(j, Gamma, y_obs, random_selector(
                             j, deterministic_residual_cov(j), root.child("deterministic", 0),
                             target_cov=target_d.cov)), target_d)):
        X = T.apply(Vh, Yh)
        m = X.mean(axis=1)
        D = X - m[:, None]
        scale = np.sqrt(np.diag(tgt.cov))
        err_m = np.abs(m - tgt.mean).max() / scale.max()
        err_c = np.abs(D @ D.T / (mc_samples - 1) - tgt.cov).max() / np.abs(tgt.cov).max()
        ok = err_m <= band and err_c <= 2 * band
        results.append(CheckResult(f"{name} Monte Carlo moments", bool(ok),
                                   f"mean {err_m:.2e}, cov {err_c:.2e}, band {band:.1e}"))

    A, B = optimal_pair(j)
    T_opt = transport_from_pair(j, y_obs, A, B)
    rng = root.child("weights").rng()
    for k in range(n_weights):
        X = rng.standard_normal((d_v, d_v))
        W = X @ X.T / d_v + 0.1 * np.eye(d_v)
        c_opt = transport_cost(T_opt, j, W)
        c_min = min(transport_cost(T, j, W) for T in st_members)
        results.append(CheckResult(f"optimal pair cost, weight {k}", bool(c_opt <= c_min),
                                   f"optimal {c_opt:.6g}, best sampled {c_min:.6g}"))
    return results
