"""Dense Gaussian algebra, empirical ensemble moments and seeded sampling."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy import linalg as sla

SCALING_J = "1/J"
SCALING_J1 = "1/(J-1)"
DEFAULT_SCALING = SCALING_J1


class EnsembleKalmanError(Exception):
    """Base class for errors raised by this package."""


class NumericalFailure(EnsembleKalmanError):
    """A computation produced values that cannot be trusted."""


class NonSymmetric(EnsembleKalmanError, ValueError):
    pass


class NonPSD(EnsembleKalmanError, ValueError):
    pass


class SingularDataCovariance(NumericalFailure):
    pass


class TooFewMembers(EnsembleKalmanError, ValueError):
    pass


class MemberCountMismatch(EnsembleKalmanError, ValueError):
    pass


class DimensionMismatch(EnsembleKalmanError, ValueError):
    pass


class NonFinite(NumericalFailure):
    pass


def symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def _asymmetry(M: np.ndarray) -> float:
    scale = max(np.abs(M).max(), np.finfo(float).tiny)
    return float(np.abs(M - M.T).max() / scale)


def _check_square(M: np.ndarray, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {M.shape}")
    return M


def _psd_floor(M: np.ndarray) -> float:
    d = M.shape[0]
    return -1e-10 * max(float(np.trace(M)), 0.0) / d


@dataclass
class Gaussian:
    """Mean vector and symmetric positive semi-definite covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = _check_square(self.cov, "cov")
        if cov.shape[0] != self.mean.shape[0]:
            raise DimensionMismatch(
                f"mean has dimension {self.mean.shape[0]} but cov is {cov.shape}")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(cov))):
            raise NonFinite("Gaussian with non-finite entries")
        if _asymmetry(cov) > 1e-12:
            raise NonSymmetric(f"covariance asymmetry {_asymmetry(cov):.3e}")
        cov = symmetrize(cov)
        lam_min = np.linalg.eigvalsh(cov)[0]
        if lam_min < _psd_floor(cov):
            raise NonPSD(f"covariance has eigenvalue {lam_min:.3e}")
        self.cov = cov

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class JointGaussian:
    """Gaussian over a (state, data) pair, stored by blocks."""

    mean_v: np.ndarray
    mean_y: np.ndarray
    c_vv: np.ndarray
    c_vy: np.ndarray
    c_yy: np.ndarray

    def __post_init__(self):
        self.mean_v = np.atleast_1d(np.asarray(self.mean_v, dtype=float))
        self.mean_y = np.atleast_1d(np.asarray(self.mean_y, dtype=float))
        d_v, d_y = self.mean_v.shape[0], self.mean_y.shape[0]
        self.c_vv = symmetrize(_check_square(self.c_vv, "c_vv"))
        self.c_yy = symmetrize(_check_square(self.c_yy, "c_yy"))
        self.c_vy = np.asarray(self.c_vy, dtype=float).reshape(d_v, d_y)
        if self.c_vv.shape[0] != d_v or self.c_yy.shape[0] != d_y:
            raise DimensionMismatch("block shapes do not match the means")
        full = self.block()
        lam_min = np.linalg.eigvalsh(full)[0]
        if lam_min < _psd_floor(full):
            raise NonPSD(f"joint covariance has eigenvalue {lam_min:.3e}")

    @property
    def d_v(self) -> int:
        return self.mean_v.shape[0]

    @property
    def d_y(self) -> int:
        return self.mean_y.shape[0]

    def block(self) -> np.ndarray:
        return np.block([[self.c_vv, self.c_vy], [self.c_vy.T, self.c_yy]])

    def as_gaussian(self) -> Gaussian:
        return Gaussian(np.concatenate([self.mean_v, self.mean_y]), self.block())

    @classmethod
    def from_gaussian(cls, g: Gaussian, d_v: int) -> "JointGaussian":
        m, C = g.mean, g.cov
        return cls(m[:d_v], m[d_v:], C[:d_v, :d_v], C[:d_v, d_v:], C[d_v:, d_v:])


class Ensemble:
    """A d x J matrix of particles; column j is member j."""

    def __init__(self, members):
        X = np.asarray(members, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[1] < 1:
            raise DimensionMismatch(f"ensemble must be d x J, got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise NonFinite("ensemble has non-finite entries")
        self.members = X

    @property
    def dim(self) -> int:
        return self.members.shape[0]

    @property
    def size(self) -> int:
        return self.members.shape[1]

    def mean(self) -> np.ndarray:
        return self.members.mean(axis=1)

    def deviations(self) -> np.ndarray:
        return self.members - self.mean()[:, None]

    def __repr__(self):
        return f"Ensemble(d={self.dim}, J={self.size})"


EnsembleLike = Union[Ensemble, np.ndarray]


def _members(e: EnsembleLike) -> np.ndarray:
    return e.members if isinstance(e, Ensemble) else np.atleast_2d(np.asarray(e, float))


def _scale(J: int, scaling: str) -> float:
    if scaling == SCALING_J:
        return 1.0 / J
    if scaling == SCALING_J1:
        return 1.0 / (J - 1)
    raise ValueError(f"unknown scaling {scaling!r}; use {SCALING_J!r} or {SCALING_J1!r}")


def normalized_deviations(e: EnsembleLike, scaling: str = DEFAULT_SCALING) -> np.ndarray:
    """Deviations from the ensemble mean divided by sqrt(J) or sqrt(J-1).

    With X the returned matrix, X X^T is the empirical covariance.
    """
    X = _members(e)
    J = X.shape[1]
    if J < 2:
        raise TooFewMembers(f"need at least 2 members, got {J}")
    return (X - X.mean(axis=1, keepdims=True)) * np.sqrt(_scale(J, scaling))


def empirical_moments(e: EnsembleLike, scaling: str = DEFAULT_SCALING) -> Gaussian:
    X = _members(e)
    if X.shape[1] < 2:
        raise TooFewMembers(f"need at least 2 members, got {X.shape[1]}")
    A = normalized_deviations(X, scaling)
    return Gaussian(X.mean(axis=1), symmetrize(A @ A.T))


def cross_covariance(a: EnsembleLike, b: EnsembleLike,
                     scaling: str = DEFAULT_SCALING) -> np.ndarray:
    A, B = _members(a), _members(b)
    if A.shape[1] != B.shape[1]:
        raise MemberCountMismatch(f"{A.shape[1]} != {B.shape[1]} members")
    return normalized_deviations(A, scaling) @ normalized_deviations(B, scaling).T


@dataclass
class SqrtInfo:
    clipped: int
    eigenvalues: np.ndarray


def _sym_eig(M: np.ndarray, sym_tol: float):
    M = _check_square(M, "matrix")
    if _asymmetry(M) > sym_tol:
        raise NonSymmetric(f"asymmetry {_asymmetry(M):.3e} exceeds {sym_tol:.1e}")
    lam, Q = np.linalg.eigh(symmetrize(M))
    d = M.shape[0]
    cut = 1e-12 * max(float(np.trace(M)), 0.0) / d
    keep = lam > cut
    return lam, Q, keep


def _diagonal(M: np.ndarray):
    diag = np.diagonal(M)
    if np.count_nonzero(M) == np.count_nonzero(diag):
        return diag.copy()
    return None


def _diag_root(lam: np.ndarray) -> np.ndarray:
    cut = 1e-12 * float(lam.sum()) / lam.size
    return np.where(lam > cut, np.sqrt(np.maximum(lam, 0.0)), 0.0)


def psd_sqrt(M: np.ndarray, sym_tol: float = 1e-10, return_info: bool = False):
    """Symmetric square root with eigenvalues below 1e-12 trace/d set to zero."""
    M = _check_square(M, "matrix")
    lam = _diagonal(M)
    if lam is not None and not return_info and lam.min() >= 0:
        return np.diag(_diag_root(lam))
    lam, Q, keep = _sym_eig(M, sym_tol)
    root = np.where(keep, np.sqrt(np.where(keep, lam, 0.0)), 0.0)
    S = symmetrize((Q * root) @ Q.T)
    if return_info:
        return S, SqrtInfo(int(np.sum(~keep)), lam)
    return S


def psd_inv_sqrt(M: np.ndarray, sym_tol: float = 1e-10, return_info: bool = False):
    """Inverse symmetric square root restricted to the numerical range of M."""
    lam, Q, keep = _sym_eig(M, sym_tol)
    root = np.where(keep, 1.0 / np.sqrt(np.where(keep, lam, 1.0)), 0.0)
    S = symmetrize((Q * root) @ Q.T)
    if return_info:
        return S, SqrtInfo(int(np.sum(~keep)), lam)
    return S


def spd_solve(A: np.ndarray, B: np.ndarray, max_cond: float = 1e14) -> np.ndarray:
    """Solve A X = B for symmetric positive definite A.

    Cholesky first, retried once with jitter 1e-12 trace/d.  Matrices with
    condition number above max_cond are rejected.
    """
    A = symmetrize(_check_square(A, "matrix"))
    lam = np.linalg.eigvalsh(A)
    if lam[0] <= 0 or lam[-1] / lam[0] > max_cond:
        cond = np.inf if lam[0] <= 0 else lam[-1] / lam[0]
        raise SingularDataCovariance(f"condition number {cond:.3e}")
    try:
        c = sla.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        jitter = 1e-12 * np.trace(A) / A.shape[0]
        c = sla.cho_factor(A + jitter * np.eye(A.shape[0]), lower=True, check_finite=False)
    return sla.cho_solve(c, B, check_finite=False)


def spd_solve_batch(A: np.ndarray, B: np.ndarray, max_cond: float = 1e14) -> np.ndarray:
    """Solve A[i] X[i] = B[i] for a stack of symmetric positive definite matrices.

    Same conditioning rule as spd_solve; the solve itself is an LU factorization.
    """
    A = 0.5 * (A + np.swapaxes(A, -1, -2))
    lam = np.linalg.eigvalsh(A)
    lo, hi = lam[..., 0], lam[..., -1]
    bad = (lo <= 0) | (hi > max_cond * lo)
    if np.any(bad):
        i = int(np.flatnonzero(bad.ravel())[0])
        cond = np.inf if lo.ravel()[i] <= 0 else hi.ravel()[i] / lo.ravel()[i]
        raise SingularDataCovariance(f"condition number {cond:.3e} in batch entry {i}")
    return np.linalg.solve(A, B)


def condition_joint(j: JointGaussian, y_obs, pinv: bool = False,
                    pinv_rcond: float = 1e-12) -> Gaussian:
    """Law of the state given data y_obs under the joint Gaussian j."""
    y_obs = np.atleast_1d(np.asarray(y_obs, dtype=float))
    if y_obs.shape != j.mean_y.shape:
        raise DimensionMismatch(f"data shape {y_obs.shape} vs {j.mean_y.shape}")
    rhs = np.column_stack([y_obs - j.mean_y, j.c_vy.T])
    if pinv:
        sol = np.linalg.pinv(j.c_yy, rcond=pinv_rcond, hermitian=True) @ rhs
    else:
        sol = spd_solve(j.c_yy, rhs)
    mean = j.mean_v + j.c_vy @ sol[:, 0]
    cov = symmetrize(j.c_vv - j.c_vy @ sol[:, 1:])
    return Gaussian(mean, cov)


def _tag_int(part) -> int:
    # integers map to themselves, strings to a hash above 2**32 so the two never collide
    if isinstance(part, (int, np.integer)):
        if not 0 <= part < 2**32:
            raise ValueError("stream key integers must lie in [0, 2**32)")
        return int(part)
    return (1 << 32) | zlib.crc32(str(part).encode("utf-8"))


@dataclass(frozen=True)
class SeededStream:
    """Reproducible random stream addressed by a master seed and a key path.

    The key path is typically (phase tag, step index, member index); equal
    paths give identical draws and distinct paths give independent streams.
    """

    seed: int
    key: tuple = field(default_factory=tuple)

    def child(self, *parts) -> "SeededStream":
        return SeededStream(self.seed, self.key + tuple(parts))

    def spawn_key(self) -> tuple:
        return tuple(_tag_int(p) for p in self.key)

    def rng(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.spawn_key())
        return np.random.Generator(np.random.PCG64(ss))

    def normal(self, d: int, n: int) -> np.ndarray:
        """d x n standard normals; column j depends only on (key, j), not on n."""
        return self.rng().standard_normal((n, d)).T


def sample(g: Gaussian, n: int, s: SeededStream) -> Ensemble:
    xi = s.normal(g.dim, n)
    return Ensemble(g.mean[:, None] + psd_sqrt(g.cov) @ xi)


def gaussian_noise(cov: np.ndarray, n: int, s: SeededStream) -> np.ndarray:
    """d x n draws from N(0, cov)."""
    cov = _check_square(cov, "cov")
    lam = _diagonal(cov)
    if lam is not None and lam.min() >= 0:
        return _diag_root(lam)[:, None] * s.normal(cov.shape[0], n)
    return psd_sqrt(cov) @ s.normal(cov.shape[0], n)


def gaussian_noise_batch(cov: np.ndarray, n: int, streams: Sequence[SeededStream]) -> np.ndarray:
    """d x B x n draws; slice [:, b] equals gaussian_noise(cov, n, streams[b]) up to rounding."""
    cov = _check_square(cov, "cov")
    d = cov.shape[0]
    Z = np.empty((d, len(streams), n))
    for b, s in enumerate(streams):
        Z[:, b] = s.normal(d, n)
    lam = _diagonal(cov)
    if lam is not None and lam.min() >= 0:
        Z *= _diag_root(lam)[:, None, None]
        return Z
    return np.einsum("ik,kbn->ibn", psd_sqrt(cov), Z)


def moment_matched_normals(d: int, n: int, s: SeededStream) -> np.ndarray:
    """d x n standard normal draws whitened to exact zero mean and identity covariance (1/n)."""
    if n <= d:
        raise TooFewMembers(f"moment matching needs more than {d} samples")
    Z = s.normal(d, n)
    Z = Z - Z.mean(axis=1, keepdims=True)
    C = Z @ Z.T / n
    Lc = np.linalg.cholesky(C)
    return sla.solve_triangular(Lc, Z, lower=True)


def as_ensemble(x: EnsembleLike) -> Ensemble:
    return x if isinstance(x, Ensemble) else Ensemble(x)


def stack_gaussians(gs: Sequence[Gaussian]):
    return np.array([g.mean for g in gs]), np.array([g.cov for g in gs])
