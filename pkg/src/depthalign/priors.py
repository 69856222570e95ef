"""Analytic depth priors with closed-form denoisers.

``AffineSubspacePrior`` models ``z0 = a * D_r + b + N(0, sigma_p^2 I)`` with a
flat prior on ``(a, b)``, so its posterior mean is exactly equivariant to the
affine ambiguity of relative depth. ``GmrfPrior`` is a zero-mean Gaussian
Markov random field whose denoiser is a sparse SPD solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from .diffusion import NoiseSchedule
from .errors import DegenerateError, DimensionError, NumericalError, ParameterError, SingularityError

__all__ = [
    "AffineSubspacePrior",
    "GmrfPrior",
    "affine_subspace_denoise",
    "gmrf_denoise",
    "grid_laplacian",
    "score_from_denoise",
]


@dataclass
class AffineSubspacePrior:
    reference: np.ndarray
    sigma_p: float = 0.01
    basis: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.sigma_p > 0:
            raise ParameterError("sigma_p must be positive")
        r = np.asarray(self.reference, dtype=np.float64)
        if not np.all(np.isfinite(r)):
            raise ParameterError("reference must be finite")
        self.reference = r
        n = r.size
        ones = np.full(n, 1.0 / np.sqrt(n))
        centered = r.ravel() - r.mean()
        norm = np.linalg.norm(centered)
        if norm == 0.0:
            raise DegenerateError("reference depth is constant")
        self.basis = np.stack([centered / norm, ones])  # (2, n), orthonormal rows

    @property
    def shape(self):
        return self.reference.shape

    @property
    def modes(self) -> np.ndarray:
        """The subspace basis scaled to unit per-pixel RMS, shape ``(2, H, W)``."""
        return self.basis.reshape(2, *self.shape) * np.sqrt(self.reference.size)

    def rescaled(self, reference) -> "AffineSubspacePrior":
        """The same prior built on a resampled reference field."""
        return AffineSubspacePrior(reference, self.sigma_p)

    def project(self, z: np.ndarray) -> np.ndarray:
        """Orthogonal projection onto ``span{D_r, 1}``."""
        flat = z.ravel()
        return (self.basis.T @ (self.basis @ flat)).reshape(z.shape)

    def shrinkage(self, abar: float) -> float:
        s2 = self.sigma_p**2
        return np.sqrt(abar) * s2 / (abar * s2 + 1.0 - abar)

    def denoise(self, z_t, t, schedule):
        return affine_subspace_denoise(z_t, t, schedule, self)

    def vjp(self, z_t, t, schedule, v):
        # the denoiser is linear with a symmetric Jacobian
        ab = schedule.abar(t)
        v = np.asarray(v, dtype=np.float64)
        pv = self.project(v)
        return pv / np.sqrt(ab) + self.shrinkage(ab) * (v - pv)


def affine_subspace_denoise(z_t, t: int, schedule: NoiseSchedule, prior: AffineSubspacePrior) -> np.ndarray:
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_t.shape != prior.shape:
        raise DimensionError(f"z_t shape {z_t.shape} != reference shape {prior.shape}")
    ab = schedule.abar(t)
    if ab <= 0.0:
        raise SingularityError(f"alpha_bar is zero at t={t}")
    pz = prior.project(z_t)
    return pz / np.sqrt(ab) + prior.shrinkage(ab) * (z_t - pz)


def grid_laplacian(shape) -> sp.csr_matrix:
    """Graph Laplacian of the 4-neighbourhood grid, row-major pixel order."""
    H, W = shape
    idx = np.arange(H * W).reshape(H, W)
    rows = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    cols = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    ones = np.ones(rows.size)
    adj = sp.coo_matrix((ones, (rows, cols)), shape=(H * W, H * W))
    adj = (adj + adj.T).tocsr()
    deg = np.asarray(adj.sum(axis=1)).ravel()
    return (sp.diags(deg) - adj).tocsr()


@dataclass
class GmrfPrior:
    """Zero-mean Gaussian with precision ``lambda_s * L + eps_reg * I``."""

    lambda_s: float = 1.0
    eps_reg: float = 1e-2
    rtol: float = 1e-10
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if self.lambda_s < 0:
            raise ParameterError("lambda_s must be >= 0")
        if not self.eps_reg > 0:
            raise ParameterError("eps_reg must be > 0")

    def laplacian(self, shape) -> sp.csr_matrix:
        shape = tuple(shape)
        if shape not in self._cache:
            self._cache[shape] = grid_laplacian(shape)
        return self._cache[shape]

    def precision(self, shape) -> sp.csr_matrix:
        n = shape[0] * shape[1]
        return (self.lambda_s * self.laplacian(shape) + self.eps_reg * sp.identity(n, format="csr")).tocsr()

    def energy(self, x):
        """``0.5 x^T Lambda x`` and its gradient."""
        x = np.asarray(x, dtype=np.float64)
        g = (self.precision(x.shape) @ x.ravel()).reshape(x.shape)
        return 0.5 * float(np.vdot(x, g)), g

    def solve(self, rhs: np.ndarray, shift: float) -> np.ndarray:
        """Solve ``(Lambda + shift I) x = rhs`` by Jacobi-preconditioned CG."""
        shape = rhs.shape
        n = rhs.size
        A = self.precision(shape) + shift * sp.identity(n, format="csr")
        inv_diag = 1.0 / A.diagonal()
        M = LinearOperator((n, n), matvec=lambda v: inv_diag * v, dtype=np.float64)
        b = rhs.ravel()
        if not np.any(b):
            return np.zeros(shape)
        x, info = cg(A, b, rtol=self.rtol, atol=0.0, maxiter=10 * n, M=M)
        if info != 0:
            raise NumericalError(f"conjugate gradients did not converge (info={info})")
        return x.reshape(shape)

    def denoise(self, z_t, t, schedule):
        return gmrf_denoise(z_t, t, schedule, self)

    def vjp(self, z_t, t, schedule, v):
        ab = schedule.abar(t)
        v = np.asarray(v, dtype=np.float64)
        if ab >= 1.0:
            return v.copy()
        return self.solve(np.sqrt(ab) / (1.0 - ab) * v, ab / (1.0 - ab))


def gmrf_denoise(z_t, t: int, schedule: NoiseSchedule, prior: GmrfPrior) -> np.ndarray:
    z_t = np.asarray(z_t, dtype=np.float64)
    ab = schedule.abar(t)
    if ab >= 1.0:
        return z_t.copy()
    snr = ab / (1.0 - ab)
    return prior.solve(np.sqrt(ab) / (1.0 - ab) * z_t, snr)


def score_from_denoise(z_t, t: int, z0_hat, schedule: NoiseSchedule) -> np.ndarray:
    """Score of the noisy marginal implied by a posterior-mean denoiser."""
    ab = schedule.abar(t)
    if ab >= 1.0:
        raise SingularityError(f"score undefined at alpha_bar = 1 (t={t})")
    return (np.sqrt(ab) * np.asarray(z0_hat) - np.asarray(z_t)) / (1.0 - ab)
