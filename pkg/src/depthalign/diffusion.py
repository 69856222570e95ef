"""Noise schedules, forward noising, Tweedie estimates and DDIM reverse sampling.

All fields are plain ``float64`` arrays of shape ``(H, W)``. Timesteps are
integers in ``[0, T]`` where ``t = 0`` denotes clean data (``alpha_bar = 1``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from .errors import DimensionError, OrderingError, ParameterError, SingularityError

__all__ = [
    "NoiseSchedule",
    "Codec",
    "IdentityCodec",
    "PriorModel",
    "make_schedule",
    "timesteps",
    "forward_noise",
    "tweedie_x0",
    "implied_eps",
    "ddim_step",
    "reverse_sample",
    "reconstruct",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete variance schedule.

    ``alpha[i]`` and ``alpha_bar[i]`` hold the values for timestep ``t = i + 1``.
    """

    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.alpha)

    def abar(self, t: int) -> float:
        """Cumulative signal level at timestep ``t``; 1 at ``t = 0``."""
        t = int(t)
        if t < 0 or t > self.T:
            raise ParameterError(f"timestep {t} outside [0, {self.T}]")
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])


def make_schedule(
    T: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    kind: str = "linear",
) -> NoiseSchedule:
    """Build a DDPM-style schedule with linearly or sqrt-linearly spaced betas."""
    if T < 1:
        raise ParameterError("T must be >= 1")
    if not (0.0 <= beta_start <= beta_end < 1.0):
        raise ParameterError("need 0 <= beta_start <= beta_end < 1")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind in ("scaled-linear", "scaled_linear"):
        betas = np.linspace(beta_start**0.5, beta_end**0.5, T, dtype=np.float64) ** 2
    else:
        raise ParameterError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - betas
    return NoiseSchedule(alpha=alpha, alpha_bar=np.cumprod(alpha))


def timesteps(T: int, num_steps: int, t_start: int | None = None) -> np.ndarray:
    """Uniformly spaced, strictly decreasing timesteps from ``t_start`` down to 1."""
    if num_steps < 1:
        raise ParameterError("num_steps must be >= 1")
    t_start = T if t_start is None else int(t_start)
    if t_start < 1:
        return np.zeros(0, dtype=int)
    ts = np.round(np.linspace(t_start, 1, min(num_steps, t_start))).astype(int)
    return np.unique(ts)[::-1]


def _check_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape {a.shape} != {b.shape}")


def forward_noise(z0, t: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Sample ``z_t = sqrt(abar) z0 + sqrt(1 - abar) eps``."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _check_shape(z0, eps, "forward_noise")
    ab = schedule.abar(t)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def tweedie_x0(z_t, t: int, eps_pred, schedule: NoiseSchedule) -> np.ndarray:
    """Posterior-mean estimate of the clean field from a noise prediction."""
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    _check_shape(z_t, eps_pred, "tweedie_x0")
    ab = schedule.abar(t)
    if ab <= 0.0:
        raise SingularityError(f"alpha_bar is zero at t={t}")
    return (z_t - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)


def implied_eps(z_t, t: int, z0_hat, schedule: NoiseSchedule) -> np.ndarray:
    """Noise prediction consistent with a denoiser output (zero when noiseless)."""
    ab = schedule.abar(t)
    if ab >= 1.0:
        return np.zeros_like(np.asarray(z_t, dtype=np.float64))
    return (np.asarray(z_t) - np.sqrt(ab) * np.asarray(z0_hat)) / np.sqrt(1.0 - ab)


def ddim_step(
    z_t,
    t: int,
    t_prev: int,
    z0_hat,
    schedule: NoiseSchedule,
    eta: float = 0.0,
    seed=None,
) -> np.ndarray:
    """One DDIM transition from ``t`` to ``t_prev``.

    ``eta = 0`` is deterministic; ``eta = 1`` matches DDPM ancestral noise.
    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if t_prev > t:
        raise OrderingError(f"t_prev={t_prev} must not exceed t={t}")
    if not 0.0 <= eta <= 1.0:
        raise ParameterError("eta must lie in [0, 1]")
    z_t = np.asarray(z_t, dtype=np.float64)
    z0_hat = np.asarray(z0_hat, dtype=np.float64)
    _check_shape(z_t, z0_hat, "ddim_step")
    if t_prev == t:
        return z_t.copy()
    ab, ab_prev = schedule.abar(t), schedule.abar(t_prev)
    eps = implied_eps(z_t, t, z0_hat, schedule)
    sigma = 0.0
    if eta > 0.0 and ab < 1.0:
        sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev))
    out = np.sqrt(ab_prev) * z0_hat + np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps
    if sigma > 0.0:
        rng = np.random.default_rng(seed)
        out = out + sigma * rng.standard_normal(z_t.shape)
    return out


@runtime_checkable
class Codec(Protocol):
    """Map between the sampler's state space and depth space."""

    def encode(self, x: np.ndarray) -> np.ndarray: ...

    def decode(self, z: np.ndarray) -> np.ndarray: ...

    def decode_vjp(self, z: np.ndarray, grad_x: np.ndarray) -> np.ndarray: ...


class IdentityCodec:
    """Pixel-space codec: both maps are the identity."""

    def encode(self, x):
        return np.asarray(x, dtype=np.float64)

    def decode(self, z):
        return np.asarray(z, dtype=np.float64)

    def decode_vjp(self, z, grad_x):
        return np.asarray(grad_x, dtype=np.float64)


@runtime_checkable
class PriorModel(Protocol):
    """A denoiser returning ``E[z0 | z_t]``.

    Implementations may also provide ``vjp(z_t, t, schedule, v)``, the
    vector-Jacobian product of ``denoise`` with respect to ``z_t``; guided
    sampling uses it when present.
    """

    def denoise(self, z_t: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray: ...


def _prior_shape(prior, shape):
    if shape is not None:
        return tuple(shape)
    s = getattr(prior, "shape", None)
    if s is None:
        raise ParameterError("shape is required for priors without a reference field")
    return tuple(s)


def _sample_from(prior, z, ts, schedule, eta, rng):
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        z0_hat = prior.denoise(z, int(t), schedule)
        z = ddim_step(z, int(t), t_prev, z0_hat, schedule, eta=eta, seed=rng)
    return z


def reverse_sample(
    prior: PriorModel,
    schedule: NoiseSchedule,
    num_steps: int = 50,
    seed=0,
    shape=None,
    codec: Codec | None = None,
    eta: float = 0.0,
) -> np.ndarray:
    """Unconditional DDIM sampling from unit-Gaussian noise at ``t = T``."""
    codec = codec or IdentityCodec()
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(_prior_shape(prior, shape))
    ts = timesteps(schedule.T, num_steps)
    return codec.decode(_sample_from(prior, z, ts, schedule, eta, rng))


def reconstruct(
    prior: PriorModel,
    x0,
    t_inv: int,
    schedule: NoiseSchedule,
    seed=0,
    num_steps: int = 50,
    codec: Codec | None = None,
    eta: float = 0.0,
) -> np.ndarray:
    """Noise ``x0`` to ``t_inv`` and denoise it back with the prior alone.

    The number of reverse steps is ``num_steps`` scaled by ``t_inv / T``, so a
    full-range reconstruction uses the same grid density as ``reverse_sample``.
    """
    codec = codec or IdentityCodec()
    t_inv = int(t_inv)
    if not 0 <= t_inv <= schedule.T:
        raise ParameterError(f"t_inv={t_inv} outside [0, {schedule.T}]")
    z0 = codec.encode(np.asarray(x0, dtype=np.float64))
    if t_inv == 0:
        return codec.decode(z0)
    rng = np.random.default_rng(seed)
    z = forward_noise(z0, t_inv, rng.standard_normal(z0.shape), schedule)
    n = max(1, int(np.ceil(num_steps * t_inv / schedule.T)))
    ts = timesteps(schedule.T, n, t_start=t_inv)
    return codec.decode(_sample_from(prior, z, ts, schedule, eta, rng))
