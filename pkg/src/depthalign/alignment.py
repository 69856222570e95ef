"""Test-time alignment: reverse sampling with hard-constraint optimization loops.

At regular reverse steps the current clean estimate ``z0(z_t)`` is optimized
against the sparse measurements and regularizers, then re-noised to the
current noise level and sampling continues. Soft-guidance (DPS-style) and
unguided sampling are provided as baselines with identical seeding.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .diffusion import Codec, IdentityCodec, NoiseSchedule, ddim_step, forward_noise, timesteps
from .errors import DimensionError, DivergenceError, ParameterError
from .fields import Normalizer, SparseDepth
from .losses import LossConfig, edge_weights, loss_depth, loss_depth_l2, loss_rssim, loss_smooth

__all__ = [
    "AlignmentConfig",
    "Completion",
    "MODES",
    "optimize_x0",
    "remap",
    "guided_step",
    "align",
    "guided_sample",
    "naive_sample",
    "run_mode",
    "optimization_steps",
]

logger = logging.getLogger(__name__)

MODES = ("naive", "guided", "aligned")


@dataclass
class AlignmentConfig:
    num_steps: int = 50
    start_fraction: float = 1.0 / 3.0
    interval: float = 5
    inner_iters: int = 200
    inner_lr: float = 0.05
    optimizer: str = "adam"
    lr_decay: str = "cosine"
    use_prior_modes: bool = True
    residual_lr_scale: float = 0.05
    momentum: float = 0.9
    guidance_weight: float = 10.0
    eta: float = 0.0
    seed: int = 0
    measurement_only: bool = False
    measurement_loss: str = "l1"
    downsample: int = 1
    loss_cfg: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.num_steps < 1:
            raise ParameterError("num_steps must be >= 1")
        if not 0 <= self.start_fraction < 1:
            raise ParameterError("start_fraction must lie in [0, 1)")
        if not self.interval >= 1:
            raise ParameterError("interval must be >= 1")
        if self.inner_iters < 0:
            raise ParameterError("inner_iters must be >= 0")
        if self.optimizer not in ("adam", "momentum"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_decay not in ("none", "cosine"):
            raise ParameterError(f"unknown lr decay {self.lr_decay!r}")
        if self.measurement_loss not in ("l1", "l2"):
            raise ParameterError(f"unknown measurement loss {self.measurement_loss!r}")
        if not self.residual_lr_scale >= 0:
            raise ParameterError("residual_lr_scale must be >= 0")
        if self.downsample not in (1, 2):
            raise ParameterError("downsample must be 1 or 2")

    @property
    def zeta(self) -> float:
        return self.guidance_weight


@dataclass
class Completion:
    depth: np.ndarray
    n_clamped: int = 0
    normalizer: Normalizer | None = None
    loops: list = field(default_factory=list)


def optimization_steps(num_steps: int, start_fraction: float, interval: float) -> list[int]:
    """Indices into the reverse-step sequence at which an optimization loop runs.

    Loops start at ``ceil(start_fraction * num_steps)``, repeat every
    ``interval`` steps, and always include the final step.
    """
    start = math.ceil(start_fraction * num_steps - 1e-9)
    steps = [] if math.isinf(interval) else list(range(start, num_steps, int(interval)))
    if math.isinf(interval) and start < num_steps:
        steps = [start]
    if num_steps - 1 not in steps:
        steps.append(num_steps - 1)
    return steps


def _objective(cfg: AlignmentConfig, guidance, d_struct, weights):
    data_term = loss_depth_l2 if cfg.measurement_loss == "l2" else loss_depth
    lc = cfg.loss_cfg
    if cfg.measurement_only:
        return data_term

    def fn(x, y):
        out = data_term(x, y)
        if lc.lambda_smooth > 0:
            out = out + loss_smooth(x, guidance, weights=weights).scaled(lc.lambda_smooth)
        if lc.lambda_rssim > 0:
            out = out + loss_rssim(d_struct, x, lc).scaled(lc.lambda_rssim)
        return out

    return fn


def optimize_x0(
    z0_init,
    y: SparseDepth,
    guidance,
    d_struct,
    cfg: AlignmentConfig,
    codec: Codec | None = None,
    regularizer=None,
    modes=None,
):
    """Minimize the test-time objective over the clean estimate.

    ``y`` must be expressed in the same units as ``codec.decode(z0)``.
    ``regularizer`` is an optional ``(weight, fn)`` pair with ``fn(z)``
    returning ``(value, grad)``, added in state space.

    ``modes`` is an optional ``(k, H, W)`` stack of global directions. The
    estimate is then parameterized as ``z0 + sum_k c_k modes_k + w`` and the
    optimizer steps on ``(c, w)`` jointly, which lets a handful of sparse
    measurements move the whole field along the prior's own degrees of
    freedom. The objective is unchanged; only the descent path differs.
    """
    codec = codec or IdentityCodec()
    z = np.array(z0_init, dtype=np.float64)
    if z.shape != y.shape:
        raise DimensionError(f"estimate {z.shape} vs measurement {y.shape}")
    if cfg.inner_iters == 0:
        return z
    weights = None
    if not cfg.measurement_only and cfg.loss_cfg.lambda_smooth > 0:
        weights = edge_weights(guidance)
    objective = _objective(cfg, guidance, d_struct, weights)

    base = z
    modes = None if modes is None else np.asarray(modes, dtype=np.float64).reshape(-1, *z.shape)
    k = 0 if modes is None else modes.shape[0]
    params = np.zeros(k + z.size)

    def unpack(p):
        out = base + p[k:].reshape(z.shape)
        if k:
            out = out + np.tensordot(p[:k], modes, axes=1)
        return out

    # per-pixel residual steps are scaled relative to the global mode steps
    step_scale = np.ones_like(params)
    if k:
        step_scale[k:] = cfg.residual_lr_scale
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    for it in range(cfg.inner_iters):
        z = unpack(params)
        res = objective(codec.decode(z), y)
        value, grad = res.value, codec.decode_vjp(z, res.grad)
        if regularizer is not None:
            w, fn = regularizer
            rv, rg = fn(z)
            value, grad = value + w * rv, grad + w * rg
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise DivergenceError("non-finite loss during inner optimization", it)
        g = grad.ravel()
        if k:
            g = np.concatenate([modes.reshape(k, -1) @ g, g])
        lr = cfg.inner_lr
        if cfg.lr_decay == "cosine":
            lr *= 0.5 * (1.0 + np.cos(np.pi * it / cfg.inner_iters))
        if cfg.optimizer == "adam":
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g**2
            mhat = m / (1 - b1 ** (it + 1))
            vhat = v / (1 - b2 ** (it + 1))
            params -= lr * step_scale * mhat / (np.sqrt(vhat) + adam_eps)
        else:
            m = cfg.momentum * m + g
            params -= lr * step_scale * m
    z = unpack(params)
    return z


def remap(z0_hat, t: int, schedule: NoiseSchedule, seed=None) -> np.ndarray:
    """Re-noise a clean estimate to timestep ``t`` with fresh Gaussian noise."""
    z0_hat = np.asarray(z0_hat, dtype=np.float64)
    if not 1 <= t <= schedule.T:
        raise ParameterError(f"remap timestep {t} outside [1, {schedule.T}]")
    rng = np.random.default_rng(seed)
    return forward_noise(z0_hat, t, rng.standard_normal(z0_hat.shape), schedule)


def guided_step(z_t, t: int, y: SparseDepth, prior, schedule: NoiseSchedule, zeta: float, codec: Codec | None = None):
    """Move ``z_t`` down the gradient of ``||y - A(decode(z0(z_t)))||^2``.

    The gradient is propagated through the codec and the denoiser: via
    ``prior.vjp`` when the prior provides one, otherwise through the Tweedie
    map with the noise prediction held fixed (Jacobian ``1 / sqrt(abar)``).
    """
    codec = codec or IdentityCodec()
    z_t = np.asarray(z_t, dtype=np.float64)
    if zeta == 0:
        return z_t.copy()
    z0 = prior.denoise(z_t, t, schedule)
    x = codec.decode(z0)
    g_x = np.where(y.mask, -2.0 * (y.values - x), 0.0)
    g_z0 = codec.decode_vjp(z0, g_x)
    vjp = getattr(prior, "vjp", None)
    if vjp is not None:
        g = vjp(z_t, t, schedule, g_z0)
    else:
        g = g_z0 / np.sqrt(schedule.abar(t))
    return z_t - zeta * g


def _prepare(y: SparseDepth, guidance, d_struct, normalizer):
    guidance = np.asarray(guidance, dtype=np.float64)
    d_struct = np.asarray(d_struct, dtype=np.float64)
    if y.count == 0:
        raise ParameterError("no sparse measurements")
    if guidance.shape[:2] != y.shape or d_struct.shape != y.shape:
        raise DimensionError(
            f"shapes differ: sparse {y.shape}, guidance {guidance.shape}, relative {d_struct.shape}"
        )
    rows, cols, vals = y.points()
    norm = normalizer or Normalizer.fit(vals)
    return y.map_values(norm.to_unit), guidance, d_struct, norm


def _finish(z, codec, norm, loops=None) -> Completion:
    depth = norm.from_unit(codec.decode(z))
    if not np.all(np.isfinite(depth)):
        raise DivergenceError("non-finite depth in sampler output", -1)
    neg = depth < 0
    n_neg = int(neg.sum())
    if n_neg:
        logger.warning("clamped %d negative depth pixels to 0", n_neg)
        depth = np.where(neg, 0.0, depth)
    return Completion(depth, n_neg, norm, loops or [])


def naive_sample(prior, shape, schedule, cfg: AlignmentConfig, codec=None, normalizer=None) -> Completion:
    """Unguided reverse sampling, mapped to metric units by ``normalizer``."""
    codec = codec or IdentityCodec()
    rng = np.random.default_rng(cfg.seed)
    z = rng.standard_normal(shape)
    ts = timesteps(schedule.T, cfg.num_steps)
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        z0 = prior.denoise(z, int(t), schedule)
        z = ddim_step(z, int(t), t_prev, z0, schedule, eta=cfg.eta, seed=rng)
    return _finish(z, codec, normalizer or Normalizer(-1.0, 1.0))


def guided_sample(prior, y: SparseDepth, guidance, d_struct, schedule, cfg: AlignmentConfig, codec=None, normalizer=None):
    """Soft measurement guidance applied at every reverse step.

    The step weight is modulated as ``zeta_t = guidance_weight * abar_t / 2``,
    which corrects at most the full residual of a measured pixel per step.
    """
    codec = codec or IdentityCodec()
    yn, guidance, d_struct, norm = _prepare(y, guidance, d_struct, normalizer)
    rng = np.random.default_rng(cfg.seed)
    z = rng.standard_normal(y.shape)
    ts = timesteps(schedule.T, cfg.num_steps)
    for i, t in enumerate(ts):
        t, t_prev = int(t), int(ts[i + 1]) if i + 1 < len(ts) else 0
        z = guided_step(z, t, yn, prior, schedule, cfg.zeta * schedule.abar(t) / 2.0, codec)
        z0 = prior.denoise(z, t, schedule)
        z = ddim_step(z, t, t_prev, z0, schedule, eta=cfg.eta, seed=rng)
    return _finish(z, codec, norm)


def align(prior, y: SparseDepth, guidance, d_struct, schedule: NoiseSchedule, cfg: AlignmentConfig, codec=None, normalizer=None) -> Completion:
    """Complete dense metric depth by test-time alignment.

    Measurements are mapped to the sampler's ``[-1, 1]`` range using their own
    min and max (or ``normalizer``). The returned depth has negatives clamped
    to zero; ``Completion.n_clamped`` counts them.
    """
    codec = codec or IdentityCodec()
    if cfg.downsample == 2:
        return _align_downsampled(prior, y, guidance, d_struct, schedule, cfg, codec, normalizer)
    yn, guidance, d_struct, norm = _prepare(y, guidance, d_struct, normalizer)
    rng = np.random.default_rng(cfg.seed)
    z = rng.standard_normal(y.shape)
    ts = timesteps(schedule.T, cfg.num_steps)
    n = len(ts)
    loop_at = set(optimization_steps(n, cfg.start_fraction, cfg.interval)) if cfg.inner_iters > 0 else set()
    loops = []
    modes = getattr(prior, "modes", None) if cfg.use_prior_modes else None
    for i, t in enumerate(ts):
        t, t_prev = int(t), int(ts[i + 1]) if i + 1 < n else 0
        z0 = prior.denoise(z, t, schedule)
        if i in loop_at:
            before = loss_depth(codec.decode(z0), yn).value
            try:
                z0 = optimize_x0(z0, yn, guidance, d_struct, cfg, codec, modes=modes)
            except DivergenceError as exc:
                raise DivergenceError(f"alignment loop at step {i} (t={t}) diverged", exc.iteration) from exc
            after = loss_depth(codec.decode(z0), yn).value
            loops.append({"step": i, "t": t, "loss_depth_before": before, "loss_depth_after": after})
            if i == n - 1:
                z = z0
                break
            z = remap(z0, t, schedule, rng)
            z0 = prior.denoise(z, t, schedule)
        z = ddim_step(z, t, t_prev, z0, schedule, eta=cfg.eta, seed=rng)
    return _finish(z, codec, norm, loops)


def _downsample2(a, reduce=np.mean):
    H, W = a.shape[:2]
    h, w = H // 2, W // 2
    blocks = a[: 2 * h, : 2 * w].reshape(h, 2, w, 2, *a.shape[2:])
    return reduce(blocks, axis=(1, 3))


def _align_downsampled(prior, y, guidance, d_struct, schedule, cfg, codec, normalizer):
    from scipy.ndimage import map_coordinates

    H, W = y.shape
    counts = _downsample2(y.mask.astype(np.float64), np.sum)
    sums = _downsample2(y.values, np.sum)
    small_y = SparseDepth(np.where(counts > 0, sums / np.maximum(counts, 1), 0.0), counts > 0)
    small_rel = _downsample2(np.asarray(d_struct, dtype=np.float64))
    small_guid = _downsample2(np.asarray(guidance, dtype=np.float64))
    small_prior = prior.rescaled(small_rel) if hasattr(prior, "rescaled") else prior
    sub = replace(cfg, downsample=1)
    res = align(small_prior, small_y, small_guid, small_rel, schedule, sub, codec, normalizer)
    h, w = res.depth.shape
    rr = (np.arange(H) + 0.5) / 2 - 0.5
    cc = (np.arange(W) + 0.5) / 2 - 0.5
    grid = np.meshgrid(np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1), indexing="ij")
    up = map_coordinates(res.depth, grid, order=1, mode="nearest")
    return Completion(up, res.n_clamped, res.normalizer, res.loops)


def run_mode(mode: str, prior, y: SparseDepth, guidance, d_struct, schedule, cfg: AlignmentConfig, codec=None, normalizer=None) -> Completion:
    """Dispatch to one of the three sampling methods with shared seeding."""
    if mode == "naive":
        if normalizer is None:
            _, _, _, normalizer = _prepare(y, guidance, d_struct, None)
        return naive_sample(prior, y.shape, schedule, cfg, codec, normalizer)
    if mode == "guided":
        return guided_sample(prior, y, guidance, d_struct, schedule, cfg, codec, normalizer)
    if mode == "aligned":
        return align(prior, y, guidance, d_struct, schedule, cfg, codec, normalizer)
    raise ParameterError(f"unknown mode {mode!r}; expected one of {MODES}")
