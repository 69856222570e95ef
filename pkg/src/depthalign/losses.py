"""Test-time objectives with analytic gradients.

Each loss returns a :class:`LossValueGrad` whose ``grad`` is the gradient of
``value`` with respect to the predicted depth field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateError, DimensionError, ParameterError
from .fields import SparseDepth

__all__ = [
    "LossConfig",
    "LossValueGrad",
    "loss_depth",
    "loss_depth_l2",
    "loss_smooth",
    "loss_rssim",
    "total_loss",
    "edge_weights",
]


@dataclass
class LossConfig:
    lambda_smooth: float = 0.2
    lambda_rssim: float = 0.3
    rssim_window: int = 7
    rssim_C: float = 1e-4
    rssim_stride: int | None = None  # None -> window size

    def __post_init__(self):
        if self.lambda_smooth < 0 or self.lambda_rssim < 0:
            raise ParameterError("loss weights must be >= 0")
        if self.rssim_window < 3 or self.rssim_window % 2 == 0:
            raise ParameterError("rssim_window must be odd and >= 3")
        if not self.rssim_C > 0:
            raise ParameterError("rssim_C must be > 0")
        if self.rssim_stride is not None and self.rssim_stride < 1:
            raise ParameterError("rssim_stride must be >= 1")

    @property
    def stride(self) -> int:
        return self.rssim_window if self.rssim_stride is None else self.rssim_stride


@dataclass
class LossValueGrad:
    value: float
    grad: np.ndarray

    def __add__(self, other: "LossValueGrad") -> "LossValueGrad":
        return LossValueGrad(self.value + other.value, self.grad + other.grad)

    def scaled(self, w: float) -> "LossValueGrad":
        return LossValueGrad(w * self.value, w * self.grad)


def _measured(pred, y: SparseDepth):
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != y.shape:
        raise DimensionError(f"prediction {pred.shape} vs measurement {y.shape}")
    n = y.count
    if n == 0:
        raise ParameterError("no measured pixels")
    return pred, n


def loss_depth(pred, y: SparseDepth) -> LossValueGrad:
    """Mean absolute error on the measured pixels."""
    pred, n = _measured(pred, y)
    resid = np.where(y.mask, y.values - pred, 0.0)
    grad = -np.sign(resid) / n
    return LossValueGrad(float(np.abs(resid).sum() / n), grad)


def loss_depth_l2(pred, y: SparseDepth) -> LossValueGrad:
    """``(1 / 2|Omega|) * sum (y - pred)^2``; the quadratic form of :func:`loss_depth`."""
    pred, n = _measured(pred, y)
    resid = np.where(y.mask, y.values - pred, 0.0)
    return LossValueGrad(float(0.5 * np.sum(resid**2) / n), -resid / n)


def edge_weights(guidance) -> tuple[np.ndarray, np.ndarray]:
    """``exp(-|dI/dx|)`` of shape (H, W-1) and ``exp(-|dI/dy|)`` of shape (H-1, W)."""
    img = np.asarray(guidance, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=-1)
    wx = np.exp(-np.abs(np.diff(img, axis=1)))
    wy = np.exp(-np.abs(np.diff(img, axis=0)))
    return wx, wy


def loss_smooth(pred, guidance, weights=None) -> LossValueGrad:
    """Edge-aware L1 penalty on forward differences of ``pred``.

    ``weights`` may carry precomputed :func:`edge_weights` to skip recomputation.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if weights is None:
        if np.shape(guidance)[:2] != pred.shape:
            raise DimensionError(f"guidance {np.shape(guidance)} vs prediction {pred.shape}")
        weights = edge_weights(guidance)
    wx, wy = weights
    n = pred.size
    dx = np.diff(pred, axis=1)
    dy = np.diff(pred, axis=0)
    value = (np.sum(wx * np.abs(dx)) + np.sum(wy * np.abs(dy))) / n
    sx = wx * np.sign(dx) / n
    sy = wy * np.sign(dy) / n
    grad = np.zeros_like(pred)
    grad[:, 1:] += sx
    grad[:, :-1] -= sx
    grad[1:, :] += sy
    grad[:-1, :] -= sy
    return LossValueGrad(float(value), grad)


def _standardize(d, mask):
    vals = d[mask]
    mu = vals.mean()
    sd = vals.std()
    if not sd > 1e-12 * max(1.0, np.abs(vals).max()):
        raise DegenerateError("input has zero variance")
    u = np.where(mask, (d - mu) / sd, 0.0)
    return u, sd


def _unstandardize_grad(g, u, sd, mask):
    # backward pass of u = (d - mean) / std over the masked pixels
    g = np.where(mask, g, 0.0)
    n = mask.sum()
    gm = g.sum() / n
    gu = (g * u).sum() / n
    return np.where(mask, (g - gm - u * gu) / sd, 0.0)


def _windows(a, win, stride):
    return sliding_window_view(a, (win, win))[::stride, ::stride]


def _scatter_windows(gw, shape, win, stride):
    nh, nw = gw.shape[:2]
    out = np.zeros(shape)
    if stride == win:
        out[: nh * win, : nw * win] = gw.transpose(0, 2, 1, 3).reshape(nh * win, nw * win)
        return out
    for i in range(nh):
        for j in range(nw):
            out[i * stride : i * stride + win, j * stride : j * stride + win] += gw[i, j]
    return out


def _rssim_core(u1, u2, win, stride, C):
    """Windowed loss and its gradients with respect to both standardized fields."""
    if min(u1.shape) < win:
        raise ParameterError(f"image smaller than the {win}x{win} R-SSIM window")
    w1 = _windows(u1, win, stride)
    w2 = _windows(u2, win, stride)
    nh, nw = w1.shape[:2]
    m1 = w1.mean(axis=(2, 3), keepdims=True)
    m2 = w2.mean(axis=(2, 3), keepdims=True)
    c1 = w1 - m1
    c2 = w2 - m2
    v1 = (c1**2).mean(axis=(2, 3), keepdims=True)
    v2 = (c2**2).mean(axis=(2, 3), keepdims=True)
    cov = (c1 * c2).mean(axis=(2, 3), keepdims=True)
    num = 2.0 * cov + C
    den = v1 + v2 + C
    per_window = 1.0 - num / den
    nwin = nh * nw
    npx = win * win
    # d(num/den) = (d num * den - num * d den) / den^2, with window means dropping out
    g1 = -(2.0 * c2 / npx * den - num * 2.0 * c1 / npx) / den**2 / nwin
    g2 = -(2.0 * c1 / npx * den - num * 2.0 * c2 / npx) / den**2 / nwin
    return float(per_window.mean()), g1, g2


def loss_rssim(d1, d2, cfg: LossConfig | None = None, mask=None, which: str = "d2"):
    """Relative structure similarity between two depth fields.

    Both inputs are standardized over ``mask`` before windowed statistics, so
    the loss ignores any positive affine change of either input. The returned
    gradient is with respect to ``d2`` (or ``d1`` when ``which="d1"``).
    """
    cfg = cfg or LossConfig()
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    if d1.shape != d2.shape:
        raise DimensionError(f"d1 {d1.shape} vs d2 {d2.shape}")
    mask = np.ones(d1.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    u1, s1 = _standardize(d1, mask)
    u2, s2 = _standardize(d2, mask)
    value, g1, g2 = _rssim_core(u1, u2, cfg.rssim_window, cfg.stride, cfg.rssim_C)
    if which == "d2":
        gu, u, sd = _scatter_windows(g2, d1.shape, cfg.rssim_window, cfg.stride), u2, s2
    elif which == "d1":
        gu, u, sd = _scatter_windows(g1, d1.shape, cfg.rssim_window, cfg.stride), u1, s1
    else:
        raise ParameterError("which must be 'd1' or 'd2'")
    return LossValueGrad(value, _unstandardize_grad(gu, u, sd, mask))


def total_loss(pred, y: SparseDepth, guidance, d_struct, cfg: LossConfig | None = None, weights=None) -> LossValueGrad:
    """``L_depth + lambda_smooth * L_smooth + lambda_rssim * L_rssim(d_struct, pred)``."""
    cfg = cfg or LossConfig()
    out = loss_depth(pred, y)
    if cfg.lambda_smooth > 0:
        out = out + loss_smooth(pred, guidance, weights=weights).scaled(cfg.lambda_smooth)
    if cfg.lambda_rssim > 0:
        out = out + loss_rssim(d_struct, pred, cfg).scaled(cfg.lambda_rssim)
    return out
