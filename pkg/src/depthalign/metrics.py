"""Depth error metrics, sparsification AUC and relative-to-metric affine fitting."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegenerateError, DimensionError, ParameterError

__all__ = [
    "MetricReport",
    "rmse",
    "mae",
    "evaluate",
    "sparsification_curve",
    "sparsification_auc",
    "affine_fit",
    "REMOVAL_FRACTIONS",
]

REMOVAL_FRACTIONS = np.round(np.arange(100) * 0.01, 2)


@dataclass
class MetricReport:
    rmse: float
    mae: float
    pixel_count: int
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        extras = d.pop("extras")
        d.update(extras)
        return d


def _eval_errors(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    sel = np.isfinite(gt) & (gt > 0)
    if mask is not None:
        sel &= np.asarray(mask, dtype=bool)
    if not sel.any():
        raise ParameterError("empty evaluation set")
    return pred[sel] - gt[sel]


def rmse(pred, gt, mask=None) -> float:
    """Root mean squared error over ``mask`` and the valid (positive) ground truth."""
    err = _eval_errors(pred, gt, mask)
    return float(np.sqrt(np.mean(err**2)))


def mae(pred, gt, mask=None) -> float:
    err = _eval_errors(pred, gt, mask)
    return float(np.mean(np.abs(err)))


def evaluate(pred, gt, mask=None, **extras) -> MetricReport:
    err = _eval_errors(pred, gt, mask)
    return MetricReport(
        rmse=float(np.sqrt(np.mean(err**2))),
        mae=float(np.mean(np.abs(err))),
        pixel_count=int(err.size),
        extras=dict(extras),
    )


def sparsification_curve(errors, confidence) -> np.ndarray:
    """RMSE of the points left after dropping the lowest-confidence fraction.

    Evaluated at removal fractions 0, 0.01, ..., 0.99; ties in confidence keep
    their original order.
    """
    e = np.asarray(errors, dtype=np.float64).ravel()
    c = np.asarray(confidence, dtype=np.float64).ravel()
    if e.shape != c.shape:
        raise ParameterError(f"{e.size} errors vs {c.size} confidences")
    if e.size < 2:
        raise ParameterError("need at least two points")
    order = np.argsort(c, kind="stable")
    sq = e[order] ** 2
    # suffix sums give the RMSE of every tail in one pass
    tail = np.cumsum(sq[::-1])[::-1]
    n = e.size
    drop = np.floor(REMOVAL_FRACTIONS * n + 1e-9).astype(int)
    return np.sqrt(tail[drop] / (n - drop))


def sparsification_auc(errors, confidence) -> float:
    """Trapezoidal area under :func:`sparsification_curve`; lower is better."""
    curve = sparsification_curve(errors, confidence)
    return float(np.trapezoid(curve, REMOVAL_FRACTIONS))


def affine_fit(relative, metric, mask=None) -> tuple[float, float]:
    """Least-squares ``(a, b)`` minimizing ``sum (a * relative + b - metric)^2``."""
    r = np.asarray(relative, dtype=np.float64)
    y = np.asarray(metric, dtype=np.float64)
    if r.shape != y.shape:
        raise DimensionError(f"relative {r.shape} vs metric {y.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        r, y = r[m], y[m]
    r, y = r.ravel(), y.ravel()
    if r.size < 2:
        raise DegenerateError("affine fit needs at least two points")
    rc = r - r.mean()
    var = np.dot(rc, rc)
    if var <= 1e-24 * max(1.0, np.dot(r, r)):
        raise DegenerateError("relative values are constant")
    a = float(np.dot(rc, y - y.mean()) / var)
    b = float(y.mean() - a * r.mean())
    return a, b
