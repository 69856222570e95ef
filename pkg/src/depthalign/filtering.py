"""Prior-based outlier filtering of sparse depth.

The relative depth map is split into superpixels; inside each segment the
measurements are related to the relative depth by a RANSAC affine fit and
points that stray more than ``tau`` meters from the fit are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateError, InsufficientDataError, ParameterError
from .fields import SparseDepth

__all__ = [
    "SegmentMap",
    "RansacFit",
    "RansacConfig",
    "FilterResult",
    "superpixels",
    "ransac_fit",
    "filter_outliers",
    "window_filter_baseline",
    "MIN_SEGMENT_POINTS",
    "POINTS_PER_SEGMENT",
    "segments_for",
]

MIN_SEGMENT_POINTS = 4
POINTS_PER_SEGMENT = 12


def segments_for(n_points: int, points_per_segment: int = POINTS_PER_SEGMENT, max_segments: int = 200) -> int:
    """Superpixel count that leaves about ``points_per_segment`` measurements per segment.

    RANSAC needs several points per segment to separate a coherent cluster of
    outliers from the surface; capped at ``max_segments``.
    """
    if points_per_segment < 1 or max_segments < 1:
        raise ParameterError("points_per_segment and max_segments must be >= 1")
    return int(min(max_segments, max(1, int(n_points) // points_per_segment)))


@dataclass
class SegmentMap:
    labels: np.ndarray

    @property
    def n(self) -> int:
        return int(self.labels.max()) + 1


@dataclass
class RansacFit:
    a: float
    b: float
    inlier_mask: np.ndarray
    n_points: int

    def predict(self, r):
        return self.a * np.asarray(r, dtype=np.float64) + self.b


@dataclass
class RansacConfig:
    iters: int = 100
    inlier_tol: float | None = None  # None -> tau / 2


@dataclass
class FilterResult:
    kept_mask: np.ndarray
    confidence: np.ndarray  # NaN off the measured set
    per_segment_fits: list = field(default_factory=list)  # (segment id, RansacFit)
    segments: SegmentMap | None = None

    @property
    def outlier_mask(self) -> np.ndarray:
        return np.isfinite(self.confidence) & ~self.kept_mask


def _grid_shape(H, W, N):
    ny = max(1, int(round(np.sqrt(N * H / W))))
    nx = max(1, int(round(N / ny)))
    return ny, nx


def _enforce_connectivity(labels):
    """Keep each label's largest 4-connected piece; fold the rest into neighbours."""
    H, W = labels.shape
    comp = np.zeros((H, W), dtype=np.int64)
    n_comp = 0
    owner = []  # label of each component
    for lab in np.unique(labels):
        cl, k = ndimage.label(labels == lab)
        sel = cl > 0
        comp[sel] = cl[sel] + n_comp
        owner.extend([lab] * k)
        n_comp += k
    comp -= 1
    sizes = np.bincount(comp.ravel(), minlength=n_comp)
    owner = np.asarray(owner)
    main = np.zeros(n_comp, dtype=bool)
    for lab in np.unique(owner):
        ids = np.flatnonzero(owner == lab)
        main[ids[np.argmax(sizes[ids])]] = True

    parent = np.arange(n_comp)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    # adjacency between components from horizontal and vertical pixel pairs
    a = np.concatenate([comp[:, :-1].ravel(), comp[:-1, :].ravel()])
    b = np.concatenate([comp[:, 1:].ravel(), comp[1:, :].ravel()])
    diff = a != b
    pairs = np.unique(np.stack([a[diff], b[diff]], axis=1), axis=0)
    neighbours = [[] for _ in range(n_comp)]
    for i, j in pairs:
        neighbours[i].append(j)
        neighbours[j].append(i)

    group_size = sizes.astype(np.int64).copy()
    for i in np.flatnonzero(~main)[np.argsort(sizes[~main], kind="stable")]:
        roots = {find(j) for j in neighbours[i]} - {find(i)}
        if not roots:
            continue
        target = max(roots, key=lambda r: (group_size[r], -r))
        ri = find(i)
        parent[ri] = target
        group_size[target] += group_size[ri]

    roots = np.array([find(i) for i in range(n_comp)])
    _, out = np.unique(roots[comp], return_inverse=True)
    return out.reshape(H, W)


def superpixels(relative, N: int = 200, compactness: float = 0.5, iters: int = 10) -> SegmentMap:
    """SLIC clustering of the relative depth map.

    Features are ``(r, m * x, m * y)`` with ``r`` the min-max normalized
    relative depth and ``m = compactness * sqrt(N / (H * W))``. Centers start on
    a regular grid; every label in the result is 4-connected.
    """
    r = np.asarray(relative, dtype=np.float64)
    H, W = r.shape
    if N < 1 or N > H * W:
        raise ParameterError(f"segment count {N} outside [1, {H * W}]")
    if N == 1:
        return SegmentMap(np.zeros((H, W), dtype=np.int64))
    span = np.ptp(r)
    r = (r - r.min()) / span if span > 0 else np.zeros_like(r)
    m = compactness * np.sqrt(N / (H * W))
    ny, nx = _grid_shape(H, W, N)
    cy = (np.arange(ny) + 0.5) * H / ny
    cx = (np.arange(nx) + 0.5) * W / nx
    cy, cx = (g.ravel() for g in np.meshgrid(cy, cx, indexing="ij"))
    cr = r[np.clip(cy.astype(int), 0, H - 1), np.clip(cx.astype(int), 0, W - 1)]
    step = max(np.sqrt(H * W / N), 1.0)
    rad = int(np.ceil(step))
    rows, cols = np.mgrid[0:H, 0:W].astype(np.float64)
    labels = np.zeros((H, W), dtype=np.int64)

    for _ in range(max(iters, 1)):
        dist = np.full((H, W), np.inf)
        for k in range(cy.size):
            r0, r1 = max(int(cy[k]) - rad, 0), min(int(cy[k]) + rad + 1, H)
            c0, c1 = max(int(cx[k]) - rad, 0), min(int(cx[k]) + rad + 1, W)
            d = (r[r0:r1, c0:c1] - cr[k]) ** 2 + m**2 * (
                (rows[r0:r1, c0:c1] - cy[k]) ** 2 + (cols[r0:r1, c0:c1] - cx[k]) ** 2
            )
            win = dist[r0:r1, c0:c1]
            better = d < win
            win[better] = d[better]
            labels[r0:r1, c0:c1][better] = k
        # pixels outside every search window join the nearest center
        lost = ~np.isfinite(dist)
        if lost.any():
            d2 = (rows[lost][:, None] - cy) ** 2 + (cols[lost][:, None] - cx) ** 2
            labels[lost] = np.argmin(d2, axis=1)
        count = np.bincount(labels.ravel(), minlength=cy.size)
        live = count > 0
        for arr, src in ((cy, rows), (cx, cols), (cr, r)):
            s = np.bincount(labels.ravel(), weights=src.ravel(), minlength=cy.size)
            arr[live] = s[live] / count[live]

    return SegmentMap(_enforce_connectivity(labels))


def _line_through(r, y, i, j):
    a = (y[j] - y[i]) / (r[j] - r[i])
    return a, y[i] - a * r[i]


def _lstsq_line(r, y):
    rc = r - r.mean()
    var = np.dot(rc, rc)
    if var <= 0:
        return None
    a = np.dot(rc, y - y.mean()) / var
    return a, y.mean() - a * r.mean()


def ransac_fit(r, y, iters: int = 100, inlier_tol: float = 0.5, seed=0) -> RansacFit:
    """Robust fit of ``y = a * r + b`` from two-point hypotheses.

    The best-supported hypothesis is refit by least squares on its inliers and
    the inlier set is recomputed from the refined line.
    """
    r = np.asarray(r, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if r.size != y.size:
        raise ParameterError("r and y differ in length")
    n = r.size
    if n < 2:
        raise InsufficientDataError(f"RANSAC needs at least 2 points, got {n}")
    if np.ptp(r) == 0:
        raise DegenerateError("all relative values are identical")
    rng = np.random.default_rng(seed)
    best, best_count, best_cost = None, -1, np.inf
    for _ in range(iters):
        i, j = rng.choice(n, size=2, replace=False)
        while r[i] == r[j]:
            i, j = rng.choice(n, size=2, replace=False)
        a, b = _line_through(r, y, i, j)
        res = np.abs(y - (a * r + b))
        inl = res <= inlier_tol
        count = int(inl.sum())
        cost = float(res[inl].sum())
        if count > best_count or (count == best_count and cost < best_cost):
            best, best_count, best_cost = (a, b), count, cost
    a, b = best
    inl = np.abs(y - (a * r + b)) <= inlier_tol
    refit = _lstsq_line(r[inl], y[inl]) if inl.sum() >= 2 else None
    if refit is not None:
        a, b = refit
        inl = np.abs(y - (a * r + b)) <= inlier_tol
    return RansacFit(float(a), float(b), inl, n)


def filter_outliers(
    relative,
    y: SparseDepth,
    N: int = 200,
    tau: float = 1.0,
    ransac_cfg: RansacConfig | None = None,
    seed=0,
    compactness: float = 0.5,
    slic_iters: int = 10,
    segments: SegmentMap | None = None,
) -> FilterResult:
    """Drop measurements that disagree with their segment's relative-depth fit.

    Confidence is ``1 - (e - e_min) / (e_max - e_min)`` of the absolute fit
    residual ``e`` within each fitted segment, so higher means more reliable.
    Segments with fewer than four points, or with constant relative depth,
    keep all their points at confidence 1.
    """
    relative = np.asarray(relative, dtype=np.float64)
    if relative.shape != y.shape:
        raise ParameterError(f"relative {relative.shape} vs sparse {y.shape}")
    if y.count == 0:
        raise ParameterError("no sparse measurements to filter")
    ransac_cfg = ransac_cfg or RansacConfig()
    tol = tau / 2 if ransac_cfg.inlier_tol is None else ransac_cfg.inlier_tol
    seg = segments or superpixels(relative, N, compactness, slic_iters)
    master = int(np.random.SeedSequence(seed).generate_state(1)[0]) if not isinstance(seed, (int, np.integer)) else int(seed)

    rows, cols, vals = y.points()
    labs = seg.labels[rows, cols]
    rvals = relative[rows, cols]
    kept = np.ones(rows.size, dtype=bool)
    conf = np.ones(rows.size)
    fits = []
    order = np.argsort(labs, kind="stable")
    bounds = np.flatnonzero(np.diff(labs[order])) + 1
    for idx in np.split(order, bounds):
        if idx.size < MIN_SEGMENT_POINTS:
            continue
        sid = int(labs[idx[0]])
        try:
            fit = ransac_fit(rvals[idx], vals[idx], ransac_cfg.iters, tol, seed=np.random.default_rng([master, sid]))
        except DegenerateError:
            continue
        err = np.abs(fit.predict(rvals[idx]) - vals[idx])
        kept[idx] = err <= tau
        span = err.max() - err.min()
        conf[idx] = 1.0 - (err - err.min()) / span if span > 0 else 1.0
        fits.append((sid, fit))

    kept_mask = np.zeros(y.shape, dtype=bool)
    kept_mask[rows[kept], cols[kept]] = True
    confidence = np.full(y.shape, np.nan)
    confidence[rows, cols] = conf
    return FilterResult(kept_mask, confidence, fits, seg)


def window_filter_baseline(y: SparseDepth, window: int = 7, margin: float = 2.0) -> FilterResult:
    """Keep a point iff it lies within ``margin`` of the nearest depth in its window.

    Confidence is ``1 / (1 + excess / margin)`` where ``excess`` is the depth
    above the window minimum.
    """
    if window < 1 or window % 2 == 0:
        raise ParameterError("window must be a positive odd size")
    if not margin > 0:
        raise ParameterError("margin must be > 0")
    field_ = np.where(y.mask, y.values, np.inf)
    local_min = ndimage.minimum_filter(field_, size=window, mode="constant", cval=np.inf)
    excess = np.where(y.mask, y.values - local_min, 0.0)
    kept = y.mask & (excess <= margin)
    confidence = np.where(y.mask, 1.0 / (1.0 + excess / margin), np.nan)
    return FilterResult(kept, confidence)
