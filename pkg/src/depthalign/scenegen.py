"""Deterministic synthetic scenes: piecewise-planar depth with matching side data.

A scene is built from ``n_planes`` random straight cuts through the image;
every resulting cell carries its own slanted plane. The guidance image shades
each plane and darkens cell boundaries, and the relative depth is a monotone
warp of the normalized ground truth plus smooth low-frequency noise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ParameterError
from .fields import SparseDepth

__all__ = [
    "SceneConfig",
    "Scene",
    "derive_seed",
    "synth_scene",
    "make_suite",
    "sample_sparse",
    "inject_outliers",
    "harris_response",
    "OUTLIER_MODES",
]

OUTLIER_MODES = ("see_through", "gross")
SEE_THROUGH_RADIUS = 2


@dataclass
class SceneConfig:
    height: int = 96
    width: int = 128
    n_planes: int = 6
    depth_min: float = 2.0
    depth_max: float = 60.0
    warp: str = "monotone-gamma"
    gamma: float = 1.3
    prior_noise: float = 0.01
    density: float = 0.01
    pattern: str = "uniform"
    outliers: tuple = ()  # ((mode, rate), ...)
    see_through_gap: float = 2.0
    texture: float = 0.03

    def __post_init__(self):
        self.outliers = tuple((str(m), float(r)) for m, r in self.outliers)
        if self.height < 2 or self.width < 2:
            raise ParameterError("scene must be at least 2x2")
        if not 0 < self.depth_min < self.depth_max:
            raise ParameterError("need 0 < depth_min < depth_max")
        if self.n_planes < 0:
            raise ParameterError("n_planes must be >= 0")
        if self.warp not in ("identity", "monotone-gamma"):
            raise ParameterError(f"unknown warp {self.warp!r}")
        if not self.gamma > 0:
            raise ParameterError("gamma must be > 0")
        if self.prior_noise < 0:
            raise ParameterError("prior_noise must be >= 0")
        if self.pattern not in ("uniform", "corner"):
            raise ParameterError(f"unknown pattern {self.pattern!r}")
        if int(np.floor(self.density * self.height * self.width + 1e-9)) < 2:
            raise ParameterError("density yields fewer than two measurements")
        for mode, rate in self.outliers:
            if mode not in OUTLIER_MODES:
                raise ParameterError(f"unknown outlier mode {mode!r}")
            if not 0 <= rate <= 1:
                raise ParameterError("outlier rate must lie in [0, 1]")

    @classmethod
    def preset(cls, name: str, **overrides) -> "SceneConfig":
        if name == "outdoor":
            base = {}
        elif name == "indoor":
            base = dict(depth_min=0.5, depth_max=10.0, density=0.005, pattern="corner", see_through_gap=0.5)
        else:
            raise ParameterError(f"unknown preset {name!r}")
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["outliers"] = [list(o) for o in self.outliers]
        return d


@dataclass
class Scene:
    gt: np.ndarray
    relative: np.ndarray
    guidance: np.ndarray
    sparse: SparseDepth
    outlier_labels: np.ndarray
    cells: np.ndarray
    planes: np.ndarray  # (n_cells, 3): depth = p0 + pu * col + pv * row
    meta: dict = field(default_factory=dict)

    @property
    def clean_sparse(self) -> SparseDepth:
        """The measurements with ground truth restored at corrupted points."""
        return SparseDepth(np.where(self.sparse.mask, self.gt, 0.0), self.sparse.mask)


def derive_seed(master_seed: int, index: int) -> int:
    """Independent per-item seed from a master seed."""
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def _cut_cells(rng, H, W, n_cuts):
    rows, cols = np.mgrid[0:H, 0:W].astype(np.float64)
    code = np.zeros((H, W), dtype=np.int64)
    for _ in range(n_cuts):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        theta = rng.uniform(0, np.pi)
        side = (cols - cx) * np.cos(theta) + (rows - cy) * np.sin(theta) > 0
        code = code * 2 + side
    _, cells = np.unique(code, return_inverse=True)
    return cells.reshape(H, W), rows, cols


def _fit_planes(rng, cells, rows, cols, dmin, dmax):
    H, W = cells.shape
    n = cells.max() + 1
    planes = np.zeros((n, 3))
    slope_max = 0.6 * (dmax - dmin) / max(H, W)
    for c in range(n):
        sel = cells == c
        r, q = rows[sel], cols[sel]
        rc, qc = r.mean(), q.mean()
        d = rng.uniform(dmin, dmax)
        gu, gv = rng.uniform(-slope_max, slope_max, size=2)
        dev = gu * (q - qc) + gv * (r - rc)
        scale = 1.0
        if dev.max() > 0:
            scale = min(scale, (dmax - d) / dev.max())
        if dev.min() < 0:
            scale = min(scale, (d - dmin) / -dev.min())
        gu, gv = gu * scale, gv * scale
        planes[c] = (d - gu * qc - gv * rc, gu, gv)
    return planes


def _eval_plane(planes, idx, rows, cols):
    p = planes[idx]
    return p[..., 0] + p[..., 1] * cols + p[..., 2] * rows


def _smooth_noise(rng, shape, grid=(4, 5)):
    coarse = rng.standard_normal(grid)
    H, W = shape
    rr = np.linspace(0, grid[0] - 1, H)
    cc = np.linspace(0, grid[1] - 1, W)
    out = ndimage.map_coordinates(coarse, np.meshgrid(rr, cc, indexing="ij"), order=3, mode="nearest")
    sd = out.std()
    return (out - out.mean()) / sd if sd > 0 else out * 0.0


def _guidance(rng, cells, planes, texture):
    n = planes.shape[0]
    albedo = rng.uniform(0.35, 0.85, size=n)
    grad = planes[:, 1:] / (np.abs(planes[:, 1:]).max() + 1e-12)
    normals = np.column_stack([-grad, np.ones(n)])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    light = np.array([0.4, -0.3, 1.0])
    light /= np.linalg.norm(light)
    shade = 0.6 + 0.4 * np.clip(normals @ light, 0, 1)
    img = (albedo * shade)[cells]
    edge = np.zeros(cells.shape, dtype=bool)
    edge[:, :-1] |= cells[:, :-1] != cells[:, 1:]
    edge[:-1, :] |= cells[:-1, :] != cells[1:, :]
    img = np.where(edge, 0.5 * img, img)
    img = img + texture * _smooth_noise(rng, cells.shape, grid=(12, 16))
    return np.clip(img, 0.0, 1.0)


def harris_response(image, sigma: float = 1.0, k: float = 0.04) -> np.ndarray:
    """Non-negative Harris corner response of a grayscale image."""
    img = np.asarray(image, dtype=np.float64)
    ix = ndimage.sobel(img, axis=1)
    iy = ndimage.sobel(img, axis=0)
    sxx = ndimage.gaussian_filter(ix * ix, sigma)
    syy = ndimage.gaussian_filter(iy * iy, sigma)
    sxy = ndimage.gaussian_filter(ix * iy, sigma)
    r = sxx * syy - sxy**2 - k * (sxx + syy) ** 2
    return np.clip(r, 0.0, None)


def sample_sparse(depth, pattern: str = "uniform", density: float = 0.01, seed=0, guidance=None) -> SparseDepth:
    """Pick ``floor(density * H * W)`` pixels of ``depth`` as measurements.

    ``corner`` samples proportionally to the Harris response of ``guidance``
    blended with 10% uniform mass.
    """
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    count = int(np.floor(density * H * W + 1e-9))
    if count < 2:
        raise ParameterError(f"density {density} yields {count} points (< 2)")
    valid = (np.isfinite(depth) & (depth > 0)).ravel()
    cand = np.flatnonzero(valid)
    if count > cand.size:
        raise ParameterError("more samples requested than valid pixels")
    rng = np.random.default_rng(seed)
    if pattern == "uniform":
        pick = rng.choice(cand, size=count, replace=False)
    elif pattern == "corner":
        if guidance is None:
            raise ParameterError("corner pattern needs a guidance image")
        resp = harris_response(guidance).ravel()[cand]
        total = resp.sum()
        p = np.full(cand.size, 1.0 / cand.size)
        if total > 0:
            p = 0.9 * resp / total + 0.1 * p
        pick = rng.choice(cand, size=count, replace=False, p=p / p.sum())
    else:
        raise ParameterError(f"unknown pattern {pattern!r}")
    mask = np.zeros(H * W, dtype=bool)
    mask[pick] = True
    mask = mask.reshape(H, W)
    return SparseDepth(np.where(mask, depth, 0.0), mask)


def _see_through_targets(sparse, gt, cells, planes, gap):
    """Far-surface depth for every measured point next to a far enough surface."""
    H, W = gt.shape
    rows, cols, _ = sparse.points()
    far = np.full(rows.size, -np.inf)
    rad = SEE_THROUGH_RADIUS
    for dr in range(-rad, rad + 1):
        for dc in range(-rad, rad + 1):
            if dr * dr + dc * dc > rad * rad or (dr == 0 and dc == 0):
                continue
            rr, cc = rows + dr, cols + dc
            ok = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
            rr, cc = np.clip(rr, 0, H - 1), np.clip(cc, 0, W - 1)
            if cells is not None:
                other = cells[rr, cc]
                ok &= other != cells[rows, cols]
                cand = _eval_plane(planes, other, rows.astype(float), cols.astype(float))
            else:
                cand = gt[rr, cc]
            far = np.where(ok, np.maximum(far, cand), far)
    eligible = far >= gt[rows, cols] + gap
    return rows, cols, far, eligible


def inject_outliers(
    sparse: SparseDepth,
    gt,
    mode: str,
    rate: float,
    seed=0,
    cells=None,
    planes=None,
    gap: float = 2.0,
    exclude=None,
):
    """Corrupt ``floor(rate * |Omega|)`` measurements.

    ``see_through`` replaces points within two pixels of a depth discontinuity
    by the depth of the farther surface at that pixel (from ``planes`` when
    given, else from the neighbouring ground truth); ``gross`` adds a uniform
    offset in [10, 50] m. Returns ``(sparse, labels, shortfall)``.
    """
    if not 0 <= rate <= 1:
        raise ParameterError("rate must lie in [0, 1]")
    gt = np.asarray(gt, dtype=np.float64)
    labels = np.zeros(sparse.shape, dtype=bool)
    n_target = int(np.floor(rate * sparse.count + 1e-9))
    if n_target == 0:
        return SparseDepth(sparse.values.copy(), sparse.mask.copy()), labels, 0
    rng = np.random.default_rng(seed)
    values = sparse.values.copy()
    taken = np.zeros(sparse.shape, dtype=bool) if exclude is None else np.asarray(exclude, dtype=bool)
    if mode == "see_through":
        rows, cols, far, eligible = _see_through_targets(sparse, gt, cells, planes, gap)
        eligible &= ~taken[rows, cols]
        idx = np.flatnonzero(eligible)
        pick = rng.choice(idx, size=min(n_target, idx.size), replace=False)
        values[rows[pick], cols[pick]] = far[pick]
        labels[rows[pick], cols[pick]] = True
        shortfall = n_target - pick.size
    elif mode == "gross":
        rows, cols, _ = sparse.points()
        idx = np.flatnonzero(~taken[rows, cols])
        pick = rng.choice(idx, size=min(n_target, idx.size), replace=False)
        values[rows[pick], cols[pick]] += rng.uniform(10.0, 50.0, size=pick.size)
        labels[rows[pick], cols[pick]] = True
        shortfall = n_target - pick.size
    else:
        raise ParameterError(f"unknown outlier mode {mode!r}")
    return SparseDepth(values, sparse.mask), labels, int(shortfall)


def synth_scene(cfg: SceneConfig | None = None, seed: int = 0) -> Scene:
    cfg = cfg or SceneConfig()
    H, W = cfg.height, cfg.width
    ss = np.random.SeedSequence(int(seed))
    geo_rng, img_rng, rel_rng, smp_rng, out_rng = (np.random.default_rng(s) for s in ss.spawn(5))

    cells, rows, cols = _cut_cells(geo_rng, H, W, cfg.n_planes)
    planes = _fit_planes(geo_rng, cells, rows, cols, cfg.depth_min, cfg.depth_max)
    gt = np.clip(_eval_plane(planes, cells, rows, cols), cfg.depth_min, cfg.depth_max)
    guidance = _guidance(img_rng, cells, planes, cfg.texture)

    span = gt.max() - gt.min()
    rel = (gt - gt.min()) / span if span > 0 else np.zeros_like(gt)
    if cfg.warp == "monotone-gamma":
        rel = rel**cfg.gamma
    if cfg.prior_noise > 0:
        rel = rel + cfg.prior_noise * _smooth_noise(rel_rng, (H, W))

    sparse = sample_sparse(gt, cfg.pattern, cfg.density, seed=smp_rng, guidance=guidance)
    labels = np.zeros((H, W), dtype=bool)
    shortfall = {}
    for mode, rate in cfg.outliers:
        sparse, lab, short = inject_outliers(
            sparse, gt, mode, rate, seed=out_rng, cells=cells, planes=planes,
            gap=cfg.see_through_gap, exclude=labels,
        )
        labels |= lab
        shortfall[mode] = short
    meta = {"seed": int(seed), "config": cfg.to_dict(), "outlier_shortfall": shortfall}
    return Scene(gt, rel, guidance, sparse, labels, cells, planes, meta)


def make_suite(n: int = 20, seed: int = 0, cfg: SceneConfig | None = None, **overrides) -> list[Scene]:
    """``n`` scenes with per-scene seeds derived from ``seed``."""
    cfg = cfg or SceneConfig()
    if overrides:
        cfg = replace(cfg, **overrides)
    return [synth_scene(cfg, derive_seed(seed, i)) for i in range(n)]
