"""End-to-end helpers shared by the command line and the library.

Both entry points go through these functions, so a CLI run and a library run
on the same inputs produce identical numbers.
"""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from .alignment import MODES, AlignmentConfig, Completion, run_mode
from .diffusion import make_schedule, reconstruct
from .errors import ParameterError
from .fields import Normalizer, SparseDepth
from .filtering import filter_outliers, segments_for
from .metrics import evaluate
from .priors import AffineSubspacePrior, GmrfPrior

__all__ = [
    "PRIOR_KINDS",
    "PIPELINE_MODES",
    "build_prior",
    "complete",
    "reconstruct_depth",
    "evaluate_modes",
]

PRIOR_KINDS = ("affine", "gmrf")
PIPELINE_MODES = MODES + ("aligned+filter",)


def build_prior(kind: str, relative=None, sigma_p: float = 0.01, lambda_s: float = 1.0, eps_reg: float = 1e-2):
    if kind == "affine":
        if relative is None:
            raise ParameterError("the affine prior needs a relative depth map")
        return AffineSubspacePrior(np.asarray(relative, dtype=np.float64), sigma_p)
    if kind == "gmrf":
        return GmrfPrior(lambda_s, eps_reg)
    raise ParameterError(f"unknown prior {kind!r}; expected one of {PRIOR_KINDS}")


def complete(
    mode: str,
    prior,
    sparse: SparseDepth,
    guidance,
    relative,
    cfg: AlignmentConfig,
    schedule=None,
    filter_segments: int | None = None,
    filter_tau: float = 1.0,
) -> Completion:
    """Dense metric depth from sparse measurements by one sampling method.

    ``aligned+filter`` drops the measurements rejected by the prior-based
    filter before aligning; the filter shares the alignment seed.
    """
    schedule = schedule or make_schedule()
    if mode == "aligned+filter":
        N = segments_for(sparse.count) if filter_segments is None else filter_segments
        res = filter_outliers(relative, sparse, N=N, tau=filter_tau, seed=cfg.seed)
        sparse = sparse.restrict(res.kept_mask)
        mode = "aligned"
    return run_mode(mode, prior, sparse, guidance, relative, schedule, cfg)


def reconstruct_depth(prior, depth, t_inv: int, seed: int = 0, num_steps: int = 50, schedule=None) -> np.ndarray:
    """Noise a metric depth map to ``t_inv`` and denoise it back.

    The map is moved to the sampler range with its own min and max and
    returned in meters.
    """
    schedule = schedule or make_schedule()
    depth = np.asarray(depth, dtype=np.float64)
    norm = Normalizer.fit(depth)
    out = reconstruct(prior, norm.to_unit(depth), t_inv, schedule, seed=seed, num_steps=num_steps)
    return norm.from_unit(out)


def evaluate_modes(scene, modes, cfg: AlignmentConfig, prior_kind: str = "affine", prior_params=None, seed=None):
    """Run several sampling methods on one scene and score each against ground truth.

    Returns ``{mode: MetricReport}`` with the wall time stored in ``extras``.
    """
    prior_params = prior_params or {}
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    prior = build_prior(prior_kind, scene.relative, **prior_params)
    schedule = make_schedule()
    out = {}
    for mode in modes:
        if mode not in PIPELINE_MODES:
            raise ParameterError(f"unknown mode {mode!r}; expected one of {PIPELINE_MODES}")
        t0 = time.perf_counter()
        res = complete(mode, prior, scene.sparse, scene.guidance, scene.relative, cfg, schedule)
        out[mode] = evaluate(res.depth, scene.gt, seconds=time.perf_counter() - t0, n_clamped=res.n_clamped)
    return out
