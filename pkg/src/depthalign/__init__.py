"""Sparse-to-dense metric depth completion by test-time alignment of a depth prior.

A diffusion sampler over an analytic depth prior is steered toward sparse
metric measurements by interleaving reverse steps with hard-constraint
optimization loops. The package also provides prior-based outlier filtering,
error metrics, a synthetic scene generator and file codecs.
"""

from .alignment import AlignmentConfig, Completion, align, guided_sample, naive_sample, optimize_x0, remap, run_mode
from .diffusion import IdentityCodec, NoiseSchedule, ddim_step, forward_noise, make_schedule, reconstruct, reverse_sample, tweedie_x0
from .errors import (
    DegenerateError,
    DepthAlignError,
    DimensionError,
    DivergenceError,
    FormatError,
    InsufficientDataError,
    NumericalError,
    OrderingError,
    ParameterError,
    RangeError,
    SingularityError,
)
from .fields import Normalizer, SparseDepth
from .filtering import filter_outliers, ransac_fit, segments_for, superpixels, window_filter_baseline
from .io import __version__, read_depth, write_depth
from .losses import LossConfig, loss_depth, loss_rssim, loss_smooth, total_loss
from .metrics import affine_fit, evaluate, mae, rmse, sparsification_auc, sparsification_curve
from .priors import AffineSubspacePrior, GmrfPrior
from .scenegen import SceneConfig, make_suite, synth_scene

__all__ = [
    "AffineSubspacePrior",
    "AlignmentConfig",
    "Completion",
    "DegenerateError",
    "DepthAlignError",
    "DimensionError",
    "DivergenceError",
    "FormatError",
    "GmrfPrior",
    "IdentityCodec",
    "InsufficientDataError",
    "LossConfig",
    "NoiseSchedule",
    "Normalizer",
    "NumericalError",
    "OrderingError",
    "ParameterError",
    "RangeError",
    "SceneConfig",
    "SingularityError",
    "SparseDepth",
    "__version__",
    "affine_fit",
    "align",
    "ddim_step",
    "evaluate",
    "filter_outliers",
    "forward_noise",
    "guided_sample",
    "loss_depth",
    "loss_rssim",
    "loss_smooth",
    "mae",
    "make_schedule",
    "make_suite",
    "naive_sample",
    "optimize_x0",
    "ransac_fit",
    "read_depth",
    "reconstruct",
    "remap",
    "reverse_sample",
    "rmse",
    "run_mode",
    "segments_for",
    "sparsification_auc",
    "sparsification_curve",
    "superpixels",
    "synth_scene",
    "total_loss",
    "tweedie_x0",
    "window_filter_baseline",
    "write_depth",
]
