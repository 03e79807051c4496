"""Proposal distribution calibration toolkit for few-shot detection heads.

Fits offset statistics from detector proposal logs, samples calibrated
proposals around ground truths, scores them with contrastive /
classification / regression losses, and ships distribution diagnostics
plus a synthetic end-to-end experiment runner.
"""

from .geometry import BBox, OffsetVec, apply_offset, clip_to_image, encode_offset, iou
from .losses import (
    ContrastiveBatch,
    Embedding,
    LossBreakdown,
    assemble_loss,
    cross_entropy_cls,
    smooth_l1_reg,
    supcon_grad,
    supcon_loss,
)
from .sampling import OffsetModel, SampledProposal, SamplerConfig, build_calibrated_set
from .stats import DiagonalGaussian4, OffsetAccumulator, Uniform4, fit_optimal_uniform

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "ContrastiveBatch",
    "DiagonalGaussian4",
    "Embedding",
    "LossBreakdown",
    "OffsetAccumulator",
    "OffsetModel",
    "OffsetVec",
    "SampledProposal",
    "SamplerConfig",
    "Uniform4",
    "apply_offset",
    "assemble_loss",
    "build_calibrated_set",
    "clip_to_image",
    "cross_entropy_cls",
    "encode_offset",
    "fit_optimal_uniform",
    "iou",
    "smooth_l1_reg",
    "supcon_grad",
    "supcon_loss",
    "__version__",
]
