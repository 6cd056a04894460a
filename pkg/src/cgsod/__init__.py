"""Caption-guided salient object detection, desk scale.

A float64 autodiff engine drives a four-stage pyramid transformer
backbone whose features are modulated by cross-attention maps from a
caption decoder; the package also ships the full SOD metric suite, a
training schedule, and a panoptic relabeling toolchain with an
annotation HTTP API.
"""

from .autodiff import (
    Tape,
    Tensor,
    backward,
    bilinear_resize,
    finite_diff_gradient,
    layer_norm,
    matmul,
    softmax_last,
)
from .backbone import PyramidBackbone, StageConfig, default_stage_configs
from .captioning import CaptionModel, CaptionOutput, GridFeatures, Vocabulary
from .fusion import CaptionGuidedSaliency, aggregate_attention, fuse_level
from .metrics import MetricsConfig, e_measure, evaluate_dataset, f_measure, mae, pr_curve, s_measure
from .training import Adam, structure_loss

__all__ = [
    "Adam",
    "CaptionGuidedSaliency",
    "CaptionModel",
    "CaptionOutput",
    "GridFeatures",
    "MetricsConfig",
    "PyramidBackbone",
    "StageConfig",
    "Tape",
    "Tensor",
    "Vocabulary",
    "aggregate_attention",
    "backward",
    "bilinear_resize",
    "default_stage_configs",
    "e_measure",
    "evaluate_dataset",
    "f_measure",
    "finite_diff_gradient",
    "fuse_level",
    "layer_norm",
    "mae",
    "matmul",
    "pr_curve",
    "s_measure",
    "softmax_last",
    "structure_loss",
]
