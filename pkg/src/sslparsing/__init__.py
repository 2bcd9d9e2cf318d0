"""Human parsing with a joint-structure-weighted loss.

Pseudo joints from part-label maps, the joint-weighted parsing loss, parsing
metrics with challenge-factor slices, a synthetic figure generator, a tiny
numpy parser with two-stage training, and a benchmark scoring server.
"""
from .errors import ParsingError
from .joints import Joint, JointHeatmapSet, derive_joints, joint_loss, render_heatmap, soft_joints
from .loss import LossConfig, LossResult, grad_check, parsing_loss, structure_loss
from .metrics import ConfusionMatrix, MetricsReport, accumulate_confusion, compute_metrics, merge_confusion
from .taxonomy import PartTaxonomy, lip_taxonomy, validate_taxonomy

__version__ = "0.1.0"

__all__ = [
    "ConfusionMatrix",
    "Joint",
    "JointHeatmapSet",
    "LossConfig",
    "LossResult",
    "MetricsReport",
    "ParsingError",
    "PartTaxonomy",
    "accumulate_confusion",
    "compute_metrics",
    "derive_joints",
    "grad_check",
    "joint_loss",
    "lip_taxonomy",
    "merge_confusion",
    "parsing_loss",
    "render_heatmap",
    "soft_joints",
    "structure_loss",
    "validate_taxonomy",
]
