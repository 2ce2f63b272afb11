"""Longitudinal volumetric risk prediction with a 3D ConvNeXt backbone and a time-aware encoder."""

from .backbone import VARIANTS, Backbone, BackboneConfig, build_backbone, count_params
from .encoder import HCCNet, build_model
from .metrics import auprc, auroc, cumulative_gain_mae, reliability
from .volumes import PatientRecord, StudyVisit, Volume

__version__ = "0.1.0"

__all__ = [
    "VARIANTS",
    "Backbone",
    "BackboneConfig",
    "HCCNet",
    "PatientRecord",
    "StudyVisit",
    "Volume",
    "auprc",
    "auroc",
    "build_backbone",
    "build_model",
    "count_params",
    "cumulative_gain_mae",
    "reliability",
]
