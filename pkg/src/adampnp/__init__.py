"""Multimodal plug-and-play reconstruction of protein backbones under a diffusion prior."""

from .adaptive import AdaptiveState, bias_corrected_update, dynamic_weights, median_residual_variance
from .config import ExperimentConfig
from .forward_models import DensityGridSpec, Measurement, select_pairs, select_partial, simulate_measurement
from .geometry import Alignment, Backbone, center, kabsch_align, parse_pdb, read_pdb, rmsd
from .library import LibrarySpec, build_library
from .prior import (
    CovarianceFactor,
    GaussianMixturePrior,
    NoiseSchedule,
    mixture_denoise,
    unconditional_sample,
    unwhiten,
    whiten,
)
from .sampler import AdamPnP, GuidanceConfig, run_adam_pnp
from .structures import build_backbone, helix_turn_helix

__version__ = "0.1.0"

__all__ = [
    "AdaptiveState",
    "AdamPnP",
    "Alignment",
    "Backbone",
    "CovarianceFactor",
    "DensityGridSpec",
    "ExperimentConfig",
    "GaussianMixturePrior",
    "GuidanceConfig",
    "LibrarySpec",
    "Measurement",
    "NoiseSchedule",
    "bias_corrected_update",
    "build_backbone",
    "build_library",
    "center",
    "dynamic_weights",
    "helix_turn_helix",
    "kabsch_align",
    "median_residual_variance",
    "mixture_denoise",
    "parse_pdb",
    "read_pdb",
    "rmsd",
    "run_adam_pnp",
    "select_pairs",
    "select_partial",
    "simulate_measurement",
    "unconditional_sample",
    "unwhiten",
    "whiten",
]
