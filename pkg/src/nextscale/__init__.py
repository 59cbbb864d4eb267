"""Desk-scale laboratory for scale-wise autoregressive image generation.

The package is organised around a coarse-to-fine latent pyramid: a model
predicts each scale of the pyramid from every coarser scale, and the
training package compares schedules that differ only in whether those
coarser inputs come from the ground truth or from the model itself.
"""

from .config import ExperimentConfig, load_config, parse_config
from .data import SyntheticDatasetSpec, make_dataset
from .errors import (
    ConfigurationError,
    IntegrityError,
    InvariantViolation,
    NextScaleError,
    UnsupportedError,
    UsageError,
)
from .generator import Generator, GeneratorConfig, build_layout, init_params
from .pyramid import (
    Codebook,
    LatentPyramid,
    PatchEmbed,
    ScaleSchedule,
    TokenPyramid,
    build_pyramid,
    fit_codebook,
    make_patch_embed,
)
from .sampling import SamplerConfig, generate
from .training import AdamW, TrainConfig, sar_step, ssr_rollout, tf_step

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "Codebook",
    "ConfigurationError",
    "ExperimentConfig",
    "Generator",
    "GeneratorConfig",
    "IntegrityError",
    "InvariantViolation",
    "LatentPyramid",
    "NextScaleError",
    "PatchEmbed",
    "SamplerConfig",
    "ScaleSchedule",
    "SyntheticDatasetSpec",
    "TokenPyramid",
    "TrainConfig",
    "UnsupportedError",
    "UsageError",
    "build_layout",
    "build_pyramid",
    "fit_codebook",
    "generate",
    "init_params",
    "load_config",
    "make_dataset",
    "make_patch_embed",
    "parse_config",
    "sar_step",
    "ssr_rollout",
    "tf_step",
]
