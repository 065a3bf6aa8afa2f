"""Structured pruning and feature-aligned distillation for ViT-style encoders."""

from .encoder import EncoderConfig, build_encoder, count_params_macs, forward_with_taps
from .pipeline import PipelineConfig, evaluate, run_alternate_slimming, run_onestep_baseline

__all__ = [
    "EncoderConfig",
    "PipelineConfig",
    "build_encoder",
    "count_params_macs",
    "evaluate",
    "forward_with_taps",
    "run_alternate_slimming",
    "run_onestep_baseline",
]
__version__ = "0.1.0"
