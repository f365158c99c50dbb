"""Attention-dump extractor for latent text-to-image diffusion models."""

__version__ = "0.1.0"

from .extract import ExtractionJob, extract, load_image
from .model import AttentionRecorder, DiffusionBundle, ModelConfig, load_bundle, save_bundle
from .tokenize import TokenAlignmentError, align_tokens, build_prompt
from .toy import build_toy_bundle, init_toy_checkpoint

__all__ = [
    "AttentionRecorder",
    "DiffusionBundle",
    "ExtractionJob",
    "ModelConfig",
    "TokenAlignmentError",
    "align_tokens",
    "build_prompt",
    "build_toy_bundle",
    "extract",
    "init_toy_checkpoint",
    "load_bundle",
    "load_image",
    "save_bundle",
]
