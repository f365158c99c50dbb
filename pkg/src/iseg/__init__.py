"""Training-free segmentation on attention tensors.

Core recipe: sharpen a spatial self-attention map by one entropy
gradient step, then iteratively propagate per-category cross-attention
maps through it and threshold the result.
"""

__version__ = "0.1.0"

from .attn import (
    CategoryMaps,
    CrossAttentionStack,
    RefineConfig,
    SelfAttentionMap,
    ShapeError,
    TokenMeta,
    attention_from_qk,
    category_enhanced_attention,
    entropy_reduce,
    iterative_refine,
    minmax_normalize,
    refined_self_attention_power,
    self_attention_entropy,
)
from .dumpio import (
    AttnDump,
    CrossLayerRecord,
    DumpFormatError,
    DumpValidationError,
    fuse_cross_attention,
    read_dump,
    read_dump_file,
    write_dump,
    write_dump_file,
)
from .evalkit import MetricReport, SegMask, assemble_multi, binarize_single, miou
from .fixtures import (
    NoiseSpec,
    SyntheticScene,
    degradation_study,
    gt_self_attention,
    noisy_self_attention,
    random_scene,
    seed_from_interaction,
)

__all__ = [
    "AttnDump",
    "CategoryMaps",
    "CrossAttentionStack",
    "CrossLayerRecord",
    "DumpFormatError",
    "DumpValidationError",
    "MetricReport",
    "NoiseSpec",
    "RefineConfig",
    "SegMask",
    "SelfAttentionMap",
    "ShapeError",
    "SyntheticScene",
    "TokenMeta",
    "attention_from_qk",
    "assemble_multi",
    "binarize_single",
    "category_enhanced_attention",
    "degradation_study",
    "entropy_reduce",
    "fuse_cross_attention",
    "gt_self_attention",
    "iterative_refine",
    "minmax_normalize",
    "miou",
    "noisy_self_attention",
    "random_scene",
    "read_dump",
    "read_dump_file",
    "refined_self_attention_power",
    "seed_from_interaction",
    "self_attention_entropy",
    "write_dump",
    "write_dump_file",
]
