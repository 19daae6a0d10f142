"""Softmax and sqrt(HW)-scaled non-local attention blocks in float64 numpy."""

from .analysis import extract_map, key_dominance, variance_stability
from .autodiff import backward, finite_diff, grad_check
from .blocks import (
    AttentionConfig,
    AttentionMap,
    DegenerateVectorError,
    EmbeddingSet,
    FeatureMap,
    MemoryTracker,
    ablated_forward,
    embed,
    forward,
    init_embeddings,
    logits,
    multi_head_forward,
    project_direction,
    project_magnitude,
    scaled_nl_forward,
    softmax_nl_forward,
)
from .cost import cost_scaled_nl, cost_softmax_nl, crossover
from .fmap import FmapFormatError, read_fmap, write_fmap
from .tensor import DimensionError, Rng

__version__ = "0.1.0"
