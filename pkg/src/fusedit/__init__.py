"""Deep fusion of a frozen decoder-only LLM with a trainable diffusion transformer."""

from .configs import (
    GEMMA2_2B,
    GEMMA_2B,
    TOY_LLM,
    FusionSpec,
    FusionVariant,
    LayerAlignment,
    ModelConfig,
    StreamConfig,
    align_layers,
)
from .fusion import FusedModel, build_joint_mask
from .nn import PositionalScheme, TimestepConditioning
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "GEMMA2_2B",
    "GEMMA_2B",
    "TOY_LLM",
    "FusedModel",
    "FusionSpec",
    "FusionVariant",
    "LayerAlignment",
    "ModelConfig",
    "PositionalScheme",
    "StreamConfig",
    "Tensor",
    "TimestepConditioning",
    "align_layers",
    "build_joint_mask",
]
