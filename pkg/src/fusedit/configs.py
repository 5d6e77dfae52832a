"""Model hyperparameters: per-stream shapes, fusion options, layer alignment."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

from .nn import PositionalScheme, TimestepConditioning, default_mrope_chunks


class FusionVariant(str, enum.Enum):
    DEEP = "deep"
    SHALLOW_SELF = "shallow-self"
    SHALLOW_CROSS = "shallow-cross"
    DEEP_CROSS = "deep-cross"

    @property
    def is_deep(self) -> bool:
        return self in (FusionVariant.DEEP, FusionVariant.DEEP_CROSS)

    @property
    def is_cross(self) -> bool:
        return self in (FusionVariant.SHALLOW_CROSS, FusionVariant.DEEP_CROSS)


@dataclass(frozen=True)
class StreamConfig:
    num_layers: int
    hidden: int
    num_heads: int
    num_kv_heads: int
    head_dim: int
    ffn_dim: int
    vocab_size: int = 258
    embedding_scale: float | None = None

    def __post_init__(self):
        for name in ("num_layers", "hidden", "num_heads", "num_kv_heads", "head_dim", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"StreamConfig.{name} must be positive")
        if self.num_heads % self.num_kv_heads:
            raise ValueError("num_heads must be a multiple of num_kv_heads")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")

    @property
    def scale(self) -> float:
        return math.sqrt(self.hidden) if self.embedding_scale is None else self.embedding_scale

    @property
    def q_dim(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def kv_dim(self) -> int:
        return self.num_kv_heads * self.head_dim


TOY_LLM = StreamConfig(num_layers=4, hidden=64, num_heads=4, num_kv_heads=1, head_dim=16, ffn_dim=256)
# stand-in for the upgraded base model of the final recipe: deeper and with a
# wider FFN, same head layout so deep fusion still shares the attention space
TOY_LLM_V2 = StreamConfig(num_layers=6, hidden=64, num_heads=4, num_kv_heads=1, head_dim=16, ffn_dim=512)
GEMMA_2B = StreamConfig(
    num_layers=18, hidden=2048, num_heads=8, num_kv_heads=1, head_dim=256, ffn_dim=16384, vocab_size=256000
)
GEMMA2_2B = StreamConfig(
    num_layers=26, hidden=2304, num_heads=8, num_kv_heads=4, head_dim=256, ffn_dim=9216, vocab_size=256000
)


@dataclass(frozen=True)
class LayerAlignment:
    """DiT layer index -> LLM layer index."""

    mapping: tuple[int, ...]

    def validate(self, llm_layers: int) -> None:
        m = self.mapping
        if any(b < a for a, b in zip(m, m[1:])):
            raise ValueError(f"layer alignment {m} is not monotone")
        if any(not 0 <= x < llm_layers for x in m):
            raise ValueError(f"layer alignment {m} outside [0, {llm_layers})")

    def __getitem__(self, i: int) -> int:
        return self.mapping[i]

    def __len__(self) -> int:
        return len(self.mapping)


def align_layers(llm_layers: int, dit_layers: int) -> LayerAlignment:
    """Centre a contiguous window of ``dit_layers`` inside the LLM's layers."""
    if dit_layers > llm_layers:
        raise ValueError(f"cannot align {dit_layers} DiT layers to {llm_layers} LLM layers")
    if dit_layers < 1:
        raise ValueError("dit_layers must be positive")
    start = (llm_layers - dit_layers) // 2
    return LayerAlignment(tuple(range(start, start + dit_layers)))


@dataclass(frozen=True)
class FusionSpec:
    variant: FusionVariant = FusionVariant.DEEP
    conditioning: TimestepConditioning = TimestepConditioning.ADALN_ZERO
    positional: PositionalScheme = PositionalScheme.ROPE1D_APE
    alignment: LayerAlignment | None = None
    mrope_chunks: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", FusionVariant(self.variant))
        object.__setattr__(self, "conditioning", TimestepConditioning(self.conditioning))
        object.__setattr__(self, "positional", PositionalScheme(self.positional))


@dataclass(frozen=True)
class ModelConfig:
    llm: StreamConfig = TOY_LLM
    dit: StreamConfig = TOY_LLM
    spec: FusionSpec = field(default_factory=FusionSpec)
    image_size: int = 32
    channels: int = 3
    patch_size: int = 2
    text_len: int = 32
    timestep_dim: int = 256
    attend_pad: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        spec = self.spec
        if spec.variant.is_deep:
            for f in ("num_heads", "num_kv_heads", "head_dim"):
                if getattr(self.dit, f) != getattr(self.llm, f):
                    raise ValueError(f"deep fusion needs DiT {f} == LLM {f}")
            if spec.alignment is None:
                object.__setattr__(self, "spec", replace(spec, alignment=align_layers(self.llm.num_layers, self.dit.num_layers)))
            if len(self.spec.alignment) != self.dit.num_layers:
                raise ValueError("layer alignment length must equal DiT layers")
            self.spec.alignment.validate(self.llm.num_layers)
        elif spec.alignment is not None:
            raise ValueError("shallow variants always read the last LLM layer; alignment must be unset")
        if spec.positional is PositionalScheme.MROPE:
            chunks = spec.mrope_chunks or default_mrope_chunks(self.dit.head_dim)
            if sum(chunks) != self.dit.head_dim // 2:
                raise ValueError("mrope chunk sizes must sum to head_dim/2")
            object.__setattr__(self, "spec", replace(self.spec, mrope_chunks=tuple(chunks)))
        if spec.positional is PositionalScheme.ROPE1D_2D and self.dit.head_dim % 4:
            raise ValueError("2D rotary needs head_dim divisible by 4")
        if spec.positional is PositionalScheme.ROPE1D_APE and self.dit.hidden % 4:
            raise ValueError("2D APE needs hidden divisible by 4")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return g, g

    @property
    def image_tokens(self) -> int:
        g = self.image_size // self.patch_size
        return g * g

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def needs_projection(self) -> bool:
        return self.dit.hidden != self.llm.hidden

    def text_layer_for(self, dit_layer: int) -> int:
        """LLM layer whose states condition ``dit_layer``."""
        if self.spec.variant.is_deep:
            return self.spec.alignment[dit_layer]
        return self.llm.num_layers - 1
