"""Assemble the frozen text stream and the trainable DiT under each fusion variant.

* ``deep``: every DiT layer attends over ``[LLM-layer K/V || image K/V]``
  in one shared self-attention, the LLM layer picked by the alignment map.
* ``shallow-self``: last-layer LLM states -> RMS norm -> linear adapter ->
  per-layer trainable K/V projections, concatenated into self-attention.
* ``shallow-cross``: same text K/V, consumed by a cross-attention sub-layer
  after self-attention.
* ``deep-cross``: cross-attention sub-layer reading the LLM's own per-layer K/V.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .configs import FusionSpec, FusionVariant, LayerAlignment, ModelConfig, align_layers
from .dit import DitParams, TextContext, dit_forward, init_dit_params, project_for_fusion
from .llm import LlmParams, TextEncoding, causal_mask, init_llm_params, llm_forward
from .tensor import Tensor

__all__ = [
    "FusedModel",
    "FusionSpec",
    "FusionVariant",
    "LayerAlignment",
    "align_layers",
    "build_joint_mask",
    "text_context",
    "adapt_text",
    "deep_fusion_forward",
    "shallow_self_attn_forward",
    "shallow_cross_attn_forward",
    "deep_fusion_cross_attn_forward",
    "project_for_fusion",
]


def build_joint_mask(text_len: int, image_len: int, pad_mask=None) -> np.ndarray:
    """Boolean ``(Lt+Li, Lt+Li)`` mask; True where the row may attend the column.

    Text rows are causal over text and never see image columns; image rows
    see every non-PAD text column and every image column.
    """
    if text_len < 1 or image_len < 1:
        raise ValueError("text_len and image_len must be >= 1")
    n = text_len + image_len
    pad = np.zeros(text_len, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    m = np.zeros((n, n), dtype=bool)
    m[:text_len, :text_len] = causal_mask(text_len)
    m[text_len:, :text_len] = ~pad[None, :]
    m[text_len:, text_len:] = True
    return m


@dataclass
class FusedModel:
    config: ModelConfig
    llm: LlmParams
    dit: DitParams

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "FusedModel":
        llm_rng = np.random.default_rng([seed, 1])
        dit_rng = np.random.default_rng([seed, 2])
        return cls(config, init_llm_params(config.llm, llm_rng), init_dit_params(config, dit_rng))

    @property
    def spec(self) -> FusionSpec:
        return self.config.spec

    def parameters(self) -> dict[str, Tensor]:
        out = {f"llm.{k}": v for k, v in self.llm.items()}
        out.update({f"dit.{k}": v for k, v in self.dit.items()})
        return out

    def trainable(self) -> dict[str, Tensor]:
        return dict(self.dit)

    def zero_grad(self) -> None:
        for p in self.dit.values():
            p.grad = None

    # -- the two halves of a forward pass -----------------------------------
    def run_llm(self, ids, pad_mask=None) -> TextEncoding:
        return llm_forward(self.llm, self.config.llm, ids, pad_mask, attend_pad=self.config.attend_pad)

    def encode_text(self, ids, pad_mask=None) -> TextContext:
        return text_context(self, self.run_llm(ids, pad_mask))

    def velocity(self, latent, t, text: TextContext | None) -> Tensor:
        return dit_forward(self.dit, self.config, latent, t, text)

    def forward(self, ids, latent, t, pad_mask=None) -> Tensor:
        return _FORWARD[self.spec.variant](self, ids, latent, t, pad_mask)


def adapt_text(model: FusedModel, enc: TextEncoding) -> Tensor:
    """Shallow variants: last LLM layer -> RMS norm -> trainable linear adapter."""
    p = model.dit
    return T.matmul(nn.rmsnorm(enc.hidden_states[-1], p["adapter.norm"]), p["adapter.w"])


def text_context(model: FusedModel, enc: TextEncoding, adapted: Tensor | None = None) -> TextContext:
    """Per-DiT-layer text K/V for the model's variant.

    Deep variants reuse the LLM's post-rotary K/V from the aligned layer.
    Shallow variants project the last LLM layer through the trainable
    adapter and each layer's own K/V projections (this part is traced).
    """
    cfg = model.config
    if cfg.spec.variant.is_deep:
        kv = [(enc.keys[a], enc.values[a]) for a in cfg.spec.alignment.mapping]
        return TextContext(kv, enc.pad_mask)
    d = cfg.dit
    p = model.dit
    if adapted is None:
        adapted = adapt_text(model, enc)
    positions = np.arange(enc.length)
    kv = []
    for i in range(d.num_layers):
        pre = f"blocks.{i}"
        k = nn.split_heads(T.matmul(adapted, p[f"{pre}.text_k"]), d.num_kv_heads, d.head_dim)
        v = nn.split_heads(T.matmul(adapted, p[f"{pre}.text_v"]), d.num_kv_heads, d.head_dim)
        if cfg.spec.variant is FusionVariant.SHALLOW_CROSS:
            k = nn.qk_normalize(k, p[f"{pre}.cross_k_norm"])
        else:
            k = nn.rope_1d(nn.qk_normalize(k, p[f"{pre}.k_norm"]), positions)
        kv.append((k, v))
    return TextContext(kv, enc.pad_mask)


def _check(model: FusedModel, want: FusionVariant) -> None:
    if model.spec.variant is not want:
        raise ValueError(f"model is configured for {model.spec.variant.value}, not {want.value}")
    needs_adapter = not want.is_deep
    if needs_adapter != ("adapter.w" in model.dit):
        raise ValueError("DiT parameters do not match the fusion variant")
    if want.is_cross != ("blocks.0.cross_q" in model.dit):
        raise ValueError("DiT parameters do not match the fusion variant")


def _run(model: FusedModel, want: FusionVariant, ids, latent, t, pad_mask) -> Tensor:
    _check(model, want)
    return model.velocity(latent, t, model.encode_text(ids, pad_mask))


def deep_fusion_forward(model: FusedModel, ids, latent, t, pad_mask=None) -> Tensor:
    return _run(model, FusionVariant.DEEP, ids, latent, t, pad_mask)


def shallow_self_attn_forward(model: FusedModel, ids, latent, t, pad_mask=None) -> Tensor:
    return _run(model, FusionVariant.SHALLOW_SELF, ids, latent, t, pad_mask)


def shallow_cross_attn_forward(model: FusedModel, ids, latent, t, pad_mask=None) -> Tensor:
    return _run(model, FusionVariant.SHALLOW_CROSS, ids, latent, t, pad_mask)


def deep_fusion_cross_attn_forward(model: FusedModel, ids, latent, t, pad_mask=None) -> Tensor:
    return _run(model, FusionVariant.DEEP_CROSS, ids, latent, t, pad_mask)


_FORWARD = {
    FusionVariant.DEEP: deep_fusion_forward,
    FusionVariant.SHALLOW_SELF: shallow_self_attn_forward,
    FusionVariant.SHALLOW_CROSS: shallow_cross_attn_forward,
    FusionVariant.DEEP_CROSS: deep_fusion_cross_attn_forward,
}
