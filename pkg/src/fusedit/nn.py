"""Transformer sub-layers shared by the language and diffusion streams.

Attention tensors use the layout ``(batch..., heads, seq, head_dim)``.
Rotary embeddings rotate consecutive channel pairs ``(2i, 2i+1)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

RMS_EPS = 1e-6
ROPE_BASE = 10000.0


class TimestepConditioning(str, enum.Enum):
    ADALN_ZERO = "adaln-zero"
    ADALN_SINGLE = "adaln-single"
    ADDITION = "addition"
    NONE = "none"


class PositionalScheme(str, enum.Enum):
    ROPE1D_APE = "rope1d+ape"
    ROPE1D = "rope1d"
    ROPE1D_2D = "rope1d+2d"
    MROPE = "mrope"


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def _mask_bias(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("attention: a query row has no permitted key")
    return np.where(mask, 0.0, -np.inf)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention with grouped key/value heads.

    ``q`` is ``(..., H, Lq, d)``; ``k`` and ``v`` are ``(..., Hkv, Lk, d)``
    with ``H % Hkv == 0``. ``mask`` is boolean, broadcastable to
    ``(..., Lq, Lk)`` over the non-head leading dims; True means attendable.
    Returns ``(..., H, Lq, d)``.
    """
    if q.ndim < 3 or k.shape != v.shape or k.ndim != q.ndim or k.shape[-1] != q.shape[-1]:
        raise T.ShapeError("attention", q.shape, k.shape, v.shape)
    heads, lq, d = q.shape[-3:]
    kv_heads, lk = k.shape[-3], k.shape[-2]
    if heads % kv_heads:
        raise T.ShapeError("attention", q.shape, k.shape, detail="heads not a multiple of kv heads")
    lead = q.shape[:-3]
    group = heads // kv_heads
    # fold the query heads of each KV group into the query axis
    qg = q.reshape(*lead, kv_heads, group * lq, d)
    bias = None
    if mask is not None:
        bias = _mask_bias(mask)
        if bias.shape[-2:] != (lq, lk):
            raise T.ShapeError("attention", q.shape, k.shape, np.shape(mask), detail="mask")
        bias = bias[..., None, None, :, :]
    out = T.attention_scores(qg, k, v, bias)
    return out.reshape(*lead, heads, lq, d)


def split_heads(x: Tensor, heads: int, head_dim: int) -> Tensor:
    """``(B, L, heads*head_dim)`` -> ``(B, heads, L, head_dim)``."""
    b, l, _ = x.shape
    return T.transpose(x.reshape(b, l, heads, head_dim), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, l, d = x.shape
    return T.transpose(x, (0, 2, 1, 3)).reshape(b, l, h * d)


# ---------------------------------------------------------------------------
# normalization and feed-forward
# ---------------------------------------------------------------------------


def rmsnorm(x: Tensor, gain, eps: float = RMS_EPS) -> Tensor:
    """``x / sqrt(mean(x^2) + eps) * gain`` over the last axis."""
    gain = T.as_tensor(gain)
    if gain.shape[-1] != x.shape[-1]:
        raise T.ShapeError("rmsnorm", x.shape, gain.shape)
    return T.rms_normalize(x, eps) * gain


def qk_normalize(x: Tensor, gains) -> Tensor:
    """Per-head RMS norm of ``(B, H, L, d)`` states with ``(H, d)`` gains."""
    gains = T.as_tensor(gains)
    if gains.shape != (x.shape[-3], x.shape[-1]):
        raise T.ShapeError("qk_normalize", x.shape, gains.shape)
    return rmsnorm(x, gains.reshape(gains.shape[0], 1, gains.shape[1]))


def geglu_ffn(x: Tensor, gate_w, up_w, down_w) -> Tensor:
    return T.matmul(T.gated_gelu(T.matmul(x, gate_w), T.matmul(x, up_w)), down_w)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1.0 + scale) + shift


# ---------------------------------------------------------------------------
# timestep embedding and conditioning
# ---------------------------------------------------------------------------


def timestep_features(t, dim: int) -> np.ndarray:
    """Sinusoidal features ``[sin(t w_i), cos(t w_i)]``, ``w_i`` geometric on [1, 1e4]."""
    if dim % 2:
        raise ValueError("timestep feature dim must be even")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = np.geomspace(1.0, 1e4, dim // 2)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def timestep_embedding(t, params: Mapping[str, Tensor], prefix: str = "t_embed") -> Tensor:
    """Features followed by Linear -> SiLU -> Linear. Returns ``(B, hidden)``."""
    w1 = params[f"{prefix}.fc1.w"]
    feats = Tensor(timestep_features(t, w1.shape[0]))
    h = T.silu(T.matmul(feats, w1) + params[f"{prefix}.fc1.b"])
    return T.matmul(h, params[f"{prefix}.fc2.w"]) + params[f"{prefix}.fc2.b"]


@dataclass
class LayerModulation:
    """Shift/scale/gate vectors for the attention and FFN branches of one block.

    Each field is ``(B, 1, hidden)`` or None (meaning no modulation).
    """

    shift_attn: Tensor | None = None
    scale_attn: Tensor | None = None
    gate_attn: Tensor | None = None
    shift_ffn: Tensor | None = None
    scale_ffn: Tensor | None = None
    gate_ffn: Tensor | None = None

    def pre(self, h: Tensor, branch: str) -> Tensor:
        shift, scale = getattr(self, f"shift_{branch}"), getattr(self, f"scale_{branch}")
        return h if shift is None else modulate(h, shift, scale)

    def post(self, out: Tensor, branch: str) -> Tensor:
        gate = getattr(self, f"gate_{branch}")
        return out if gate is None else gate * out


def _split_modulation(mod: Tensor, hidden: int) -> LayerModulation:
    b = mod.shape[0]
    mod = mod.reshape(b, 1, 6 * hidden)
    parts = [mod[:, :, i * hidden : (i + 1) * hidden] for i in range(6)]
    return LayerModulation(*parts)


def apply_conditioning(
    variant: TimestepConditioning,
    layer_idx: int,
    t_emb: Tensor | None,
    x: Tensor,
    params: Mapping[str, Tensor],
    num_layers: int,
    shared: Tensor | None = None,
) -> tuple[Tensor, LayerModulation]:
    """Timestep conditioning for DiT block ``layer_idx``.

    Returns the (possibly shifted) block input and the block's modulation.
    Addition injects ``t_emb`` into every image token before block 0 only;
    None ignores ``t_emb`` entirely. For adaLN-Single, ``shared`` is the
    output of :func:`single_head`, computed once per forward pass.
    """
    if not 0 <= layer_idx < num_layers:
        raise IndexError(f"layer_idx {layer_idx} out of range for {num_layers} layers")
    variant = TimestepConditioning(variant)
    hidden = x.shape[-1]
    if variant is TimestepConditioning.NONE:
        return x, LayerModulation()
    if variant is TimestepConditioning.ADDITION:
        if layer_idx == 0:
            x = x + t_emb.reshape(t_emb.shape[0], 1, hidden)
        return x, LayerModulation()
    if variant is TimestepConditioning.ADALN_ZERO:
        p = f"blocks.{layer_idx}.adaln"
        mod = T.matmul(T.silu(t_emb), params[f"{p}.w"]) + params[f"{p}.b"]
        return x, _split_modulation(mod, hidden)
    # adaLN-Single: one global head, refined per layer by a learned (6, hidden) table
    glob = single_head(t_emb, params) if shared is None else shared
    table = params[f"blocks.{layer_idx}.mod_table"].reshape(1, 6 * hidden)
    return x, _split_modulation(glob + table, hidden)


def single_head(t_emb: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Global adaLN-Single modulation shared by every block."""
    return T.matmul(T.silu(t_emb), params["t_block.w"]) + params["t_block.b"]


# ---------------------------------------------------------------------------
# rotary and absolute positional encodings
# ---------------------------------------------------------------------------


def rope_frequencies(head_dim: int, base: float = ROPE_BASE) -> np.ndarray:
    if head_dim % 2:
        raise ValueError("rotary head_dim must be even")
    return base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)




def rotate(x: Tensor, angles: np.ndarray) -> Tensor:
    """Rotate channel pairs of ``x`` (``(..., L, d)``) by ``angles`` (``(L, d/2)``)."""
    d = x.shape[-1]
    angles = np.asarray(angles, dtype=np.float64)
    if angles.shape != (x.shape[-2], d // 2) or d % 2:
        raise T.ShapeError("rotate", x.shape, angles.shape)
    cos = np.repeat(np.cos(angles), 2, axis=-1)
    sin = np.repeat(np.sin(angles), 2, axis=-1)
    return x * cos + T.rotate_pairs(x) * sin


def rope_1d(x: Tensor, positions, base: float = ROPE_BASE, inv_freq: np.ndarray | None = None) -> Tensor:
    """Standard rotary embedding; pair ``i`` turns by ``pos * base**(-2i/d)``."""
    pos = np.asarray(positions, dtype=np.float64)
    freqs = rope_frequencies(x.shape[-1], base) if inv_freq is None else np.asarray(inv_freq)
    return rotate(x, pos[:, None] * freqs[None, :])


def rope_2d(x: Tensor, rows, cols, base: float = ROPE_BASE) -> Tensor:
    """Axis-split rotary: the first half of the frequency pairs follow the row
    index, the second half the column index."""
    d = x.shape[-1]
    if d % 4:
        raise ValueError("rope_2d needs head_dim divisible by 4")
    freqs = rope_frequencies(d, base)
    q = d // 4
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    angles = np.concatenate([rows[:, None] * freqs[None, :q], cols[:, None] * freqs[None, q:]], axis=-1)
    return rotate(x, angles)


def mrope(x: Tensor, position_ids, chunk_sizes: Sequence[int], base: float = ROPE_BASE) -> Tensor:
    """Multi-axis rotary: frequency chunk ``j`` uses coordinate ``j`` of each
    token's position id (``position_ids`` is ``(L, len(chunk_sizes))``)."""
    d = x.shape[-1]
    chunk_sizes = [int(c) for c in chunk_sizes]
    if sum(chunk_sizes) != d // 2 or any(c < 0 for c in chunk_sizes):
        raise ValueError(f"mrope chunk sizes {chunk_sizes} must sum to head_dim/2 = {d // 2}")
    ids = np.asarray(position_ids, dtype=np.float64)
    if ids.ndim != 2 or ids.shape[1] != len(chunk_sizes):
        raise T.ShapeError("mrope", x.shape, ids.shape)
    axis_of_pair = np.repeat(np.arange(len(chunk_sizes)), chunk_sizes)
    angles = ids[:, axis_of_pair] * rope_frequencies(d, base)[None, :]
    return rotate(x, angles)


def default_mrope_chunks(head_dim: int) -> tuple[int, int]:
    half = head_dim // 2
    return (half - half // 2, half // 2)


def ape_2d(rows: int, cols: int, dim: int) -> np.ndarray:
    """Fixed sin/cos table ``(rows*cols, dim)``: row code in the first half of
    the channels, column code in the second; each half is ``[sin, cos]``."""
    if dim % 4:
        raise ValueError("ape_2d needs dim divisible by 4")
    q = dim // 4
    omega = 1.0 / 10000 ** (np.arange(q, dtype=np.float64) / q)

    def code(pos):
        a = pos[:, None] * omega[None, :]
        return np.concatenate([np.sin(a), np.cos(a)], axis=-1)

    r, c = np.divmod(np.arange(rows * cols), cols)
    return np.concatenate([code(r.astype(float)), code(c.astype(float))], axis=-1)
