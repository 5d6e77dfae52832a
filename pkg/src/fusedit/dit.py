"""The trainable diffusion transformer operating on patchified latents."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import nn
from . import tensor as T
from .configs import FusionVariant, ModelConfig
from .nn import PositionalScheme, TimestepConditioning
from .tensor import Tensor

DitParams = dict  # name -> Tensor, all trainable


@dataclass
class TextContext:
    """Text keys/values seen by each DiT layer, plus the prompt PAD mask.

    ``kv[l]`` is ``(K, V)`` with shape ``(B, Hkv, Lt, head_dim)``.
    """

    kv: list[tuple[Tensor, Tensor]]
    pad_mask: np.ndarray  # (B, Lt), True at PAD

    @property
    def length(self) -> int:
        return self.pad_mask.shape[1]


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


def patchify(latent, patch_size: int = 2, weight=None, bias=None) -> tuple[Tensor, tuple[int, int]]:
    """``(B, C, H, W)`` -> tokens ``(B, gh*gw, p*p*C)`` in row-major grid order.

    Each token lists its pixels row-major with channels innermost. When
    ``weight`` is given the tokens are also linearly embedded.
    """
    x = T.as_tensor(latent)
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    b, c, h, w = x.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"latent {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = x.reshape(b, c, gh, p, gw, p)
    x = T.transpose(x, (0, 2, 4, 3, 5, 1)).reshape(b, gh * gw, p * p * c)
    if weight is not None:
        x = T.matmul(x, weight)
        if bias is not None:
            x = x + bias
    return x, (gh, gw)


def unpatchify(tokens, grid: tuple[int, int], patch_size: int, channels: int) -> Tensor:
    x = T.as_tensor(tokens)
    b, n, raw = x.shape
    gh, gw = grid
    p = patch_size
    if n != gh * gw or raw != p * p * channels:
        raise ValueError(f"unpatchify: {n} tokens of size {raw} do not fill grid {grid} x {p}x{p}x{channels}")
    x = x.reshape(b, gh, gw, p, p, channels)
    return T.transpose(x, (0, 5, 1, 3, 2, 4)).reshape(b, channels, gh * p, gw * p)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return stats.truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


def init_dit_params(cfg: ModelConfig, rng: np.random.Generator) -> DitParams:
    """ViT-style init: truncated normal (std 0.02) projections, zero biases,
    unit norm gains, zeros for adaLN-Zero heads and the output layer."""
    d, llm = cfg.dit, cfg.llm
    h = d.hidden
    spec = cfg.spec
    cond = spec.conditioning
    p: dict[str, np.ndarray] = {}

    def proj(name, *shape):
        p[name] = _trunc_normal(rng, shape)

    proj("patch_embed.w", cfg.patch_dim, h)
    p["patch_embed.b"] = np.zeros(h)
    if cond is not TimestepConditioning.NONE:
        p["t_embed.fc1.w"] = rng.normal(0.0, 0.02, (cfg.timestep_dim, h))
        p["t_embed.fc1.b"] = np.zeros(h)
        p["t_embed.fc2.w"] = rng.normal(0.0, 0.02, (h, h))
        p["t_embed.fc2.b"] = np.zeros(h)
    if cond is TimestepConditioning.ADALN_SINGLE:
        p["t_block.w"] = rng.normal(0.0, 0.02, (h, 6 * h))
        p["t_block.b"] = np.zeros(6 * h)
    if not spec.variant.is_deep:
        p["adapter.norm"] = np.ones(llm.hidden)
        proj("adapter.w", llm.hidden, h)
    for i in range(d.num_layers):
        pre = f"blocks.{i}"
        if cond is TimestepConditioning.ADALN_ZERO:
            p[f"{pre}.adaln.w"] = np.zeros((h, 6 * h))
            p[f"{pre}.adaln.b"] = np.zeros(6 * h)
        elif cond is TimestepConditioning.ADALN_SINGLE:
            p[f"{pre}.mod_table"] = rng.normal(0.0, 1.0, (6, h)) / np.sqrt(h)
        p[f"{pre}.attn_norm"] = np.ones(h)
        proj(f"{pre}.q", h, d.q_dim)
        proj(f"{pre}.k", h, d.kv_dim)
        proj(f"{pre}.v", h, d.kv_dim)
        proj(f"{pre}.o", d.q_dim, h)
        p[f"{pre}.q_norm"] = np.ones((d.num_heads, d.head_dim))
        p[f"{pre}.k_norm"] = np.ones((d.num_kv_heads, d.head_dim))
        if not spec.variant.is_deep:
            proj(f"{pre}.text_k", h, d.kv_dim)
            proj(f"{pre}.text_v", h, d.kv_dim)
        if spec.variant.is_cross:
            p[f"{pre}.cross_norm"] = np.ones(h)
            proj(f"{pre}.cross_q", h, d.q_dim)
            proj(f"{pre}.cross_o", d.q_dim, h)
            p[f"{pre}.cross_q_norm"] = np.ones((d.num_heads, d.head_dim))
            if spec.variant is FusionVariant.SHALLOW_CROSS:
                p[f"{pre}.cross_k_norm"] = np.ones((d.num_kv_heads, d.head_dim))
        p[f"{pre}.ffn_norm"] = np.ones(h)
        proj(f"{pre}.gate", h, d.ffn_dim)
        proj(f"{pre}.up", h, d.ffn_dim)
        proj(f"{pre}.down", d.ffn_dim, h)
    if cond is TimestepConditioning.ADALN_ZERO:
        p["final_adaln.w"] = np.zeros((h, 2 * h))
        p["final_adaln.b"] = np.zeros(2 * h)
    elif cond is TimestepConditioning.ADALN_SINGLE:
        p["final_table"] = rng.normal(0.0, 1.0, (2, h)) / np.sqrt(h)
    p["final_norm"] = np.ones(h)
    p["out.w"] = np.zeros((h, cfg.patch_dim))
    p["out.b"] = np.zeros(cfg.patch_dim)
    return {k: Tensor(v, requires_grad=True, name=f"dit.{k}") for k, v in p.items()}


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def image_rotary(cfg: ModelConfig):
    """Rotary map applied to image queries/keys for the configured scheme.

    1D schemes continue positions after the (padded) text sequence; 2D
    schemes use the patch grid coordinates.
    """
    gh, gw = cfg.grid
    rows, cols = np.divmod(np.arange(gh * gw), gw)
    scheme = cfg.spec.positional
    offset = cfg.text_len
    if scheme is PositionalScheme.ROPE1D_APE:
        return lambda x: x
    if scheme is PositionalScheme.ROPE1D:
        pos = offset + np.arange(gh * gw)
        return lambda x: nn.rope_1d(x, pos)
    if scheme is PositionalScheme.ROPE1D_2D:
        return lambda x: nn.rope_2d(x, rows, cols)
    ids = np.stack([offset + rows, offset + cols], axis=1)
    chunks = cfg.spec.mrope_chunks
    return lambda x: nn.mrope(x, ids, chunks)


def project_for_fusion(h: Tensor, params: DitParams, layer: int, cfg: ModelConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Image hidden ``(B, N, dit_hidden)`` -> QK-normed ``q, k, v`` in the
    attention space shared with the text stream."""
    d = cfg.dit
    pre = f"blocks.{layer}"
    q = nn.split_heads(T.matmul(h, params[f"{pre}.q"]), d.num_heads, d.head_dim)
    k = nn.split_heads(T.matmul(h, params[f"{pre}.k"]), d.num_kv_heads, d.head_dim)
    v = nn.split_heads(T.matmul(h, params[f"{pre}.v"]), d.num_kv_heads, d.head_dim)
    return nn.qk_normalize(q, params[f"{pre}.q_norm"]), nn.qk_normalize(k, params[f"{pre}.k_norm"]), v


def _final_modulation(cfg: ModelConfig, params: DitParams, t_emb: Tensor | None):
    cond = cfg.spec.conditioning
    h = cfg.dit.hidden
    if cond is TimestepConditioning.ADALN_ZERO:
        mod = T.matmul(T.silu(t_emb), params["final_adaln.w"]) + params["final_adaln.b"]
    elif cond is TimestepConditioning.ADALN_SINGLE:
        mod = params["final_table"].reshape(1, 2 * h) + T.concat([t_emb, t_emb], axis=-1)
    else:
        return None
    b = mod.shape[0]
    mod = mod.reshape(b, 1, 2 * h)
    return mod[:, :, :h], mod[:, :, h:]


def dit_forward(
    params: DitParams,
    cfg: ModelConfig,
    latent,
    t,
    text: TextContext | None = None,
) -> Tensor:
    """Predict velocity ``(B, C, H, W)`` from noisy latents at times ``t``.

    With ``text`` the image tokens attend to the per-layer text K/V, jointly
    in self-attention (deep, shallow-self) or in a separate cross-attention
    sub-layer (cross variants). Without it the DiT runs image-only.
    """
    d = cfg.dit
    spec = cfg.spec
    if text is not None and len(text.kv) != d.num_layers:
        raise ValueError(f"got text K/V for {len(text.kv)} layers, DiT has {d.num_layers}")
    x, grid = patchify(latent, cfg.patch_size, params["patch_embed.w"], params["patch_embed.b"])
    b, n, _ = x.shape
    if spec.positional is PositionalScheme.ROPE1D_APE:
        x = x + nn.ape_2d(grid[0], grid[1], d.hidden)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (b,))
    t_emb = None
    if spec.conditioning is not TimestepConditioning.NONE:
        t_emb = nn.timestep_embedding(t, params)
    rot = image_rotary(cfg)

    joint_mask = cross_mask = None
    if text is not None:
        valid = ~np.broadcast_to(text.pad_mask, (b, text.length))
        if cfg.attend_pad:
            valid = np.ones_like(valid)
        if spec.variant.is_cross:
            cross_mask = np.broadcast_to(valid[:, None, :], (b, n, text.length))
        else:
            joint_mask = np.concatenate(
                [np.broadcast_to(valid[:, None, :], (b, n, text.length)), np.ones((b, n, n), dtype=bool)], axis=-1
            )

    shared = None
    if spec.conditioning is TimestepConditioning.ADALN_SINGLE:
        shared = nn.single_head(t_emb, params)
    for i in range(d.num_layers):
        pre = f"blocks.{i}"
        x, mod = nn.apply_conditioning(spec.conditioning, i, t_emb, x, params, d.num_layers, shared)
        h = mod.pre(nn.rmsnorm(x, params[f"{pre}.attn_norm"]), "attn")
        q, k, v = project_for_fusion(h, params, i, cfg)
        q, k = rot(q), rot(k)
        mask = None
        if joint_mask is not None:
            tk, tv = text.kv[i]
            k = T.concat([tk, k], axis=2)
            v = T.concat([tv, v], axis=2)
            mask = joint_mask
        att = T.matmul(nn.merge_heads(nn.attention(q, k, v, mask)), params[f"{pre}.o"])
        x = x + mod.post(att, "attn")
        if cross_mask is not None:
            tk, tv = text.kv[i]
            hc = nn.rmsnorm(x, params[f"{pre}.cross_norm"])
            qc = nn.split_heads(T.matmul(hc, params[f"{pre}.cross_q"]), d.num_heads, d.head_dim)
            qc = nn.qk_normalize(qc, params[f"{pre}.cross_q_norm"])
            att = nn.merge_heads(nn.attention(qc, tk, tv, cross_mask))
            x = x + T.matmul(att, params[f"{pre}.cross_o"])
        h = mod.pre(nn.rmsnorm(x, params[f"{pre}.ffn_norm"]), "ffn")
        ffn = nn.geglu_ffn(h, params[f"{pre}.gate"], params[f"{pre}.up"], params[f"{pre}.down"])
        x = x + mod.post(ffn, "ffn")

    h = nn.rmsnorm(x, params["final_norm"])
    fm = _final_modulation(cfg, params, t_emb)
    if fm is not None:
        h = nn.modulate(h, *fm)
    out = T.matmul(h, params["out.w"]) + params["out.b"]
    return unpatchify(out, grid, cfg.patch_size, cfg.channels)
