"""Frozen decoder-only language model in the Gemma layout, at toy scale.

Byte-level tokenizer, pre-norm blocks with multi-query causal attention,
gated-GELU FFN, and per-layer export of post-rotary keys and values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .configs import StreamConfig
from .tensor import Tensor

BOS = 256
PAD = 257

LlmParams = dict  # name -> Tensor, all frozen


def tokenize(text: str, max_len: int) -> tuple[np.ndarray, int]:
    """UTF-8 bytes prefixed with BOS, right-padded with PAD or truncated."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    body = list(text.encode("utf-8"))[: max_len - 1]
    ids = np.full(max_len, PAD, dtype=np.int64)
    ids[0] = BOS
    ids[1 : 1 + len(body)] = body
    return ids, 1 + len(body)


def detokenize(ids: Sequence[int]) -> str:
    out = bytearray()
    for i in ids:
        i = int(i)
        if i == BOS:
            continue
        if i == PAD:
            break
        out.append(i)
    return out.decode("utf-8", errors="replace")


def tokenize_batch(texts: Sequence[str], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(ids, pad_mask)``; ``pad_mask`` is True at PAD positions."""
    ids = np.stack([tokenize(s, max_len)[0] for s in texts])
    return ids, ids == PAD


def causal_mask(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return np.tril(np.ones((n, n), dtype=bool))


def init_llm_params(cfg: StreamConfig, rng: np.random.Generator, std: float = 0.02) -> LlmParams:
    def normal(*shape):
        return Tensor(rng.normal(0.0, std, size=shape))

    p = {"embed": normal(cfg.vocab_size, cfg.hidden)}
    for i in range(cfg.num_layers):
        pre = f"layers.{i}"
        p[f"{pre}.attn_norm"] = Tensor(np.ones(cfg.hidden))
        p[f"{pre}.q"] = normal(cfg.hidden, cfg.q_dim)
        p[f"{pre}.k"] = normal(cfg.hidden, cfg.kv_dim)
        p[f"{pre}.v"] = normal(cfg.hidden, cfg.kv_dim)
        p[f"{pre}.o"] = normal(cfg.q_dim, cfg.hidden)
        p[f"{pre}.q_norm"] = Tensor(np.ones((cfg.num_heads, cfg.head_dim)))
        p[f"{pre}.k_norm"] = Tensor(np.ones((cfg.num_kv_heads, cfg.head_dim)))
        p[f"{pre}.ffn_norm"] = Tensor(np.ones(cfg.hidden))
        p[f"{pre}.gate"] = normal(cfg.hidden, cfg.ffn_dim)
        p[f"{pre}.up"] = normal(cfg.hidden, cfg.ffn_dim)
        p[f"{pre}.down"] = normal(cfg.ffn_dim, cfg.hidden)
    p["final_norm"] = Tensor(np.ones(cfg.hidden))
    return p


@dataclass
class TextEncoding:
    ids: np.ndarray  # (B, L)
    pad_mask: np.ndarray  # (B, L), True at PAD
    hidden_states: list[Tensor]  # per layer, (B, L, hidden)
    keys: list[Tensor]  # per layer, (B, Hkv, L, head_dim), post-rotary
    values: list[Tensor]

    @property
    def length(self) -> int:
        return self.ids.shape[1]

    @property
    def lengths(self) -> np.ndarray:
        return (~self.pad_mask).sum(axis=1)


def llm_forward(
    params: LlmParams,
    cfg: StreamConfig,
    tokens,
    pad_mask: np.ndarray | None = None,
    attend_pad: bool = False,
) -> TextEncoding:
    """Run the frozen LLM and record each layer's hidden states and K/V.

    ``tokens`` is ``(B, L)`` or ``(L,)``. Unless ``attend_pad`` is set, PAD
    keys are hidden from every non-PAD query.
    """
    ids = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    b, n = ids.shape
    pad = ids == PAD if pad_mask is None else np.atleast_2d(np.asarray(pad_mask, dtype=bool))
    mask = np.broadcast_to(causal_mask(n), (b, n, n))
    if not attend_pad:
        mask = mask & (~pad[:, None, :] | np.eye(n, dtype=bool)[None])
    positions = np.arange(n)

    hs, ks, vs = [], [], []
    with T.no_grad():
        x = T.gather(params["embed"], ids, axis=0) * cfg.scale
        for i in range(cfg.num_layers):
            pre = f"layers.{i}"
            h = nn.rmsnorm(x, params[f"{pre}.attn_norm"])
            q = nn.split_heads(T.matmul(h, params[f"{pre}.q"]), cfg.num_heads, cfg.head_dim)
            k = nn.split_heads(T.matmul(h, params[f"{pre}.k"]), cfg.num_kv_heads, cfg.head_dim)
            v = nn.split_heads(T.matmul(h, params[f"{pre}.v"]), cfg.num_kv_heads, cfg.head_dim)
            q = nn.rope_1d(nn.qk_normalize(q, params[f"{pre}.q_norm"]), positions)
            k = nn.rope_1d(nn.qk_normalize(k, params[f"{pre}.k_norm"]), positions)
            att = nn.merge_heads(nn.attention(q, k, v, mask))
            x = x + T.matmul(att, params[f"{pre}.o"])
            h = nn.rmsnorm(x, params[f"{pre}.ffn_norm"])
            x = x + nn.geglu_ffn(h, params[f"{pre}.gate"], params[f"{pre}.up"], params[f"{pre}.down"])
            hs.append(x)
            ks.append(k)
            vs.append(v)
    return TextEncoding(ids=ids, pad_mask=pad, hidden_states=hs, keys=ks, values=vs)
