"""Euler ODE sampling with classifier-free guidance over a cached text stream."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .dit import TextContext
from .flow import NonFiniteError
from .llm import tokenize_batch


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 25
    guidance_scale: float = 6.0
    seed: int = 0
    use_ema: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.guidance_scale >= 0:
            raise ValueError("guidance_scale must be >= 0")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _freeze_context(ctx: TextContext) -> TextContext:
    for k, v in ctx.kv:
        _freeze(k.data)
        _freeze(v.data)
    _freeze(ctx.pad_mask)
    return ctx


@dataclass(frozen=True)
class TextKvCache:
    """Text-side K/V for one prompt batch and for the empty prompt, built once.

    ``entries`` / ``empty_entries`` map each distinct LLM layer read by the
    DiT to what is kept from it: post-rotary ``(K, V)`` for deep variants,
    the adapted last-layer states for shallow ones. ``cond`` and ``uncond``
    are the per-DiT-layer views handed to the velocity model.
    """

    prompts: tuple[str, ...]
    cond: TextContext
    uncond: TextContext
    entries: dict
    empty_entries: dict

    @property
    def pad_mask(self) -> np.ndarray:
        return self.cond.pad_mask

    @property
    def batch(self) -> int:
        return len(self.prompts)


def _encode(model, prompts: Sequence[str]):
    """``(context, entries)`` for a prompt batch."""
    ids, pad = tokenize_batch(prompts, model.config.text_len)
    with T.no_grad():
        if not hasattr(model, "run_llm"):
            return model.encode_text(ids, pad), {}
        from .fusion import adapt_text, text_context

        enc = model.run_llm(ids, pad)
        spec = model.config.spec
        if spec.variant.is_deep:
            ctx = text_context(model, enc)
            layers = sorted(set(spec.alignment.mapping))
            entries = {a: (_freeze(enc.keys[a].data), _freeze(enc.values[a].data)) for a in layers}
        else:
            # both shallow variants project this one tensor through per-layer K/V weights
            adapted = adapt_text(model, enc)
            ctx = text_context(model, enc, adapted)
            entries = {model.config.llm.num_layers - 1: _freeze(adapted.data)}
    return _freeze_context(ctx), entries


def build_text_kv_cache(model, prompt: str | Sequence[str]) -> TextKvCache:
    prompts = (prompt,) if isinstance(prompt, str) else tuple(prompt)
    if not prompts:
        raise ValueError("need at least one prompt")
    cond, entries = _encode(model, prompts)
    uncond, empty = _encode(model, [""] * len(prompts))
    return TextKvCache(prompts, cond, uncond, entries, empty)


def cfg_combine(v_uncond, v_cond, s: float):
    v_uncond = np.asarray(v_uncond, dtype=np.float64)
    v_cond = np.asarray(v_cond, dtype=np.float64)
    if v_uncond.shape != v_cond.shape:
        raise ValueError(f"cfg_combine: shapes {v_uncond.shape} and {v_cond.shape} differ")
    return v_uncond + s * (v_cond - v_uncond)


@contextlib.contextmanager
def swapped_weights(model, weights: dict | None):
    """Temporarily run ``model`` with ``weights`` (e.g. EMA shadows) in its DiT."""
    if weights is None:
        yield model
        return
    saved = {k: p.data for k, p in model.dit.items()}
    try:
        for k, p in model.dit.items():
            p.data = weights[k]
        yield model
    finally:
        for k, p in model.dit.items():
            p.data = saved[k]


def initial_noise(config: SamplerConfig, shape) -> np.ndarray:
    return np.random.default_rng(config.seed).normal(size=shape)


def _latent_shape(model, batch: int) -> tuple[int, ...]:
    c = model.config
    return (batch, c.channels, c.image_size, c.image_size)


def _integrate(model, z, config: SamplerConfig, contexts) -> np.ndarray:
    n = config.steps
    dt = 1.0 / n
    with T.no_grad():
        for k in range(n):
            t = np.full(z.shape[0], k / n)
            cond, uncond = contexts(k)
            v_u = T.as_tensor(model.velocity(z, t, uncond)).data
            v_c = T.as_tensor(model.velocity(z, t, cond)).data
            z = z + dt * cfg_combine(v_u, v_c, config.guidance_scale)
            if not np.all(np.isfinite(z)):
                raise NonFiniteError(f"non-finite sampler state after step {k + 1} of {n}")
    return z


def euler_sample(
    model,
    cache: TextKvCache,
    config: SamplerConfig = SamplerConfig(),
    weights: dict | None = None,
    shape=None,
    clamp: bool = True,
    z0: np.ndarray | None = None,
) -> np.ndarray:
    """Integrate ``dz = v(z, t) dt`` from noise (t=0) to data (t=1).

    ``weights`` replaces the DiT parameters for the run (pass the EMA
    shadows when ``config.use_ema``). ``z0`` overrides the seeded starting
    noise. Returns ``(B, C, H, W)``.
    """
    if z0 is None:
        shape = _latent_shape(model, cache.batch) if shape is None else tuple(shape)
        z = initial_noise(config, shape)
    else:
        z = np.array(z0, dtype=np.float64)
    with swapped_weights(model, weights if config.use_ema else None):
        z = _integrate(model, z, config, lambda k: (cache.cond, cache.uncond))
    return np.clip(z, -1.0, 1.0) if clamp else z


def euler_sample_uncached(
    model,
    prompts: Sequence[str],
    config: SamplerConfig = SamplerConfig(),
    weights: dict | None = None,
    clamp: bool = True,
) -> np.ndarray:
    """Reference path: re-run the LLM (and adapter) for both branches at every step."""
    prompts = list(prompts)
    z = initial_noise(config, _latent_shape(model, len(prompts)))
    ids, pad = tokenize_batch(prompts, model.config.text_len)
    eids, epad = tokenize_batch([""] * len(prompts), model.config.text_len)

    def contexts(k):
        return model.encode_text(ids, pad), model.encode_text(eids, epad)

    with swapped_weights(model, weights if config.use_ema else None):
        z = _integrate(model, z, config, contexts)
    return np.clip(z, -1.0, 1.0) if clamp else z


# ---------------------------------------------------------------------------
# image output
# ---------------------------------------------------------------------------


def to_uint8(latent: np.ndarray) -> np.ndarray:
    """``(C, H, W)`` in ``[-1, 1]`` -> ``(H, W, 3)`` bytes, linear map to ``[0, 255]``."""
    x = np.asarray(latent, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3, H, W) latent, got {x.shape}")
    if x.shape[0] == 1:
        x = np.repeat(x, 3, axis=0)
    x = np.clip(x, -1.0, 1.0)
    return np.rint((x + 1.0) * 127.5).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path, latent: np.ndarray) -> None:
    img = to_uint8(latent)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Back to ``(3, H, W)`` in ``[-1, 1]``."""
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while buf[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not buf[end : end + 1].isspace():
            end += 1
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError("not a P6 file with maxval 255")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(buf[pos + 1 : pos + 1 + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return data.transpose(2, 0, 1).astype(np.float64) / 127.5 - 1.0
