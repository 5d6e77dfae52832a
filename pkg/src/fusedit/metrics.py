"""Toy text-image alignment score: did the sampler draw what the caption says?"""

from __future__ import annotations

import zlib

import numpy as np

from .data import ShapeDataset, alignment_accuracy
from .sampler import SamplerConfig, build_text_kv_cache, euler_sample

EVAL_SPLIT = 2


def eval_scenes(n: int, seed: int = 0, size: int = 32):
    ds = ShapeDataset(seed=seed, size=size, split=EVAL_SPLIT)
    return [ds.example(i) for i in range(n)]


def prompt_noise(caption: str, seed: int, shape) -> np.ndarray:
    """Starting noise keyed by the prompt text, so scores ignore prompt order."""
    return np.random.default_rng([seed, zlib.crc32(caption.encode("utf-8"))]).normal(size=shape)


def sample_prompts(model, captions, config: SamplerConfig, weights=None, batch: int = 8) -> np.ndarray:
    c = model.config
    shape = (c.channels, c.image_size, c.image_size)
    out = []
    for lo in range(0, len(captions), batch):
        chunk = list(captions[lo : lo + batch])
        z0 = np.stack([prompt_noise(s, config.seed, shape) for s in chunk])
        cache = build_text_kv_cache(model, chunk)
        out.append(euler_sample(model, cache, config, weights=weights, z0=z0))
    return np.concatenate(out)


def toy_alignment_eval(model, n_prompts: int = 16, seed: int = 0, config: SamplerConfig | None = None,
                       weights=None, scenes=None) -> float:
    """Fraction of held-out prompts whose every object is recovered by template matching."""
    config = config or SamplerConfig(seed=seed)
    scenes = scenes if scenes is not None else [s for s, _ in eval_scenes(n_prompts, seed, model.config.image_size)]
    images = sample_prompts(model, [s.caption for s in scenes], config, weights)
    return alignment_accuracy(images, scenes)


def renderer_accuracy(n_prompts: int = 16, seed: int = 0, size: int = 32) -> float:
    """The detector scored on ground-truth renders; calibrates to 1.0."""
    pairs = eval_scenes(n_prompts, seed, size)
    return alignment_accuracy([im for _, im in pairs], [s for s, _ in pairs])


def noise_accuracy(n_prompts: int = 16, seed: int = 0, size: int = 32, channels: int = 3) -> float:
    """Chance level: clamped Gaussian noise scored against the prompts."""
    scenes = [s for s, _ in eval_scenes(n_prompts, seed, size)]
    images = [np.clip(prompt_noise(s.caption, seed, (channels, size, size)), -1, 1) for s in scenes]
    return alignment_accuracy(images, scenes)
