from dataclasses import dataclass

import numpy as np
import pytest

from fusedit import FusedModel, FusionSpec, ModelConfig, StreamConfig
from fusedit.flow import NonFiniteError
from fusedit.gradcheck import mini_model
from fusedit.sampler import (
    SamplerConfig,
    build_text_kv_cache,
    cfg_combine,
    euler_sample,
    euler_sample_uncached,
    initial_noise,
    read_ppm,
    to_uint8,
    write_ppm,
)

PROMPTS = ["a red circle", "blue"]


@dataclass
class _Cfg:
    channels: int = 2
    image_size: int = 4
    text_len: int = 4


class StubModel:
    """Velocity ``fn(z, t)``; text is ignored."""

    def __init__(self, fn):
        self.fn = fn
        self.config = _Cfg()

    def encode_text(self, ids, pad):
        return None

    def velocity(self, z, t, ctx):
        return self.fn(z, t)


def test_sampler_config_validation():
    assert SamplerConfig() == SamplerConfig(steps=25, guidance_scale=6.0, seed=0, use_ema=True)
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(guidance_scale=-1)


def test_cfg_combine_cases(rng):
    u, c = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    np.testing.assert_allclose(cfg_combine(u, c, 1.0), c, atol=1e-15, rtol=0)
    np.testing.assert_array_equal(cfg_combine(u, c, 0.0), u)
    for s in (0.0, 2.5, 6.0):
        np.testing.assert_array_equal(cfg_combine(c, c, s), c)
    np.testing.assert_allclose(cfg_combine(u, c, 6.0), u + 6 * (c - u), rtol=1e-15)
    with pytest.raises(ValueError):
        cfg_combine(u, c[:1], 1.0)


@pytest.mark.parametrize("steps", [1, 2, 8, 25])
def test_constant_field_is_exact(steps, rng):
    c = 0.375  # exact under repeated addition of c/steps for these step counts
    model = StubModel(lambda z, t: np.full_like(z, c))
    cache = build_text_kv_cache(model, PROMPTS)
    cfg = SamplerConfig(steps=steps, guidance_scale=6.0, seed=3)
    z0 = initial_noise(cfg, (2, 2, 4, 4))
    out = euler_sample(model, cache, cfg, clamp=False)
    np.testing.assert_allclose(out, z0 + c, atol=1e-14, rtol=0)


def test_doubling_steps_on_constant_field(rng):
    model = StubModel(lambda z, t: np.full_like(z, -0.7))
    cache = build_text_kv_cache(model, PROMPTS)
    a = euler_sample(model, cache, SamplerConfig(steps=10), clamp=False)
    b = euler_sample(model, cache, SamplerConfig(steps=20), clamp=False)
    np.testing.assert_allclose(a, b, atol=1e-14, rtol=0)


def test_straight_line_stub_reaches_target():
    cfg = SamplerConfig(steps=25, seed=11)
    z0 = initial_noise(cfg, (2, 2, 4, 4))
    target = np.random.default_rng(2).uniform(-1, 1, z0.shape)
    model = StubModel(lambda z, t: target - z0)
    cache = build_text_kv_cache(model, PROMPTS)
    out = euler_sample(model, cache, cfg, clamp=False)
    assert np.max(np.abs(out - target)) < 1e-9


def test_one_step_zero_model_returns_noise():
    model = FusedModel.create(ModelConfig(), seed=0)
    cfg = SamplerConfig(steps=1, seed=5)
    cache = build_text_kv_cache(model, "a big red circle at center on black")
    out = euler_sample(model, cache, cfg, clamp=False)
    np.testing.assert_array_equal(out, initial_noise(cfg, out.shape))


def test_clamp_only_at_output():
    model = StubModel(lambda z, t: np.full_like(z, 3.0))
    cache = build_text_kv_cache(model, PROMPTS)
    out = euler_sample(model, cache, SamplerConfig(steps=4, seed=1))
    assert out.max() <= 1.0 and out.min() >= -1.0
    raw = euler_sample(model, cache, SamplerConfig(steps=4, seed=1), clamp=False)
    np.testing.assert_array_equal(np.clip(raw, -1, 1), out)


def test_non_finite_state_names_the_step():
    model = StubModel(lambda z, t: np.full_like(z, np.inf) if t[0] >= 0.5 else np.zeros_like(z))
    cache = build_text_kv_cache(model, PROMPTS)
    with np.errstate(invalid="ignore"), pytest.raises(NonFiniteError, match="step 3 of 4"):
        euler_sample(model, cache, SamplerConfig(steps=4))


def test_cache_determinism_and_entry_count():
    s = StreamConfig(num_layers=4, hidden=16, num_heads=2, num_kv_heads=1, head_dim=8, ffn_dim=32)
    d = StreamConfig(num_layers=3, hidden=16, num_heads=2, num_kv_heads=1, head_dim=8, ffn_dim=32)
    from fusedit import LayerAlignment

    cfg = ModelConfig(llm=s, dit=d, image_size=4, channels=2, text_len=6, timestep_dim=8,
                      spec=FusionSpec("deep", alignment=LayerAlignment((1, 1, 3))))
    model = FusedModel.create(cfg)
    a = build_text_kv_cache(model, PROMPTS)
    b = build_text_kv_cache(model, PROMPTS)
    assert sorted(a.entries) == [1, 3] and len(a.cond.kv) == 3
    for layer in a.entries:
        for x, y in zip(a.entries[layer], b.entries[layer]):
            assert np.array_equal(x, y)
    for (k1, v1), (k2, v2) in zip(a.cond.kv + a.uncond.kv, b.cond.kv + b.uncond.kv):
        assert np.array_equal(k1.data, k2.data) and np.array_equal(v1.data, v2.data)


def test_cache_is_immutable(mini):
    cache = build_text_kv_cache(mini[0], PROMPTS)
    with pytest.raises(ValueError):
        cache.cond.kv[0][0].data[...] = 0.0


def test_shallow_cache_keeps_one_adapted_entry():
    model = mini_model("shallow-self")
    cache = build_text_kv_cache(model, PROMPTS)
    assert list(cache.entries) == [model.config.llm.num_layers - 1]


def test_cached_equals_recomputed(mini):
    model, _ = mini
    cfg = SamplerConfig(steps=3, guidance_scale=6.0, seed=9)
    cached = euler_sample(model, build_text_kv_cache(model, PROMPTS), cfg, clamp=False)
    fresh = euler_sample_uncached(model, PROMPTS, cfg, clamp=False)
    assert np.max(np.abs(cached - fresh)) < 1e-10


def test_ema_weights_are_swapped_in_and_restored(mini, rng):
    model, _ = mini
    shadows = {k: rng.normal(0, 0.3, p.shape) for k, p in model.dit.items()}
    live = {k: p.data.copy() for k, p in model.dit.items()}
    cache = build_text_kv_cache(model, PROMPTS)
    cfg = SamplerConfig(steps=2, seed=1)
    a = euler_sample(model, cache, cfg, weights=shadows)
    b = euler_sample(model, cache, SamplerConfig(steps=2, seed=1, use_ema=False), weights=shadows)
    assert not np.array_equal(a, b)
    assert all(np.array_equal(live[k], p.data) for k, p in model.dit.items())


def test_seed_determinism(mini):
    model, _ = mini
    cache = build_text_kv_cache(model, PROMPTS)
    cfg = SamplerConfig(steps=2, seed=7)
    assert np.array_equal(euler_sample(model, cache, cfg), euler_sample(model, cache, cfg))


def test_ppm_round_trip(tmp_path, rng):
    x = np.clip(rng.normal(size=(3, 5, 7)), -1, 1)
    write_ppm(tmp_path / "a.ppm", x)
    raw = (tmp_path / "a.ppm").read_bytes()
    assert raw.startswith(b"P6\n7 5\n255\n") and len(raw) == len(b"P6\n7 5\n255\n") + 5 * 7 * 3
    back = read_ppm(tmp_path / "a.ppm")
    assert np.max(np.abs(back - x)) <= 1 / 127.5
    assert np.array_equal(to_uint8(back), to_uint8(x))


def test_to_uint8_linear_map():
    assert to_uint8(np.array([[[-1.0, 0.0, 1.0]]])).reshape(-1, 3)[:, 0].tolist() == [0, 128, 255]
