import numpy as np
import pytest
from scipy import stats

from fusedit import tensor as T
from fusedit.flow import (
    FlowBatch,
    NonFiniteError,
    TrainState,
    adamw_step,
    apply_dropout,
    cfg_dropout,
    ema_update,
    interpolate,
    rf_loss,
    sample_t_logit_normal,
    zero_model_loss,
)
from fusedit.gradcheck import check_model, mini_batch, mini_model
from fusedit.llm import tokenize
from fusedit.tensor import Tensor


def test_interpolate_endpoints_and_symmetry(rng):
    x0, x1 = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 2, 4))
    assert np.array_equal(interpolate(x0, x1, np.zeros(3)), x0)
    assert np.array_equal(interpolate(x0, x1, np.ones(3)), x1)
    assert np.array_equal(interpolate(-x1, x1, np.full(3, 0.5)), np.zeros_like(x1))


def test_interpolate_shape_mismatch():
    with pytest.raises(ValueError):
        interpolate(np.zeros(3), np.zeros(4), 0.5)


class OracleVelocity:
    """Stub model whose velocity is the exact target of one batch."""

    def __init__(self, batch):
        self.batch = batch

    def encode_text(self, ids, pad):
        return None

    def velocity(self, x, t, ctx):
        return Tensor(self.batch.target)


def test_zero_model_loss_is_closed_form(mini):
    from fusedit import FusedModel, FusionSpec, ModelConfig, StreamConfig

    model, batch = mini
    s = StreamConfig(2, 16, 2, 1, 8, 32)
    zero = FusedModel.create(ModelConfig(llm=s, dit=s, spec=FusionSpec(model.spec.variant), image_size=4, channels=2,
                                         text_len=5, timestep_dim=8))
    assert rf_loss(zero, batch).item() == float(np.mean((batch.x1 - batch.x0) ** 2)) == zero_model_loss(batch)


def test_oracle_velocity_has_zero_loss(mini):
    _, batch = mini
    assert rf_loss(OracleVelocity(batch), batch).item() == 0.0


def test_rf_loss_gradient(variant):
    res = check_model(variant)
    assert max(res.values()) < 1e-3


def test_flow_batch_validation(rng):
    x = rng.normal(size=(2, 1, 2, 2))
    ids = np.zeros((2, 3), dtype=int)
    with pytest.raises(ValueError):
        FlowBatch(x, x, np.array([0.0, 0.5]), ids, ids == 1, np.zeros(2, bool))
    with pytest.raises(ValueError):
        FlowBatch(x, x, np.array([0.5]), ids, ids == 1, np.zeros(2, bool))


def test_non_finite_loss_is_reported(mini):
    model, batch = mini
    model.dit["out.b"].data = np.full_like(model.dit["out.b"].data, np.nan)
    with pytest.raises(NonFiniteError):
        rf_loss(model, batch)


def test_logit_normal_median_and_iqr_mass():
    t = sample_t_logit_normal(np.random.default_rng(0), 100_000)
    assert np.all((t > 0) & (t < 1))
    assert abs(np.median(t) - 0.5) < 0.01
    logit = np.log(3.0)
    want = stats.norm.cdf(logit) - stats.norm.cdf(-logit)
    assert abs(want - 0.728) < 1e-3
    assert abs(np.mean((t > 0.25) & (t < 0.75)) - want) < 0.01


def test_logit_normal_rejects_bad_scale():
    with pytest.raises(ValueError):
        sample_t_logit_normal(np.random.default_rng(0), 3, scale=0.0)


def test_dropout_rates():
    assert not cfg_dropout(np.random.default_rng(0), ["x"] * 1000, 0.0).any()
    flags = cfg_dropout(np.random.default_rng(0), ["x"] * 100_000, 0.1)
    assert abs(flags.mean() - 0.1) < 0.005
    with pytest.raises(ValueError):
        cfg_dropout(np.random.default_rng(0), ["x"], 1.0)


def test_dropped_rows_are_the_empty_prompt():
    ids = np.stack([tokenize("a red circle", 8)[0], tokenize("blue", 8)[0]])
    out, pad = apply_dropout(ids, np.array([True, False]))
    assert out[0].tolist() == tokenize("", 8)[0].tolist()
    assert out[1].tolist() == ids[1].tolist()
    assert pad[0].sum() == 7


def _param(v, g):
    p = Tensor(np.array([v], dtype=float), requires_grad=True)
    p.grad = np.array([g], dtype=float)
    return {"w": p}


def test_adamw_first_step_by_hand():
    params = _param(0.0, 1.0)
    state = TrainState.create(params)
    adamw_step(params, state)
    # m_hat = g, v_hat = g^2: update = -lr * 1 / (1 + eps)
    assert params["w"].data[0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)
    assert state.step == 1


def test_adamw_decoupled_weight_decay():
    params = _param(2.0, 0.0)
    state = TrainState.create(params)
    adamw_step(params, state)
    assert params["w"].data[0] == 2.0 * (1 - 1e-4 * 1e-4)


def test_adamw_clips_global_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([6.0, 8.0])
    params = {"a": a}
    state = TrainState.create(params)
    norm = adamw_step(params, state)
    assert norm == 10.0
    np.testing.assert_allclose(state.m["a"], 0.1 * np.array([0.6, 0.8]), rtol=1e-14)


def test_adamw_rejects_non_finite():
    params = _param(0.0, np.inf)
    with pytest.raises(NonFiniteError):
        adamw_step(params, TrainState.create(params))


def test_step_leaves_llm_untouched(mini):
    model, batch = mini
    before = {k: p.data.copy() for k, p in model.llm.items()}
    state = TrainState.create(model.trainable())
    rf_loss(model, batch).backward()
    adamw_step(model.trainable(), state)
    assert all(np.array_equal(before[k], p.data) for k, p in model.llm.items())
    assert all(p.grad is None for p in model.llm.values())


def test_ema_cadence_and_blend():
    p = Tensor(np.array([1.0]), requires_grad=True)
    params = {"w": p}
    state = TrainState.create(params)
    p.data = np.array([3.0])
    for step in range(1, 151):
        state.step = step
        acted = ema_update(state, params)
        assert acted == (step == 100)
        if step == 100:
            assert state.ema["w"][0] == 0.99 * 1.0 + 0.01 * 3.0
    assert state.ema["w"][0] == 0.99 * 1.0 + 0.01 * 3.0


def test_ema_fixed_point():
    p = Tensor(np.array([0.7, -2.0]), requires_grad=True)
    state = TrainState.create({"w": p})
    for step in (100, 200, 300):
        state.step = step
        ema_update(state, {"w": p})
        np.testing.assert_allclose(state.ema["w"], p.data, rtol=1e-15)


def test_optimizer_determinism(mini):
    def run():
        model = mini_model(mini[0].spec.variant.value)
        batch = mini_batch(model)
        state = TrainState.create(model.trainable())
        for _ in range(3):
            model.zero_grad()
            rf_loss(model, batch).backward()
            adamw_step(model.trainable(), state)
        return {k: p.data.copy() for k, p in model.dit.items()}

    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)


@pytest.mark.parametrize("variant,names", [
    ("shallow-self", ("adapter.w", "blocks.0.text_k", "blocks.1.text_v")),
    ("shallow-cross", ("adapter.w", "blocks.0.text_k", "blocks.0.cross_q")),
    ("deep", ("blocks.0.k", "blocks.1.q")),
])
def test_text_pathway_gets_gradient(variant, names):
    model = mini_model(variant)
    loss = rf_loss(model, mini_batch(model))
    assert np.isfinite(loss.item())
    loss.backward()
    for n in names:
        assert np.any(model.dit[n].grad != 0), n


def test_rf_loss_is_element_mean(mini):
    model, batch = mini
    with T.no_grad():
        v = model.velocity(batch.xt, batch.t, model.encode_text(batch.ids, batch.pad_mask)).data
    assert rf_loss(model, batch).item() == pytest.approx(np.mean((v - batch.target) ** 2), rel=1e-14)
