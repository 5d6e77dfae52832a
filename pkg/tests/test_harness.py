import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fusedit import checkpoint as ck
from fusedit.cli import main
from fusedit.configs import TOY_LLM_V2, FusionVariant
from fusedit.data import (
    BACKGROUNDS,
    COLORS,
    SceneObject,
    ShapeDataset,
    ShapeScene,
    generate_scene,
    object_center,
    parse_caption,
    sample_scene,
)
from fusedit.flow import TrainState, zero_model_loss
from fusedit.fusion import FusedModel
from fusedit.metrics import eval_scenes, noise_accuracy, renderer_accuracy, toy_alignment_eval
from fusedit.nn import PositionalScheme, TimestepConditioning
from fusedit.presets import BASELINE, FINAL_RECIPE, grid
from fusedit.runconfig import ConfigError, RunConfig, field_names
from fusedit.sampler import SamplerConfig
from fusedit.train import make_batch

from conftest import TINY


# --- dataset ------------------------------------------------------------------


def test_scene_determinism():
    a = generate_scene(np.random.default_rng(42))
    b = generate_scene(np.random.default_rng(42))
    assert a[0] == b[0] and np.array_equal(a[1], b[1])
    ds = ShapeDataset(seed=3)
    assert np.array_equal(ds.example(17)[1], ShapeDataset(seed=3).example(17)[1])


@given(st.integers(0, 2**32 - 1), st.sampled_from([32, 48, 64]))
def test_object_center_has_object_color(seed, size):
    scene, img = generate_scene(np.random.default_rng(seed), size)
    assert img.shape == (3, size, size) and img.min() >= -1 and img.max() <= 1
    for obj in scene.objects:
        r, c = object_center(obj, size)
        np.testing.assert_allclose(img[:, r, c], 2 * np.asarray(COLORS[obj.color]) - 1, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_caption_round_trip(seed):
    scene = sample_scene(np.random.default_rng(seed))
    assert parse_caption(scene.caption) == scene
    assert 1 <= len(scene.objects) <= 2
    assert len({o.cell for o in scene.objects}) == len(scene.objects)


def test_caption_template():
    scene = ShapeScene((SceneObject("circle", "red", (1, 1)), SceneObject("square", "blue", (0, 2), "small")), "gray")
    assert scene.caption == "a big red circle at center and a small blue square at top right on gray"
    assert np.allclose(scene.render(12)[:, 0, 0], 2 * np.asarray(BACKGROUNDS["gray"]) - 1)


def test_scene_validation():
    with pytest.raises(ValueError):
        SceneObject("hexagon", "red", (0, 0))
    with pytest.raises(ValueError):
        SceneObject("circle", "red", (3, 0))
    o = SceneObject("circle", "red", (0, 0))
    with pytest.raises(ValueError):
        ShapeScene((o, SceneObject("square", "blue", (0, 0))))
    with pytest.raises(ValueError):
        parse_caption("a big red circle at center")


# --- toy alignment metric -----------------------------------------------------


def test_renderer_scores_one():
    assert renderer_accuracy(16, seed=0) == 1.0


def test_noise_is_near_chance():
    acc = noise_accuracy(16, seed=0)
    print(f"clamped-noise accuracy {acc:.3f}")
    assert 0.0 <= acc <= 1.0


def test_alignment_eval_ignores_prompt_order():
    run = RunConfig().with_overrides(dict(a.split("=") for a in TINY[1::2]))
    model = FusedModel.create(run.model_config())
    scenes = [s for s, _ in eval_scenes(4, seed=1, size=run.image_size)]
    cfg = SamplerConfig(steps=2, seed=1)
    a = toy_alignment_eval(model, config=cfg, scenes=scenes)
    b = toy_alignment_eval(model, config=cfg, scenes=scenes[::-1])
    assert a == b and 0.0 <= a <= 1.0


# --- run config ---------------------------------------------------------------


def test_defaults_follow_the_recipe():
    r = RunConfig()
    assert (r.lr, r.weight_decay, r.clip, r.dropout) == (1e-4, 1e-4, 1.0, 0.1)
    assert (r.ema_decay, r.ema_every, r.sample_steps, r.guidance) == (0.99, 100, 25, 6.0)
    assert (r.beta1, r.beta2, r.image_size, r.batch, r.steps) == (0.9, 0.999, 32, 32, 2000)


@pytest.mark.parametrize("run", [BASELINE, FINAL_RECIPE, BASELINE.replace(alignment=(0, 1, 2, 3), attend_pad=True)])
def test_config_text_round_trip(run):
    assert RunConfig.from_text(run.to_text()) == run
    assert set(field_names()) == {line.split(" = ")[0] for line in run.to_text().splitlines()}


def test_config_comments_and_errors():
    r = RunConfig.from_text("# header\nvariant = shallow-cross   # trailing\n\nlr = 3e-4\n")
    assert r.variant is FusionVariant.SHALLOW_CROSS and r.lr == 3e-4
    for bad in ("nope = 1", "variant = sideways", "lr", "batch = 0", "llm.hidden = x", "dit.depth = 3",
                "alignment = 0,9,1,2", "use_ema = maybe"):
        with pytest.raises(ConfigError):
            RunConfig.from_text(bad)


def test_final_recipe_has_three_deltas():
    diff = {f for f in BASELINE.__dataclass_fields__ if getattr(BASELINE, f) != getattr(FINAL_RECIPE, f)}
    assert diff == {"conditioning", "positional", "llm"}
    assert FINAL_RECIPE.conditioning is TimestepConditioning.NONE
    assert FINAL_RECIPE.positional is PositionalScheme.ROPE1D_2D
    assert FINAL_RECIPE.llm == TOY_LLM_V2


def test_full_grid_covers_every_axis():
    g = grid("full")
    spec = {(r.variant, r.conditioning, r.positional) for r in g.values()}
    assert len(spec) == 4 * 4 * 4
    assert {r.alignment for r in g.values()} > {None}
    with pytest.raises(KeyError):
        grid("missing")


# --- checkpoint ---------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_trained():
    from fusedit.train import Trainer

    run = RunConfig().with_overrides(dict(a.split("=") for a in TINY[1::2])).replace(steps=3)
    tr = Trainer(run)
    tr.fit()
    return run, tr


def test_checkpoint_round_trip_bit_exact(tiny_trained, tmp_path):
    run, tr = tiny_trained
    path = tmp_path / "a.fdtk"
    ck.save_training(path, tr.model, tr.state)
    model = FusedModel.create(run.model_config(), seed=99)
    state = TrainState.create(model.trainable(), seed=run.seed)
    ck.load_training(path, model, state)
    for k, p in tr.model.parameters().items():
        q = model.parameters()[k]
        assert np.array_equal(p.data, q.data) and p.requires_grad == q.requires_grad
    assert state.step == tr.state.step == 3
    for name in model.dit:
        assert np.array_equal(state.m[name], tr.state.m[name])
        assert np.array_equal(state.v[name], tr.state.v[name])
        assert np.array_equal(state.ema[name], tr.state.ema[name])
    ck.save_training(tmp_path / "b.fdtk", model, state)
    assert path.read_bytes() == (tmp_path / "b.fdtk").read_bytes()


def test_namespace_sets_trainable_flags(tiny_trained, tmp_path):
    run, tr = tiny_trained
    path = tmp_path / "a.fdtk"
    ck.save_training(path, tr.model)
    model = FusedModel.create(run.model_config())
    for p in model.llm.values():
        p.requires_grad = True
    ck.load_training(path, model)
    assert not any(p.requires_grad for p in model.llm.values())
    assert all(p.requires_grad for p in model.dit.values())


@given(st.dictionaries(st.text(min_size=1, max_size=8), st.lists(st.integers(0, 3), max_size=3), max_size=4),
       st.integers(0, 2**31))
def test_encode_decode_round_trip(shapes, seed):
    rng = np.random.default_rng(seed)
    tensors = {k: rng.normal(size=tuple(v)) for k, v in shapes.items()}
    back = ck.decode(ck.encode(tensors))
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape and np.array_equal(back[k], tensors[k])


def test_version_one_reads_as_f32():
    x = {"w": np.array([[1.0, 1 / 3], [np.pi, -2.5]])}
    buf = ck.encode(x, version=1)
    assert struct.unpack_from("<I", buf, 4) == (1,)
    np.testing.assert_array_equal(ck.decode(buf)["w"], x["w"].astype(np.float32).astype(np.float64))


def test_checkpoint_errors(tiny_trained, tmp_path):
    run, tr = tiny_trained
    buf = ck.encode(ck.pack(tr.model, tr.state))
    with pytest.raises(ck.BadMagicError):
        ck.decode(b"XXXX" + buf[4:])
    with pytest.raises(ck.UnsupportedVersionError):
        ck.decode(buf[:4] + struct.pack("<I", 9) + buf[8:])
    with pytest.raises(ck.TruncatedCheckpointError):
        ck.decode(buf[:-3])
    with pytest.raises(ck.TruncatedCheckpointError):
        ck.decode(buf[:5])
    wider = run.with_overrides({"dit.hidden": "24"})
    other = FusedModel.create(wider.model_config())
    with pytest.raises(ck.ShapeMismatchError, match=r"dit\.patch_embed\.w|dit\.[a-z_.0-9]+"):
        ck.unpack(ck.decode(buf), other)
    tensors = ck.decode(buf)
    del tensors["dit.out.w"]
    with pytest.raises(ck.MissingTensorError, match="dit.out.w"):
        ck.unpack(tensors, FusedModel.create(run.model_config()))


# --- CLI ----------------------------------------------------------------------


def test_train_zero_steps_logs_closed_form(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--steps", "0", "--out", str(out), *TINY]) == 0
    assert (out / "ckpt_000000.fdtk").exists() and (out / "last.fdtk").exists()
    rec = json.loads((out / "metrics.jsonl").read_text().splitlines()[0])
    run = RunConfig.load(out / "run.cfg")
    model = FusedModel.create(run.model_config(), seed=run.seed)
    from fusedit.data import ShapeDataset
    from fusedit.train import TRAIN_SPLIT

    state = TrainState.create(model.trainable(), seed=run.seed)
    batch = make_batch(run, state, ShapeDataset(run.seed, run.image_size, TRAIN_SPLIT))
    assert rec["step"] == 0
    assert abs(rec["loss"] - zero_model_loss(batch)) <= 1e-12 * zero_model_loss(batch)
    assert f"loss {zero_model_loss(batch):.6f}" in capsys.readouterr().out


def test_sample_twice_is_byte_identical(tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--steps", "2", "--out", str(run), *TINY]) == 0
    files = []
    for d in ("a", "b"):
        assert main(["sample", "--checkpoint", str(run / "last.fdtk"), "--seed", "7",
                     "--prompt", "a big red circle at center on black", "--prompt", "a small blue square at top on white",
                     "--out", str(tmp_path / d)]) == 0
        files.append(sorted((tmp_path / d).iterdir()))
    assert [p.name for p in files[0]] == ["sample_7_000.ppm", "sample_7_001.ppm"]
    for a, b in zip(*files):
        assert a.read_bytes() == b.read_bytes()


def test_count_command(capsys):
    assert main(["count", "--preset", "gemma2b", "--variant", "deep", "--conditioning", "adaln-zero", "--json"]) == 0
    total = json.loads(capsys.readouterr().out.splitlines()[-1])["total"]
    assert abs(total / 1e9 - 2.47) / 2.47 <= 0.03


def test_count_paper_regression_reports_rows(capsys):
    code = main(["count", "--paper-regression"])
    out = capsys.readouterr().out
    assert out.count("PASS") + out.count("FAIL") == 16
    assert code == (0 if "FAIL" not in out else 1)


def test_gradcheck_ops_command(capsys):
    assert main(["gradcheck", "--suite", "ops"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_eval_reference_command(capsys):
    assert main(["eval", "--reference", "--n", "4"]) == 0
    assert "renderer accuracy 1.000" in capsys.readouterr().out


def test_ablate_writes_summary(tmp_path):
    assert main(["ablate", "--grid", "recipe", "--steps", "1", "--batch", "2", "--out", str(tmp_path), *TINY[:-2]]) == 0
    rows = [json.loads(x) for x in (tmp_path / "summary.jsonl").read_text().splitlines()]
    assert [r["run"] for r in rows] == ["baseline", "final"] and all(r["step"] == 1 for r in rows)


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["train", "--steps", "0", "--out", str(tmp_path), "--set", "variant=sideways"]) == 2
    assert main(["train", "--out", str(tmp_path), "--set", "novalue"]) == 2
    bad = tmp_path / "bad.fdtk"
    bad.write_bytes(b"NOPE" + b"\0" * 12)
    assert main(["sample", "--checkpoint", str(bad), "--config", str(tmp_path / "missing.cfg")]) == 2
    (tmp_path / "run.cfg").write_text("variant = deep\n")
    assert main(["sample", "--checkpoint", str(bad)]) == 2
    assert main(["eval"]) == 2
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        main(["train", "--bogus-flag"])
    assert e.value.code != 0


def test_thread_limit_env(monkeypatch, capsys):
    monkeypatch.setenv("FUSEDIT_THREADS", "zero")
    assert main(["count"]) == 2
    monkeypatch.setenv("FUSEDIT_THREADS", "1")
    assert main(["count"]) == 0
