import json

import numpy as np
import pytest

from fusedit import checkpoint as ck
from fusedit.cli import main
from fusedit.flow import zero_model_loss
from fusedit.presets import grid
from fusedit.train import Trainer, heldout_batches, make_batch, zero_loss

from conftest import TINY

TINY_RUN = dict(a.split("=") for a in TINY[1::2])


def _run(**kw):
    from fusedit.runconfig import RunConfig

    return RunConfig().with_overrides(TINY_RUN).replace(**kw)


def _assert_same_training(a: Trainer, b: Trainer):
    assert a.state.step == b.state.step
    for k, p in a.model.parameters().items():
        assert np.array_equal(p.data, b.model.parameters()[k].data), k
    for name in a.model.dit:
        for x, y in ((a.state.m, b.state.m), (a.state.v, b.state.v), (a.state.ema, b.state.ema)):
            assert np.array_equal(x[name], y[name]), name


def test_resume_is_bit_exact(tmp_path):
    run = _run(steps=6, ema_every=2, ema_decay=0.5, checkpoint_every=3, log_every=1)
    whole = Trainer(run, tmp_path / "whole")
    whole.fit()
    first = Trainer(run, tmp_path / "split")
    first.fit(steps=3)
    resumed = Trainer.resume(run, tmp_path / "split" / "ckpt_000003.fdtk", tmp_path / "split")
    resumed.fit()
    _assert_same_training(whole, resumed)
    assert (tmp_path / "whole" / "metrics.jsonl").read_bytes() == (tmp_path / "split" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "whole" / "last.fdtk").read_bytes() == (tmp_path / "split" / "last.fdtk").read_bytes()


def test_cli_resume_matches_uninterrupted(tmp_path):
    assert main(["train", "--steps", "4", "--out", str(tmp_path / "a"), *TINY]) == 0
    assert main(["train", "--steps", "2", "--out", str(tmp_path / "b"), *TINY]) == 0
    assert main(["train", "--steps", "4", "--resume", str(tmp_path / "b" / "last.fdtk"), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "last.fdtk").read_bytes() == (tmp_path / "b" / "last.fdtk").read_bytes()


def test_resume_rejects_other_seed(tmp_path):
    run = _run(steps=1)
    Trainer(run, tmp_path).fit()
    with pytest.raises(ck.CheckpointError):
        Trainer.resume(run.replace(seed=5), tmp_path / "last.fdtk")


def test_training_is_seed_pinned(tmp_path):
    run = _run(steps=2, log_every=1)
    for d in ("a", "b"):
        Trainer(run, tmp_path / d).fit()
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    other = Trainer(run.replace(seed=1))
    assert other.fit()[-1].loss != json.loads((tmp_path / "a" / "metrics.jsonl").read_text().splitlines()[-1])["loss"]


def test_batches_are_a_function_of_seed_and_step():
    run = _run()
    a, b = Trainer(run), Trainer(run)
    ba, bb = make_batch(run, a.state, a.dataset), make_batch(run, b.state, b.dataset)
    assert all(np.array_equal(getattr(ba, f), getattr(bb, f)) for f in ("x1", "x0", "t", "ids", "pad_mask"))
    a.state.step = 1
    assert not np.array_equal(make_batch(run, a.state, a.dataset).x0, ba.x0)


def test_heldout_is_disjoint_from_training_stream():
    run = _run()
    hb = heldout_batches(run, 8)
    tr = Trainer(run)
    batch = make_batch(run, tr.state, tr.dataset)
    assert not any(np.array_equal(h, t) for h in hb[0].x1 for t in batch.x1)
    assert zero_loss(hb) == pytest.approx(np.mean([zero_model_loss(b) for b in hb]))


def test_initial_record_is_zero_model_loss():
    run = _run()
    tr = Trainer(run)
    rec = tr.initial_record()
    assert rec.step == 0 and rec.grad_norm == 0.0
    assert rec.loss == pytest.approx(zero_model_loss(make_batch(run, tr.state, tr.dataset)), rel=1e-12)


FULL = grid("full")


@pytest.mark.parametrize("name", list(FULL))
def test_every_ablation_preset_runs_one_step(name):
    run = FULL[name].replace(steps=1, batch=2)
    hist = Trainer(run).fit()
    assert [r.step for r in hist] == [0, 1]
    assert np.isfinite(hist[-1].loss) and np.isfinite(hist[-1].grad_norm) and hist[-1].grad_norm > 0


@pytest.mark.parametrize("name", ["variants", "conditioning", "positional", "alignment", "dit-hidden", "dit-layers", "llm", "recipe"])
def test_named_grids_construct(name):
    runs = grid(name)
    assert runs
    for run in runs.values():
        run.model_config()


@pytest.mark.slow
def test_smoke_run_learns(smoke_run):
    print(f"held-out {smoke_run['heldout']:.4f} zero {smoke_run['zero']:.4f} "
          f"reduction {smoke_run['reduction']:.2%} in {smoke_run['seconds'] / 60:.1f} min")
    assert smoke_run["reduction"] >= 0.30
