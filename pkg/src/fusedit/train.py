"""Training loop: batches, steps, held-out evaluation, metrics and checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .data import ShapeDataset
from .flow import (
    FlowBatch,
    TrainState,
    adamw_step,
    apply_dropout,
    cfg_dropout,
    ema_update,
    rf_loss,
    sample_t_logit_normal,
    zero_model_loss,
)
from .fusion import FusedModel
from .llm import tokenize_batch
from .runconfig import RunConfig

log = logging.getLogger(__name__)

# independent RNG purposes inside one step
DATA, NOISE, TIME, DROP = 0, 1, 2, 3
TRAIN_SPLIT, HELDOUT_SPLIT = 0, 1
DATA_SPACE = 2**40  # training examples are drawn with replacement from this index range


def make_batch(run: RunConfig, state: TrainState, dataset: ShapeDataset, dropout: float | None = None) -> FlowBatch:
    """Batch for the step about to be taken; a pure function of ``(seed, step)``."""
    idx = state.rng(DATA).integers(0, DATA_SPACE, size=run.batch)
    captions, x1 = dataset.batch(idx)
    shape = x1.shape
    x0 = state.rng(NOISE).normal(size=shape)
    t = sample_t_logit_normal(state.rng(TIME), run.batch, run.t_loc, run.t_scale)
    p = run.dropout if dropout is None else dropout
    flags = cfg_dropout(state.rng(DROP), captions, p)
    ids, _ = tokenize_batch(captions, run.text_len)
    ids, pad = apply_dropout(ids, flags)
    return FlowBatch(x1=x1, x0=x0, t=t, ids=ids, pad_mask=pad, drop_flags=flags)


def heldout_batches(run: RunConfig, n: int = 512, chunk: int | None = None, seed: int | None = None) -> list[FlowBatch]:
    """Fixed held-out set drawn from a disjoint split, captions kept (no dropout)."""
    seed = run.seed if seed is None else seed
    ds = ShapeDataset(seed=seed, size=run.image_size, split=HELDOUT_SPLIT)
    rng = np.random.default_rng([seed, HELDOUT_SPLIT, 7])
    chunk = chunk or run.batch
    out = []
    for lo in range(0, n, chunk):
        idx = np.arange(lo, min(n, lo + chunk))
        captions, x1 = ds.batch(idx)
        x0 = rng.normal(size=x1.shape)
        t = sample_t_logit_normal(rng, len(idx), run.t_loc, run.t_scale)
        ids, pad = tokenize_batch(captions, run.text_len)
        out.append(FlowBatch(x1, x0, t, ids, pad, np.zeros(len(idx), dtype=bool)))
    return out


def evaluate(model: FusedModel, batches: list[FlowBatch], params: dict | None = None) -> float:
    """Element-weighted mean rf_loss over ``batches``; optionally with swapped-in weights."""
    saved = None
    if params is not None:
        saved = {k: p.data for k, p in model.dit.items()}
        for k, p in model.dit.items():
            p.data = params[k]
    try:
        total, count = 0.0, 0
        with T.no_grad():
            for b in batches:
                total += rf_loss(model, b).item() * b.x1.size
                count += b.x1.size
        return total / count
    finally:
        if saved is not None:
            for k, p in model.dit.items():
                p.data = saved[k]


def zero_loss(batches: list[FlowBatch]) -> float:
    return float(sum(zero_model_loss(b) * b.x1.size for b in batches) / sum(b.x1.size for b in batches))


@dataclass
class StepResult:
    step: int
    loss: float
    grad_norm: float
    lr: float
    ema_applied: bool

    def to_json(self) -> str:
        return json.dumps(
            {"step": self.step, "loss": self.loss, "grad_norm": self.grad_norm, "lr": self.lr, "ema_applied": self.ema_applied}
        )


def train_step(model: FusedModel, state: TrainState, run: RunConfig, dataset: ShapeDataset) -> StepResult:
    batch = make_batch(run, state, dataset)
    params = model.trainable()
    model.zero_grad()
    loss = rf_loss(model, batch)
    loss.backward()
    norm = adamw_step(params, state, run.lr, (run.beta1, run.beta2), run.weight_decay, run.clip, run.adam_eps)
    applied = ema_update(state, params, run.ema_decay, run.ema_every)
    model.zero_grad()
    return StepResult(state.step, loss.item(), norm, run.lr, applied)


class Trainer:
    """Owns a model, its TrainState and the run directory.

    ``out_dir`` receives ``run.cfg``, ``metrics.jsonl`` and checkpoints
    ``ckpt_<step>.fdtk`` plus ``last.fdtk``.
    """

    def __init__(self, run: RunConfig, out_dir=None, model: FusedModel | None = None):
        self.run = run
        self.model = model or FusedModel.create(run.model_config(), seed=run.seed)
        self.state = TrainState.create(self.model.trainable(), seed=run.seed)
        self.dataset = ShapeDataset(seed=run.seed, size=run.image_size, split=TRAIN_SPLIT)
        self.out_dir = None if out_dir is None else Path(out_dir)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            run.save(self.out_dir / "run.cfg")

    @classmethod
    def resume(cls, run: RunConfig, path, out_dir=None) -> "Trainer":
        tr = cls(run, out_dir)
        ckpt.load_training(path, tr.model, tr.state)
        if tr.state.seed != run.seed:
            raise ckpt.CheckpointError(f"checkpoint seed {tr.state.seed} differs from run seed {run.seed}")
        return tr

    def _emit(self, rec: StepResult) -> None:
        if self.out_dir is not None:
            with open(self.out_dir / "metrics.jsonl", "a", encoding="utf-8") as f:
                f.write(rec.to_json() + "\n")

    def checkpoint(self) -> Path | None:
        if self.out_dir is None:
            return None
        path = self.out_dir / f"ckpt_{self.state.step:06d}.fdtk"
        ckpt.save_training(path, self.model, self.state)
        ckpt.save_training(self.out_dir / "last.fdtk", self.model, self.state)
        return path

    def initial_record(self) -> StepResult:
        """Loss of the first batch under the untouched model (no update)."""
        batch = make_batch(self.run, self.state, self.dataset)
        with T.no_grad():
            loss = rf_loss(self.model, batch).item()
        return StepResult(0, loss, 0.0, self.run.lr, False)

    def fit(self, steps: int | None = None, callback: Callable[[StepResult], None] | None = None) -> list[StepResult]:
        """Train up to ``steps`` total steps (default ``run.steps``)."""
        target = self.run.steps if steps is None else steps
        history = []
        if self.state.step == 0:
            rec = self.initial_record()
            self._emit(rec)
            history.append(rec)
            self.checkpoint()
        while self.state.step < target:
            rec = train_step(self.model, self.state, self.run, self.dataset)
            history.append(rec)
            if rec.step % self.run.log_every == 0 or rec.step == target:
                self._emit(rec)
                log.info("step %d loss %.5f grad_norm %.4f", rec.step, rec.loss, rec.grad_norm)
            if rec.step % self.run.checkpoint_every == 0 or rec.step == target:
                self.checkpoint()
            if callback is not None:
                callback(rec)
        return history
