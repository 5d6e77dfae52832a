"""Rectified-flow objective and the optimisation recipe around it."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .llm import PAD, tokenize
from .tensor import Tensor

LR = 1e-4
BETAS = (0.9, 0.999)
WEIGHT_DECAY = 1e-4
CLIP_NORM = 1.0
ADAM_EPS = 1e-8
EMA_DECAY = 0.99
EMA_EVERY = 100
CAPTION_DROPOUT = 0.1


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class FlowBatch:
    x1: np.ndarray  # (B, C, H, W) data
    x0: np.ndarray  # (B, C, H, W) noise
    t: np.ndarray  # (B,) in (0, 1)
    ids: np.ndarray  # (B, Lt) caption tokens, dropped rows already replaced
    pad_mask: np.ndarray  # (B, Lt)
    drop_flags: np.ndarray  # (B,)

    def __post_init__(self):
        b = self.x1.shape[0]
        if not (self.x0.shape == self.x1.shape and len(self.t) == b and len(self.ids) == b and len(self.drop_flags) == b):
            raise ValueError("FlowBatch fields disagree on batch size")
        if np.any(self.t <= 0) or np.any(self.t >= 1):
            raise ValueError("timesteps must lie strictly inside (0, 1)")

    @property
    def target(self) -> np.ndarray:
        return self.x1 - self.x0

    @property
    def xt(self) -> np.ndarray:
        return interpolate(self.x0, self.x1, self.t)


def interpolate(x0, x1, t):
    """Straight path ``t * x1 + (1 - t) * x0`` with per-example ``t``."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"interpolate: shapes {x0.shape} and {x1.shape} differ")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim:
        t = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim))
    return t * x1 + (1.0 - t) * x0


def rf_loss(model, batch: FlowBatch) -> Tensor:
    """Mean over batch and elements of ``|v(x_t, t, caption) - (x1 - x0)|^2``."""
    ctx = model.encode_text(batch.ids, batch.pad_mask)
    v = model.velocity(batch.xt, batch.t, ctx)
    diff = v - batch.target
    loss = T.mean(T.square(diff))
    if not np.isfinite(loss.data):
        raise NonFiniteError(f"non-finite rf_loss (t range {batch.t.min():.3g}..{batch.t.max():.3g})")
    return loss


def zero_model_loss(batch: FlowBatch) -> float:
    """Closed-form loss of the zero velocity field on ``batch``."""
    return float(np.mean(batch.target**2))


def sample_t_logit_normal(rng: np.random.Generator, size=None, loc: float = 0.0, scale: float = 1.0):
    if scale <= 0:
        raise ValueError("scale must be positive")
    z = rng.normal(loc, scale, size=size)
    t = 0.5 * (1.0 + np.tanh(0.5 * z))
    # keep t strictly interior even where the sigmoid rounds to an endpoint
    return np.clip(t, np.finfo(float).tiny, np.nextafter(1.0, 0.0))


def cfg_dropout(rng: np.random.Generator, captions, p: float = CAPTION_DROPOUT) -> np.ndarray:
    """Independent Bernoulli(p) drop flag per caption."""
    if not 0 <= p < 1:
        raise ValueError("dropout p must be in [0, 1)")
    n = len(captions)
    return rng.random(n) < p if p > 0 else np.zeros(n, dtype=bool)


def apply_dropout(ids: np.ndarray, flags: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Replace flagged rows with the empty-prompt encoding; returns ``(ids, pad_mask)``."""
    empty, _ = tokenize("", ids.shape[1])
    ids = ids.copy()
    ids[np.asarray(flags, dtype=bool)] = empty
    return ids, ids == PAD


@dataclass
class TrainState:
    """Optimizer moments, EMA shadows and the step counter.

    Randomness is derived from ``(seed, step)`` so the step counter is the
    whole RNG state.
    """

    step: int = 0
    seed: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    ema: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: dict[str, Tensor], seed: int = 0) -> "TrainState":
        return cls(
            step=0,
            seed=seed,
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            ema={k: p.data.copy() for k, p in params.items()},
        )

    def rng(self, purpose: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, self.step, purpose])


def global_grad_norm(params: dict[str, Tensor]) -> float:
    return float(np.sqrt(np.sum([np.sum(p.grad**2) for p in params.values() if p.grad is not None])))


def adamw_step(
    params: dict[str, Tensor],
    state: TrainState,
    lr: float = LR,
    betas: tuple[float, float] = BETAS,
    weight_decay: float = WEIGHT_DECAY,
    clip: float = CLIP_NORM,
    eps: float = ADAM_EPS,
) -> float:
    """One AdamW update over ``params`` (their ``.grad`` must be populated).

    Gradients are clipped to global norm ``clip`` first; weight decay is
    decoupled (``lr * wd * theta``). Returns the pre-clip gradient norm.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in {name} at step {state.step}")
    norm = global_grad_norm(params)
    scale = clip / norm if clip and norm > clip else 1.0
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad * scale
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        theta = p.data * (1.0 - lr * weight_decay)
        p.data = theta - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return norm


def ema_update(state: TrainState, params: dict[str, Tensor], decay: float = EMA_DECAY, every: int = EMA_EVERY) -> bool:
    """Blend live weights into the shadows when ``state.step % every == 0``."""
    if state.step == 0 or state.step % every:
        return False
    for name, p in params.items():
        state.ema[name] = decay * state.ema[name] + (1.0 - decay) * p.data
    return True
