"""Central finite-difference oracle for autodiff gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, backward, no_grad


def _scalar(y: Tensor) -> float:
    if y.size != 1:
        raise ValueError(f"finite_diff_check: f must return a scalar, got shape {y.shape}")
    v = float(y.data.reshape(-1)[0])
    if not np.isfinite(v):
        raise FloatingPointError("finite_diff_check: f returned a non-finite value")
    return v


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Max over coordinates of ``|autodiff - central| / (|central| + 1e-8)``.

    ``x`` is perturbed in place (and restored), so ``f`` may close over it;
    e.g. ``x`` can be a model parameter and ``f`` the model loss.
    ``coords`` restricts the check to a subset of flat indices.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    was = x.requires_grad
    x.requires_grad = True
    saved_grad = x.grad
    x.grad = None
    try:
        y = f(x)
        _scalar(y)
        backward(y)
        auto = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
        if not np.all(np.isfinite(auto)):
            raise FloatingPointError("finite_diff_check: non-finite autodiff gradient")
        base = x.data
        flat = base.reshape(-1).copy()
        idx = range(x.size) if coords is None else coords
        worst = 0.0
        with no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                x.data = flat.reshape(base.shape)
                fp = _scalar(f(x))
                flat[i] = orig - eps
                x.data = flat.reshape(base.shape)
                fm = _scalar(f(x))
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                worst = max(worst, abs(auto[i] - num) / (abs(num) + 1e-8))
        x.data = base
    finally:
        x.requires_grad = was
        x.grad = saved_grad
    return worst


def check_parameters(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Run :func:`finite_diff_check` against every tensor in ``params``.

    With ``max_coords`` set, each tensor is checked on a random subset of
    that many coordinates drawn from ``rng``.
    """
    rng = rng or np.random.default_rng(0)
    out = {}
    for name, p in params.items():
        coords = None
        if max_coords is not None and p.size > max_coords:
            coords = rng.choice(p.size, size=max_coords, replace=False)
        out[name] = finite_diff_check(lambda _p: loss_fn(), p, eps=eps, coords=coords)
        for q in params.values():
            q.grad = None
    return out


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------


def _projected(y: Tensor, rng: np.random.Generator) -> Tensor:
    """Scalar ``sum(y * w)`` with a fixed random ``w`` so every output matters."""
    from . import tensor as T

    w = rng.normal(size=y.shape)
    return T.sum(y * w)


def _op_cases():
    """``name -> builder(rng) -> (fn(*inputs) -> Tensor, inputs)``."""
    from . import tensor as T

    def pos(rng, *shape):
        return rng.uniform(0.5, 2.0, size=shape)

    def nrm(rng, *shape):
        return rng.normal(size=shape)

    def attn(rng):
        bias = np.where(rng.random((2, 5, 6)) < 0.3, -np.inf, 0.0)
        bias[..., 0] = 0.0
        return (lambda q, k, v: T.attention_scores(q, k, v, bias[:, None])), [nrm(rng, 2, 3, 5, 4), nrm(rng, 2, 1, 6, 4), nrm(rng, 2, 1, 6, 4)]

    idx = np.array([[0, 2], [3, 3], [1, 0]])
    return {
        "add": lambda r: (T.add, [nrm(r, 3, 4), nrm(r, 4)]),
        "sub": lambda r: (T.sub, [nrm(r, 3, 1), nrm(r, 3, 4)]),
        "mul": lambda r: (T.mul, [nrm(r, 2, 3, 4), nrm(r, 3, 1)]),
        "mul_scalar": lambda r: ((lambda a: a * 2.5), [nrm(r, 3, 4)]),
        "div": lambda r: (T.div, [nrm(r, 3, 4), pos(r, 3, 4)]),
        "neg": lambda r: (T.neg, [nrm(r, 5)]),
        "square": lambda r: (T.square, [nrm(r, 3, 3)]),
        "exp": lambda r: (T.exp, [nrm(r, 3, 4)]),
        "log": lambda r: (T.log, [pos(r, 3, 4)]),
        "sqrt": lambda r: (T.sqrt, [pos(r, 3, 4)]),
        "tanh": lambda r: (T.tanh, [nrm(r, 3, 4)]),
        "sin": lambda r: (T.sin, [nrm(r, 3, 4)]),
        "sigmoid": lambda r: (T.sigmoid, [nrm(r, 3, 4)]),
        "silu": lambda r: (T.silu, [nrm(r, 3, 4)]),
        "gelu": lambda r: (T.gelu, [nrm(r, 3, 4)]),
        "gated_gelu": lambda r: (T.gated_gelu, [nrm(r, 3, 4), nrm(r, 3, 4)]),
        "rms_normalize": lambda r: (T.rms_normalize, [nrm(r, 2, 3, 5)]),
        "sum": lambda r: ((lambda a: T.sum(a, axis=(0, 2), keepdims=True)), [nrm(r, 2, 3, 4)]),
        "mean": lambda r: ((lambda a: T.mean(a, axis=1)), [nrm(r, 2, 3, 4)]),
        "softmax": lambda r: (T.softmax, [nrm(r, 3, 5)]),
        "matmul": lambda r: (T.matmul, [nrm(r, 3, 4), nrm(r, 4, 5)]),
        "batched_matmul": lambda r: (T.matmul, [nrm(r, 2, 1, 3, 4), nrm(r, 3, 4, 2)]),
        "matmul_weight": lambda r: (T.matmul, [nrm(r, 2, 3, 4), nrm(r, 4, 5)]),
        "attention": attn,
        "rotate_pairs": lambda r: (T.rotate_pairs, [nrm(r, 3, 6)]),
        "transpose": lambda r: ((lambda a: T.transpose(a, (2, 0, 1))), [nrm(r, 2, 3, 4)]),
        "reshape": lambda r: ((lambda a: T.reshape(a, (4, 6))), [nrm(r, 2, 3, 4)]),
        "concat": lambda r: ((lambda a, b: T.concat([a, b], axis=1)), [nrm(r, 2, 3), nrm(r, 2, 4)]),
        "slice": lambda r: ((lambda a: a[1:, ::2]), [nrm(r, 3, 5)]),
        "gather": lambda r: ((lambda a: T.gather(a, idx, axis=0)), [nrm(r, 4, 3)]),
        "scatter_add": lambda r: ((lambda b, s: T.scatter_add(b, np.array([2, 0, 2]), s, axis=0)), [nrm(r, 4, 3), nrm(r, 3, 3)]),
    }


OP_NAMES = tuple(_op_cases())


def check_op(name: str, seed: int = 0, eps: float = 1e-5) -> float:
    """Worst relative error over every input of one registered op."""
    rng = np.random.default_rng(seed)
    fn, arrays = _op_cases()[name](rng)
    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    proj_rng_seed = int(rng.integers(2**31))
    worst = 0.0
    for x in inputs:
        def f(_x):
            return _projected(fn(*inputs), np.random.default_rng(proj_rng_seed))

        worst = max(worst, finite_diff_check(f, x, eps=eps))
        for t in inputs:
            t.grad = None
    return worst


def run_op_suite(seed: int = 0) -> dict[str, float]:
    return {name: check_op(name, seed) for name in OP_NAMES}


def mini_model(variant: str, conditioning: str = "adaln-zero", positional: str = "rope1d", seed: int = 0, layers: int = 2):
    """A 2-layer model with every DiT weight randomised, so no gradient is
    trivially zero (the real init zeroes the output and adaLN heads)."""
    from .configs import FusionSpec, ModelConfig, StreamConfig
    from .fusion import FusedModel

    s = StreamConfig(num_layers=layers, hidden=16, num_heads=2, num_kv_heads=1, head_dim=8, ffn_dim=32)
    cfg = ModelConfig(
        llm=s,
        dit=s,
        spec=FusionSpec(variant, conditioning, positional),
        image_size=4,
        channels=2,
        patch_size=2,
        text_len=5,
        timestep_dim=8,
    )
    model = FusedModel.create(cfg, seed=seed)
    rng = np.random.default_rng([seed, 99])
    for name, p in model.dit.items():
        p.data = rng.normal(0.0, 0.3, size=p.shape) + (1.0 if "norm" in name else 0.0)
    for p in model.llm.values():
        p.data = p.data * 10.0
    return model


def mini_batch(model, seed: int = 0):
    from .flow import FlowBatch
    from .llm import tokenize_batch

    cfg = model.config
    rng = np.random.default_rng([seed, 7])
    ids, pad = tokenize_batch(["red", "a blue circle"], cfg.text_len)
    shape = (2, cfg.channels, cfg.image_size, cfg.image_size)
    return FlowBatch(
        x1=rng.uniform(-1, 1, shape),
        x0=rng.normal(size=shape),
        t=np.array([0.3, 0.7]),
        ids=ids,
        pad_mask=pad,
        drop_flags=np.zeros(2, dtype=bool),
    )


def check_model(variant: str, conditioning: str = "adaln-zero", positional: str = "rope1d", seed: int = 0,
                max_coords: int | None = 6) -> dict[str, float]:
    """Finite-difference check of rf_loss against every DiT tensor."""
    from .flow import rf_loss

    model = mini_model(variant, conditioning, positional, seed)
    batch = mini_batch(model, seed)
    return check_parameters(lambda: rf_loss(model, batch), model.dit, max_coords=max_coords,
                            rng=np.random.default_rng(seed))
