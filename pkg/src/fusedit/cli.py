"""Command line: ``fusedit {train,sample,count,eval,gradcheck,ablate}``."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import accountant, checkpoint, presets
from .configs import GEMMA2_2B, GEMMA_2B, TOY_LLM
from .runconfig import ConfigError, RunConfig

log = logging.getLogger("fusedit")


class CliError(Exception):
    pass


@contextlib.contextmanager
def thread_limit():
    """Honour ``FUSEDIT_THREADS`` for BLAS/OpenMP pools."""
    raw = os.environ.get("FUSEDIT_THREADS")
    if not raw:
        yield
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise CliError(f"FUSEDIT_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


# ---------------------------------------------------------------------------
# config assembly
# ---------------------------------------------------------------------------


def _overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, eq, val = item.partition("=")
        if not eq:
            raise CliError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = val.strip()
    return out


def load_run(args, default: RunConfig | None = None) -> RunConfig:
    base = default or RunConfig()
    if getattr(args, "preset", None) and args.preset in presets.PRESETS:
        base = presets.PRESETS[args.preset]
    if getattr(args, "config", None):
        base = RunConfig.from_text(Path(args.config).read_text(encoding="utf-8"), base)
    run = base.with_overrides(_overrides(getattr(args, "set", None)))
    for flag, key in (("steps", "steps"), ("seed", "seed"), ("batch", "batch")):
        v = getattr(args, flag, None)
        if v is not None:
            run = run.replace(**{key: v})
    return run


def _config_for_checkpoint(args) -> RunConfig:
    if args.config:
        return load_run(args)
    guess = Path(args.checkpoint).with_name("run.cfg")
    if not guess.exists():
        raise CliError(f"no --config given and {guess} does not exist")
    args.config = str(guess)
    return load_run(args)


def _load_model(args):
    from .flow import TrainState
    from .fusion import FusedModel

    run = _config_for_checkpoint(args)
    model = FusedModel.create(run.model_config(), seed=run.seed)
    state = TrainState.create(model.trainable(), seed=run.seed)
    tensors = checkpoint.load(args.checkpoint)
    checkpoint.unpack(tensors, model, state if "state.step" in tensors else None)
    return run, model, state if "state.step" in tensors else None


def _sampler_config(args, run: RunConfig, seed: int):
    from .sampler import SamplerConfig

    use_ema = run.use_ema if args.weights is None else args.weights == "ema"
    return SamplerConfig(
        steps=args.sample_steps if args.sample_steps is not None else run.sample_steps,
        guidance_scale=args.guidance if args.guidance is not None else run.guidance,
        seed=seed,
        use_ema=use_ema,
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .train import Trainer

    if args.resume and not args.config:
        saved = Path(args.resume).with_name("run.cfg")
        if saved.exists():
            args.config = str(saved)
    run = load_run(args)
    out = Path(args.out)
    tr = Trainer.resume(run, args.resume, out) if args.resume else Trainer(run, out)
    t0 = time.perf_counter()

    def report(rec):
        if rec.step % run.log_every == 0:
            print(f"step {rec.step:>6d}  loss {rec.loss:.6f}  grad_norm {rec.grad_norm:.4f}", flush=True)

    hist = tr.fit(callback=report)
    if hist and hist[0].step == 0:
        print(f"step      0  loss {hist[0].loss:.6f}  (initial)")
    if args.heldout:
        from .train import evaluate, heldout_batches, zero_loss

        hb = heldout_batches(run, args.heldout)
        loss, base = evaluate(tr.model, hb), zero_loss(hb)
        print(f"held-out rf_loss {loss:.6f}  zero-model {base:.6f}  reduction {1 - loss / base:.2%}")
    print(f"done: {tr.state.step} steps in {time.perf_counter() - t0:.1f}s, outputs in {out}")
    return 0


def cmd_sample(args) -> int:
    from .sampler import build_text_kv_cache, euler_sample, write_ppm

    run, model, state = _load_model(args)
    cfg = _sampler_config(args, run, args.seed)
    weights = state.ema if (cfg.use_ema and state is not None) else None
    if cfg.use_ema and state is None:
        log.warning("checkpoint has no EMA shadows; sampling live weights")
    prompts = args.prompt or ["a big red circle at center on black"]
    cache = build_text_kv_cache(model, prompts)
    images = euler_sample(model, cache, cfg, weights=weights)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        path = out / f"sample_{args.seed}_{i:03d}.ppm"
        write_ppm(path, img)
        print(path)
    return 0


def _stream(name: str):
    return {"gemma2b": GEMMA_2B, "gemma2-2b": GEMMA2_2B, "toy": TOY_LLM}[name]


def cmd_count(args) -> int:
    if args.paper_regression:
        rows, ordered = accountant.paper_regression()
        ok = ordered
        for r in rows:
            ok &= r.ok
            print(f"{'PASS' if r.ok else 'FAIL'}  {r.table:<12} {r.label:<20} {r.count / 1e9:8.3f}B  target {r.target:.2f}B  rel err {r.rel_err:.2%}")
        print(f"{'PASS' if ordered else 'FAIL'}  ordering     shallow-cross > shallow-self > deep")
        if args.json:
            print(json.dumps({"rows": [r.__dict__ | {"ok": r.ok} for r in rows], "ordering": ordered}))
        return 0 if ok else 1
    from dataclasses import replace

    from .configs import FusionSpec, align_layers

    llm = _stream(args.preset)
    dit = llm
    if args.hidden:
        dit = replace(dit, hidden=args.hidden)
    if args.layers:
        dit = replace(dit, num_layers=args.layers)
    variant = args.variant
    align = align_layers(llm.num_layers, dit.num_layers) if variant in ("deep", "deep-cross") else None
    spec = FusionSpec(variant, args.conditioning, args.positional, align)
    b = accountant.count_params(llm, dit, spec, include_llm=args.include_llm)
    title = f"{args.preset} dit, variant {variant}, conditioning {args.conditioning}"
    print(accountant.format_breakdown(b, title))
    if args.json:
        print(json.dumps(b.as_dict()))
    return 0


def cmd_eval(args) -> int:
    from .metrics import noise_accuracy, renderer_accuracy, toy_alignment_eval

    if args.reference:
        print(f"renderer accuracy {renderer_accuracy(args.n, args.seed):.3f}")
        print(f"noise accuracy    {noise_accuracy(args.n, args.seed):.3f}")
        return 0
    if not args.checkpoint:
        raise CliError("eval needs --checkpoint (or --reference)")
    run, model, state = _load_model(args)
    cfg = _sampler_config(args, run, args.seed)
    weights = state.ema if (cfg.use_ema and state is not None) else None
    acc = toy_alignment_eval(model, args.n, args.seed, cfg, weights)
    print(f"toy alignment accuracy {acc:.3f} over {args.n} prompts")
    return 0


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    bad = 0
    if args.suite in ("ops", "all"):
        for name, err in gradcheck.run_op_suite(args.seed).items():
            ok = err < 1e-4
            bad += not ok
            print(f"{'PASS' if ok else 'FAIL'}  op {name:<16} rel err {err:.2e}")
    if args.suite in ("model", "all"):
        for v in args.variants:
            res = gradcheck.check_model(v, seed=args.seed, max_coords=args.coords)
            worst = max(res, key=res.get)
            ok = res[worst] < 1e-3
            bad += not ok
            print(f"{'PASS' if ok else 'FAIL'}  rf_loss {v:<14} worst {worst} rel err {res[worst]:.2e}")
    return 1 if bad else 0


def cmd_ablate(args) -> int:
    from .train import Trainer

    runs = presets.grid(args.grid)
    out = Path(args.out)
    overrides = _overrides(args.set)
    summary = []
    for name, run in runs.items():
        run = run.with_overrides(overrides)
        if args.steps is not None:
            run = run.replace(steps=args.steps)
        if args.batch is not None:
            run = run.replace(batch=args.batch)
        slug = name.replace("/", "_").replace("=", "-").replace(",", "-")
        tr = Trainer(run, out / slug)
        hist = tr.fit()
        last = hist[-1]
        summary.append({"run": name, "step": last.step, "loss": last.loss})
        print(f"{name:<40} step {last.step:>5d} loss {last.loss:.6f}", flush=True)
    (out / "summary.jsonl").write_text("".join(json.dumps(s) + "\n" for s in summary), encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fusedit", description="Deep-fusion text-to-image toolkit at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp, steps=True):
        sp.add_argument("--config", help="key = value run config file")
        sp.add_argument("--preset", choices=sorted(presets.PRESETS), help="start from a named preset")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
        sp.add_argument("--seed", type=int)
        if steps:
            sp.add_argument("--steps", type=int)
            sp.add_argument("--batch", type=int)

    def sampler_flags(sp):
        sp.add_argument("--checkpoint", help="FDTK checkpoint (run.cfg next to it is used by default)")
        sp.add_argument("--config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE")
        sp.add_argument("--sample-steps", type=int)
        sp.add_argument("--guidance", type=float)
        sp.add_argument("--weights", choices=("ema", "live"))

    sp = sub.add_parser("train", help="train a model, writing checkpoints and metrics.jsonl")
    run_flags(sp)
    sp.add_argument("--out", default="runs/train")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--heldout", type=int, default=0, metavar="N", help="report held-out loss on N examples")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sample", help="sample PPM images from a checkpoint")
    sampler_flags(sp)
    sp.add_argument("--prompt", action="append")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="samples")
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("count", help="parameter counts")
    sp.add_argument("--preset", choices=("gemma2b", "gemma2-2b", "toy"), default="gemma2b")
    sp.add_argument("--variant", choices=[v.value for v in accountant.FusionVariant], default="deep")
    sp.add_argument("--conditioning", choices=("adaln-zero", "adaln-single", "addition", "none"), default="adaln-zero")
    sp.add_argument("--positional", default="rope1d")
    sp.add_argument("--hidden", type=int)
    sp.add_argument("--layers", type=int)
    sp.add_argument("--include-llm", action="store_true")
    sp.add_argument("--json", action="store_true")
    sp.add_argument("--paper-regression", action="store_true", help="check the published parameter tables")
    sp.set_defaults(fn=cmd_count)

    sp = sub.add_parser("eval", help="toy text-image alignment accuracy")
    sampler_flags(sp)
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--reference", action="store_true", help="score the renderer and pure noise instead")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    sp.add_argument("--suite", choices=("ops", "model", "all"), default="all")
    sp.add_argument("--variants", nargs="+", default=["deep", "shallow-self", "shallow-cross", "deep-cross"])
    sp.add_argument("--coords", type=int, default=6, help="coordinates checked per tensor")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="run a named grid of configs")
    sp.add_argument("--grid", choices=sorted(presets.GRIDS), default="recipe")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--out", default="runs/ablate")
    sp.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with thread_limit():
            return args.fn(args)
    except (CliError, ConfigError, checkpoint.CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"fusedit {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
