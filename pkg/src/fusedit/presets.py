"""Named run configurations and the ablation grids built from them."""

from __future__ import annotations

import itertools
from dataclasses import replace

from .configs import TOY_LLM, TOY_LLM_V2, FusionVariant
from .nn import PositionalScheme, TimestepConditioning
from .runconfig import RunConfig

BASELINE = RunConfig()

# three deltas from the baseline: no timestep-modulation heads, 1D text +
# 2D image rotary positions, and the upgraded (stand-in) base LLM
FINAL_RECIPE = replace(
    BASELINE,
    conditioning=TimestepConditioning.NONE,
    positional=PositionalScheme.ROPE1D_2D,
    llm=TOY_LLM_V2,
)

PRESETS: dict[str, RunConfig] = {
    "baseline": BASELINE,
    "final": FINAL_RECIPE,
}

# DiT of 2 layers reading different windows of the 4-layer toy LLM
ALIGNMENTS = ((0, 1), (1, 2), (2, 3), (0, 2), (1, 3), (0, 3))


def _axis(name: str, field: str, values) -> dict[str, RunConfig]:
    return {f"{name}={getattr(v, 'value', v)}": replace(BASELINE, **{field: v}) for v in values}


def grid(name: str) -> dict[str, RunConfig]:
    """Named grid of run configs; see :data:`GRIDS`."""
    if name not in GRIDS:
        raise KeyError(f"unknown grid {name!r}; choose from {', '.join(GRIDS)}")
    return GRIDS[name]()


def _variants():
    return _axis("variant", "variant", list(FusionVariant))


def _conditioning():
    return _axis("conditioning", "conditioning", list(TimestepConditioning))


def _positional():
    return _axis("positional", "positional", list(PositionalScheme))


def _alignment():
    small = replace(BASELINE.dit, num_layers=2)
    return {f"alignment={a[0]},{a[1]}": replace(BASELINE, dit=small, alignment=a) for a in ALIGNMENTS}


def _dit_hidden():
    return {f"dit.hidden={h}": replace(BASELINE, dit=replace(BASELINE.dit, hidden=h)) for h in (64, 48, 32)}


def _dit_layers():
    return {f"dit.num_layers={n}": replace(BASELINE, dit=replace(BASELINE.dit, num_layers=n)) for n in (4, 3, 2)}


def _llm():
    return {"llm=toy": replace(BASELINE, llm=TOY_LLM), "llm=toy-v2": replace(BASELINE, llm=TOY_LLM_V2)}


def _recipe():
    return dict(PRESETS)


def _full():
    out = {}
    for v, c, p in itertools.product(FusionVariant, TimestepConditioning, PositionalScheme):
        out[f"{v.value}/{c.value}/{p.value}"] = replace(BASELINE, variant=v, conditioning=c, positional=p)
    out.update(_alignment())
    return out


GRIDS = {
    "variants": _variants,
    "conditioning": _conditioning,
    "positional": _positional,
    "alignment": _alignment,
    "dit-hidden": _dit_hidden,
    "dit-layers": _dit_layers,
    "llm": _llm,
    "recipe": _recipe,
    "full": _full,
}
