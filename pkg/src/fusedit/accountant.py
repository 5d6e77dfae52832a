"""Closed-form parameter counts and matmul FLOP estimates for every variant.

Counts mirror the tensors created by :func:`fusedit.dit.init_dit_params` and
:func:`fusedit.llm.init_llm_params` one for one, so the instantiated model is
the oracle for this module.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .configs import GEMMA_2B, FusionSpec, FusionVariant, ModelConfig, StreamConfig, align_layers
from .nn import TimestepConditioning

CATEGORIES = ("embeddings", "attention", "ffn", "norms", "conditioning", "adapters", "io")


@dataclass(frozen=True)
class ParamBreakdown:
    embeddings: int = 0
    attention: int = 0
    ffn: int = 0
    norms: int = 0
    conditioning: int = 0
    adapters: int = 0
    io: int = 0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"negative count for {f.name}")

    @property
    def total(self) -> int:
        return sum(getattr(self, c) for c in CATEGORIES)

    def __add__(self, other: "ParamBreakdown") -> "ParamBreakdown":
        return ParamBreakdown(**{c: getattr(self, c) + getattr(other, c) for c in CATEGORIES})

    def as_dict(self) -> dict[str, int]:
        d = asdict(self)
        d["total"] = self.total
        return d


def llm_params(cfg: StreamConfig) -> ParamBreakdown:
    h = cfg.hidden
    per_attn = h * cfg.q_dim + 2 * h * cfg.kv_dim + cfg.q_dim * h
    per_norm = 2 * h + cfg.num_heads * cfg.head_dim + cfg.num_kv_heads * cfg.head_dim
    return ParamBreakdown(
        embeddings=cfg.vocab_size * h,
        attention=cfg.num_layers * per_attn,
        ffn=cfg.num_layers * 3 * h * cfg.ffn_dim,
        norms=cfg.num_layers * per_norm + h,
    )


def dit_params(
    llm: StreamConfig,
    dit: StreamConfig,
    spec: FusionSpec,
    patch_dim: int = 12,
    timestep_dim: int = 256,
) -> ParamBreakdown:
    h, n = dit.hidden, dit.num_layers
    cond = spec.conditioning
    variant = spec.variant
    hd = dit.num_heads * dit.head_dim
    kvd = dit.num_kv_heads * dit.head_dim

    attention = n * (h * hd + 2 * h * kvd + hd * h)
    norms = n * (2 * h + hd + kvd) + h
    adapters = 0
    if not variant.is_deep:
        adapters = llm.hidden * h + n * 2 * h * kvd
        norms += llm.hidden
    if variant.is_cross:
        attention += n * 2 * h * hd
        norms += n * (h + hd)
        if variant is FusionVariant.SHALLOW_CROSS:
            norms += n * kvd

    conditioning = 0
    if cond is not TimestepConditioning.NONE:
        conditioning += timestep_dim * h + h + h * h + h
    if cond is TimestepConditioning.ADALN_ZERO:
        conditioning += n * (h * 6 * h + 6 * h) + h * 2 * h + 2 * h
    elif cond is TimestepConditioning.ADALN_SINGLE:
        conditioning += h * 6 * h + 6 * h + n * 6 * h + 2 * h

    return ParamBreakdown(
        attention=attention,
        ffn=n * 3 * h * dit.ffn_dim,
        norms=norms,
        conditioning=conditioning,
        adapters=adapters,
        io=patch_dim * h + h + h * patch_dim + patch_dim,
    )


def count_params(
    llm: StreamConfig,
    dit: StreamConfig,
    spec: FusionSpec = FusionSpec(),
    include_llm: bool = False,
    patch_dim: int = 12,
    timestep_dim: int = 256,
) -> ParamBreakdown:
    """DiT parameter count (plus the frozen LLM when ``include_llm``)."""
    for c in (llm, dit):
        for f in ("num_layers", "hidden", "num_heads", "num_kv_heads", "head_dim", "ffn_dim"):
            if getattr(c, f) < 1:
                raise ValueError(f"{f} must be positive")
    out = dit_params(llm, dit, spec, patch_dim, timestep_dim)
    return out + llm_params(llm) if include_llm else out


def count_model(cfg: ModelConfig, include_llm: bool = False) -> ParamBreakdown:
    return count_params(cfg.llm, cfg.dit, cfg.spec, include_llm, cfg.patch_dim, cfg.timestep_dim)


# ---------------------------------------------------------------------------
# FLOPs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostEstimate:
    text_flops: int  # every LLM (+ adapter) pass over the prompt, once per prompt
    dit_flops: int  # all DiT evaluations of the sampling run
    flops_per_image_token: float  # one DiT evaluation, per image token
    flops_per_text_token: float  # one text pass, per text token
    kv_cache_bytes: int  # cached text K/V for one prompt
    dit_evaluations: int

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"negative {f.name}")

    @property
    def total_flops(self) -> int:
        return self.text_flops + self.dit_flops


def _mm(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def _attn(lq: int, lk: int, heads: int, head_dim: int) -> int:
    # scores and weighted values, every (query, key) pair computed
    return 2 * _mm(lq, head_dim, lk) * heads


def _block_projections(c: StreamConfig, tokens: int) -> int:
    h = c.hidden
    return (
        _mm(tokens, h, c.q_dim)
        + 2 * _mm(tokens, h, c.kv_dim)
        + _mm(tokens, c.q_dim, h)
        + 3 * _mm(tokens, h, c.ffn_dim)
    )


def llm_pass_flops(c: StreamConfig, text_len: int) -> int:
    if text_len == 0:
        return 0
    return c.num_layers * (_block_projections(c, text_len) + _attn(text_len, text_len, c.num_heads, c.head_dim))


def text_side_flops(cfg: ModelConfig, text_len: int) -> int:
    """One prompt: LLM pass, plus adapter and per-layer K/V for shallow variants."""
    f = llm_pass_flops(cfg.llm, text_len)
    if not cfg.spec.variant.is_deep and text_len:
        d = cfg.dit
        f += _mm(text_len, cfg.llm.hidden, d.hidden) + d.num_layers * 2 * _mm(text_len, d.hidden, d.kv_dim)
    return f


def dit_eval_flops(cfg: ModelConfig, text_len: int, image_len: int) -> int:
    """One DiT evaluation for one image."""
    d, spec = cfg.dit, cfg.spec
    h = d.hidden
    f = _mm(image_len, cfg.patch_dim, h) + _mm(image_len, h, cfg.patch_dim)
    cond = spec.conditioning
    if cond is not TimestepConditioning.NONE:
        f += _mm(1, cfg.timestep_dim, h) + _mm(1, h, h)
    if cond is TimestepConditioning.ADALN_ZERO:
        f += d.num_layers * _mm(1, h, 6 * h) + _mm(1, h, 2 * h)
    elif cond is TimestepConditioning.ADALN_SINGLE:
        f += _mm(1, h, 6 * h)
    per_layer = _block_projections(d, image_len)
    if spec.variant.is_cross:
        per_layer += _attn(image_len, image_len, d.num_heads, d.head_dim)
        if text_len:
            per_layer += 2 * _mm(image_len, h, d.q_dim) + _attn(image_len, text_len, d.num_heads, d.head_dim)
    else:
        per_layer += _attn(image_len, text_len + image_len, d.num_heads, d.head_dim)
    return f + d.num_layers * per_layer


def kv_cache_bytes(cfg: ModelConfig, text_len: int, bytes_per_value: int = 8) -> int:
    """Cached text K/V of one prompt: one pair per distinct LLM layer (deep)
    or per DiT layer after the shallow K/V projections."""
    if cfg.spec.variant.is_deep:
        layers = len(set(cfg.spec.alignment.mapping))
        kvd = cfg.llm.kv_dim
    else:
        layers = cfg.dit.num_layers
        kvd = cfg.dit.kv_dim
    return layers * 2 * kvd * text_len * bytes_per_value


def estimate_cost(cfg: ModelConfig, text_len: int, image_len: int, steps: int, guidance: bool = True) -> CostEstimate:
    """Matmul FLOPs of a full sampling run for one prompt.

    The text side runs once per prompt (twice with guidance: the prompt and
    the empty prompt); the DiT runs ``steps`` times per branch.
    """
    if text_len < 0 or image_len < 1 or steps < 1:
        raise ValueError("need text_len >= 0, image_len >= 1, steps >= 1")
    branches = 2 if guidance else 1
    text_once = text_side_flops(cfg, text_len)
    dit_once = dit_eval_flops(cfg, text_len, image_len)
    return CostEstimate(
        text_flops=branches * text_once,
        dit_flops=branches * steps * dit_once,
        flops_per_image_token=dit_once / image_len,
        flops_per_text_token=text_once / text_len if text_len else 0.0,
        kv_cache_bytes=kv_cache_bytes(cfg, text_len),
        dit_evaluations=branches * steps,
    )


# ---------------------------------------------------------------------------
# published-table presets
# ---------------------------------------------------------------------------


def gemma_dit(hidden: int | None = None, layers: int | None = None) -> StreamConfig:
    """Gemma-2B-shaped DiT; only hidden size or depth varied (heads, ffn fixed)."""
    from dataclasses import replace

    kw = {}
    if hidden is not None:
        kw["hidden"] = hidden
    if layers is not None:
        kw["num_layers"] = layers
    return replace(GEMMA_2B, **kw)


def gemma_spec(variant="deep", conditioning="adaln-zero", dit_layers: int = GEMMA_2B.num_layers) -> FusionSpec:
    v = FusionVariant(variant)
    align = align_layers(GEMMA_2B.num_layers, dit_layers) if v.is_deep else None
    return FusionSpec(variant=v, conditioning=conditioning, alignment=align)


def gemma_count(variant="deep", conditioning="adaln-zero", hidden=None, layers=None) -> ParamBreakdown:
    dit = gemma_dit(hidden, layers)
    return count_params(GEMMA_2B, dit, gemma_spec(variant, conditioning, dit.num_layers))


# (label, kwargs for gemma_count, published total in billions)
REGRESSION_TARGETS = {
    "conditioning": [
        ("adaln-zero", dict(conditioning="adaln-zero"), 2.47),
        ("adaln-single", dict(conditioning="adaln-single"), 2.01),
        ("addition", dict(conditioning="addition"), 1.99),
        ("none", dict(conditioning="none"), 1.98),
    ],
    "hidden": [
        ("hidden 2048", dict(hidden=2048), 2.5),
        ("hidden 1792", dict(hidden=1792), 2.1),
        ("hidden 1536", dict(hidden=1536), 1.8),
        ("hidden 1280", dict(hidden=1280), 1.4),
    ],
    "layers": [
        ("layers 18", dict(layers=18), 2.5),
        ("layers 14", dict(layers=14), 1.9),
        ("layers 10", dict(layers=10), 1.4),
    ],
    "variants": [
        ("shallow-cross", dict(variant="shallow-cross"), 2.62),
        ("shallow-self", dict(variant="shallow-self"), 2.47),
        ("deep", dict(variant="deep"), 2.45),
    ],
}
ADALN_DELTA_TARGET = 0.49
TOLERANCE = 0.03


@dataclass(frozen=True)
class RegressionRow:
    table: str
    label: str
    count: int
    target: float  # billions
    rel_err: float

    @property
    def ok(self) -> bool:
        return self.rel_err <= TOLERANCE


def paper_regression() -> tuple[list[RegressionRow], bool]:
    """Every published total, the adaLN delta, and the variant ordering.

    Returns the rows and whether the strict ordering
    shallow-cross > shallow-self > deep holds.
    """
    rows = []
    for table, items in REGRESSION_TARGETS.items():
        for label, kw, target in items:
            n = gemma_count(**kw).total
            rows.append(RegressionRow(table, label, n, target, abs(n / 1e9 - target) / target))
    delta = gemma_count(conditioning="adaln-zero").total - gemma_count(conditioning="none").total
    rows.append(RegressionRow("delta", "adaln-zero - none", delta, ADALN_DELTA_TARGET, abs(delta / 1e9 - ADALN_DELTA_TARGET) / ADALN_DELTA_TARGET))
    sc, ss, dp = (gemma_count(variant=v).total for v in ("shallow-cross", "shallow-self", "deep"))
    return rows, sc > ss > dp


def format_breakdown(b: ParamBreakdown, title: str = "") -> str:
    lines = [title] if title else []
    for c in CATEGORIES:
        lines.append(f"  {c:<13}{getattr(b, c):>16,d}")
    lines.append(f"  {'total':<13}{b.total:>16,d}  ({b.total / 1e9:.3f}B)")
    return "\n".join(lines)
