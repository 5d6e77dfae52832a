"""Run configuration: every knob of a training or sampling run in one flat record.

Text form is UTF-8 ``key = value`` lines with ``#`` comments::

    variant = deep
    conditioning = adaln-zero
    llm.num_layers = 4
    alignment = 0,1,2,3      # or "auto"
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from . import flow
from .configs import TOY_LLM, FusionSpec, FusionVariant, LayerAlignment, ModelConfig, StreamConfig
from .nn import PositionalScheme, TimestepConditioning


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    llm: StreamConfig = TOY_LLM
    dit: StreamConfig = TOY_LLM
    variant: FusionVariant = FusionVariant.DEEP
    conditioning: TimestepConditioning = TimestepConditioning.ADALN_ZERO
    positional: PositionalScheme = PositionalScheme.ROPE1D_APE
    alignment: tuple[int, ...] | None = None  # None: centred window
    mrope_chunks: tuple[int, ...] | None = None
    image_size: int = 32
    patch_size: int = 2
    channels: int = 3
    text_len: int = 32
    timestep_dim: int = 256
    attend_pad: bool = False
    # trainer
    lr: float = flow.LR
    weight_decay: float = flow.WEIGHT_DECAY
    beta1: float = flow.BETAS[0]
    beta2: float = flow.BETAS[1]
    adam_eps: float = flow.ADAM_EPS
    clip: float = flow.CLIP_NORM
    batch: int = 32
    steps: int = 2000
    dropout: float = flow.CAPTION_DROPOUT
    ema_decay: float = flow.EMA_DECAY
    ema_every: int = flow.EMA_EVERY
    t_loc: float = 0.0
    t_scale: float = 1.0
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 500
    # sampler
    sample_steps: int = 25
    guidance: float = 6.0
    use_ema: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", FusionVariant(self.variant))
        object.__setattr__(self, "conditioning", TimestepConditioning(self.conditioning))
        object.__setattr__(self, "positional", PositionalScheme(self.positional))
        if self.batch < 1 or self.steps < 0 or self.log_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("batch, log_every and checkpoint_every must be >= 1; steps >= 0")
        if self.sample_steps < 1 or self.guidance < 0:
            raise ConfigError("sample_steps must be >= 1 and guidance >= 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        try:
            self.model_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @property
    def spec(self) -> FusionSpec:
        align = None if self.alignment is None else LayerAlignment(tuple(self.alignment))
        return FusionSpec(self.variant, self.conditioning, self.positional, align, self.mrope_chunks)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            llm=self.llm,
            dit=self.dit,
            spec=self.spec,
            image_size=self.image_size,
            channels=self.channels,
            patch_size=self.patch_size,
            text_len=self.text_len,
            timestep_dim=self.timestep_dim,
            attend_pad=self.attend_pad,
        )

    def replace(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    # -- text form ------------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, StreamConfig):
                for sf in fields(v):
                    lines.append(f"{f.name}.{sf.name} = {_fmt(getattr(v, sf.name))}")
            else:
                lines.append(f"{f.name} = {_fmt(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        return (base or cls()).with_overrides(parse_pairs(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def with_overrides(self, pairs: dict[str, str]) -> "RunConfig":
        """Apply ``key -> raw string`` overrides, parsing each by field type."""
        top = {f.name: f for f in fields(self)}
        kw: dict = {}
        streams: dict[str, dict] = {}
        for key, raw in pairs.items():
            head, _, sub = key.partition(".")
            if sub:
                if head not in ("llm", "dit"):
                    raise ConfigError(f"unknown config key {key!r}")
                sfields = {f.name: f for f in fields(StreamConfig)}
                if sub not in sfields:
                    raise ConfigError(f"unknown config key {key!r}")
                streams.setdefault(head, {})[sub] = _parse(raw, sfields[sub].type, key)
            elif key in top:
                kw[key] = _parse(raw, top[key].type, key)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        for head, sub in streams.items():
            try:
                kw[head] = replace(kw.get(head, getattr(self, head)), **sub)
            except ValueError as e:
                raise ConfigError(str(e)) from None
        try:
            return replace(self, **kw)
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from None


def parse_pairs(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, val = line.partition("=")
        if not eq or not key.strip():
            raise ConfigError(f"line {n}: expected 'key = value'")
        out[key.strip()] = val.strip()
    return out


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if hasattr(v, "value"):
        return v.value
    return repr(v) if isinstance(v, float) else str(v)


def _parse(raw: str, typ, key: str):
    t = str(typ)
    try:
        if "tuple" in t:
            if raw.lower() in ("auto", "none", ""):
                return None
            return tuple(int(x) for x in raw.split(","))
        if t.startswith("bool") or t == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if "float" in t and "None" in t:
            return None if raw.lower() in ("auto", "none") else float(raw)
        if t.startswith("float") or t == "float":
            return float(raw)
        if t.startswith("int") or t == "int":
            return int(raw)
        if "FusionVariant" in t:
            return FusionVariant(raw)
        if "TimestepConditioning" in t:
            return TimestepConditioning(raw)
        if "PositionalScheme" in t:
            return PositionalScheme(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    raise ConfigError(f"unsupported field type for {key}")


def field_names() -> list[str]:
    names = []
    for f in fields(RunConfig):
        if f.name in ("llm", "dit"):
            names += [f"{f.name}.{s.name}" for s in fields(StreamConfig)]
        else:
            names.append(f.name)
    return names
