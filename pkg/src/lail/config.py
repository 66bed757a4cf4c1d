"""Experiment config files: INI sections ``[data] [lm] [encoder] [lail] [train]``.

Every field of the underlying dataclasses is addressable as ``section.key``.
Unknown sections or keys are rejected.  Tuples are written as comma lists,
``lambdas`` as ``layer:weight`` pairs, and an empty value means ``None``.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field, fields, replace

from .connector import LAILConfig
from .data import DataParams
from .encoder import ConfigurationError, EncoderConfig
from .lm import LM_TIERS, CausalLMConfig, PretrainConfig
from .train import TrainConfig

SECTIONS = ("data", "lm", "encoder", "lail", "train")


@dataclass
class LMSection:
    """Tier selection, optional architecture overrides, and pretraining knobs."""
    tier: str = "large"
    d_llm: int | None = None
    num_layers: int | None = None
    num_heads: int | None = None
    ffn_mult: int | None = None
    context_cap: int | None = None
    steps: int = 600
    batch_size: int = 32
    lr: float = 2e-3
    warmup_steps: int = 100
    weight_decay: float = 0.01
    clip: float = 1.0
    log_every: int = 50

    def __post_init__(self):
        if self.tier not in LM_TIERS:
            raise ConfigurationError(f"lm.tier must be one of {sorted(LM_TIERS)}, got {self.tier!r}")

    def model_config(self) -> CausalLMConfig:
        over = {f.name: getattr(self, f.name) for f in fields(CausalLMConfig) if getattr(self, f.name) is not None}
        return replace(LM_TIERS[self.tier], **over)

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(**{f.name: getattr(self, f.name) for f in fields(PretrainConfig)})


@dataclass
class ExperimentConfig:
    data: DataParams = field(default_factory=DataParams)
    lm: LMSection = field(default_factory=LMSection)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lail: LAILConfig = field(default_factory=LAILConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.train = replace(self.train, lail=self.lail)
        if self.encoder.d_feat != self.data.d_feat:
            raise ConfigurationError(f"encoder.d_feat={self.encoder.d_feat} != data.d_feat={self.data.d_feat}")
        bad = [l for l in self.lail.tap_layers if not 1 <= l <= self.encoder.num_layers]
        if bad:
            raise ConfigurationError(f"lail.tap_layers {bad} outside 1..{self.encoder.num_layers}")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, seed=seed))


def _section_fields(name: str):
    cls = {"data": DataParams, "lm": LMSection, "encoder": EncoderConfig, "lail": LAILConfig,
           "train": TrainConfig}[name]
    hints = typing.get_type_hints(cls)
    return cls, {f.name: hints[f.name] for f in fields(cls) if not (name == "train" and f.name == "lail")}


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, dict):
        return ", ".join(f"{k}:{v!r}" for k, v in sorted(value.items()))
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key: str, text: str, hint):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or type(hint).__name__ == "UnionType":
        if text == "":
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    try:
        if origin is tuple:
            return tuple(int(p) for p in text.split(",") if p.strip())
        if origin is dict:
            out = {}
            for part in filter(None, (p.strip() for p in text.split(","))):
                k, v = part.split(":")
                out[int(k)] = float(v)
            return out
        if hint is bool:
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if hint in (int, float, str):
            return hint(text)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {text!r}") from None
    raise ConfigurationError(f"{key}: unsupported type {hint}")


def loads(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse a config document; missing keys keep the values of ``base``."""
    base = base or ExperimentConfig()
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigurationError(f"malformed config: {e}") from None
    unknown = [s for s in cp.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigurationError(f"unknown config section(s): {', '.join(unknown)}")
    parts = {}
    for name in SECTIONS:
        cls, hints = _section_fields(name)
        cur = getattr(base, name)
        vals = {k: getattr(cur, k) for k in hints}
        if cp.has_section(name):
            for key, raw in cp.items(name):
                if key not in hints:
                    raise ConfigurationError(f"unknown config key {name}.{key}")
                vals[key] = _parse(f"{name}.{key}", raw, hints[key])
        if name == "train":
            vals["lail"] = base.lail
        try:
            parts[name] = cls(**vals)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"[{name}] {e}") from None
    return ExperimentConfig(**parts)


def load(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as f:
        return loads(f.read())


def dumps(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    for name in SECTIONS:
        _, hints = _section_fields(name)
        obj = getattr(cfg, name)
        cp[name] = {k: _format(getattr(obj, k)) for k in hints}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def dump_defaults() -> str:
    head = ("# experiment config; every key is optional and shown with its default.\n"
            "# tuples: comma lists.  lail.lambdas: 'layer:weight' pairs, empty = uniform 1/|L|.\n"
            "# lm.d_llm .. lm.context_cap: empty = take the value of lm.tier.\n\n")
    return head + dumps(ExperimentConfig())


def as_dict(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["train"].pop("lail")
    return d
