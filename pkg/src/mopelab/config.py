"""Run configuration: nested dataclasses loaded from JSON with strict keys."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .encoder import EncoderConfig
from .errors import ConfigError


@dataclass
class ComplementaryConfig(EncoderConfig):
    """Vector encoder for the complementary modality plus its vanilla prompts."""

    num_layers: int = 1
    d_model: int = 16
    num_heads: int = 2
    d_ff: int = 32
    seq_len: int = 4
    vocab: int = 0
    input_dim: int = 16
    # small positional/class init so psi_y is driven by y rather than by constants
    pos_init_std: float = 0.02
    num_prompts: int = 4

    def __post_init__(self):
        super().__post_init__()
        if self.num_prompts < 0:
            raise ConfigError("complementary num_prompts must be >= 0")


@dataclass
class MopeConfig:
    experts: int = 16
    prompt_len: int = 6
    d_c: int = 8
    d_i: int = 2
    tau: float = 0.1
    gamma: float = 0.1
    noise: bool = True
    learned_keys: bool = False
    dropout: float = 0.1
    # uniform prompt init half-width; None -> sqrt(6 / (d_x + prompt_len))
    init_eta: float | None = None
    # replace the router and experts by one learnable dynamic prompt per layer
    single_dynamic: bool = False
    # router projections start at gain / sqrt(fan_in) so early routing is soft
    router_init_gain: float = 0.02

    def __post_init__(self):
        if self.experts < 1:
            raise ConfigError("mope.experts must be >= 1")
        if self.prompt_len < 1:
            raise ConfigError("mope.prompt_len must be >= 1")
        if self.d_c < 0 or self.d_i < 0 or self.d_c + self.d_i == 0:
            raise ConfigError("mope routing dims need d_c, d_i >= 0 and d_c + d_i > 0")
        if not self.tau > 0:
            raise ConfigError("mope.tau must be positive")
        if self.router_init_gain < 0:
            raise ConfigError("mope.router_init_gain must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError("mope.dropout must lie in [0, 1)")

    @property
    def d_r(self) -> int:
        return self.d_c + self.d_i


@dataclass
class PromptFlags:
    static: bool = True
    dynamic: bool = True
    mapped: bool = True
    # static prompt length override (length-scaling baseline); None -> mope.prompt_len
    static_len: int | None = None


@dataclass
class SyntheticConfig:
    num_clusters: int = 8
    vocab: int = 16
    seq_len: int = 16
    d_y: int = 16
    num_classes: int = 4
    train_size: int = 4096
    val_size: int = 512
    test_size: int = 1024
    noise_std: float = 0.1
    mask_size: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.num_clusters < 2 or self.num_classes < 2:
            raise ConfigError("synthetic data needs >= 2 clusters and >= 2 classes")
        if self.seq_len < self.num_clusters * self.mask_size:
            raise ConfigError("seq_len too short for disjoint cluster masks")
        if self.d_y < self.num_clusters:
            raise ConfigError("d_y must be >= num_clusters for orthogonal cluster means")
        if min(self.train_size, self.val_size, self.test_size) < 1 or self.mask_size < 1 or self.vocab < 1:
            raise ConfigError("split sizes, vocab and mask_size must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr_main: float = 4e-4
    lr_comp: float = 5e-4
    weight_decay: float = 0.01
    imp_loss_weight: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not (self.lr_main > 0 and self.lr_comp > 0):
            raise ConfigError("learning rates must be positive")
        if self.imp_loss_weight < 0 or self.weight_decay < 0:
            raise ConfigError("imp_loss_weight and weight_decay must be >= 0")


def _main_encoder_default() -> EncoderConfig:
    return EncoderConfig(num_layers=2, d_model=32, num_heads=4, d_ff=64, seq_len=16, vocab=16, pretrain_steps=500)


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=_main_encoder_default)
    complementary: ComplementaryConfig = field(default_factory=ComplementaryConfig)
    mope: MopeConfig = field(default_factory=MopeConfig)
    prompts: PromptFlags = field(default_factory=PromptFlags)
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"
    model_seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def replace(self, **sections) -> "RunConfig":
        """Copy with per-section overrides, e.g. ``replace(mope={"experts": 4})``."""
        d = self.to_dict()
        for k, v in sections.items():
            if isinstance(v, dict):
                if k not in d or not isinstance(d[k], dict):
                    raise ConfigError(f"unknown config section {k!r}")
                d[k].update(v)
            else:
                d[k] = v
        return from_dict(d)


_SECTIONS = {
    "encoder": EncoderConfig,
    "complementary": ComplementaryConfig,
    "mope": MopeConfig,
    "prompts": PromptFlags,
    "data": SyntheticConfig,
    "train": TrainConfig,
}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kw: dict[str, Any] = {}
    for name, value in raw.items():
        kw[name] = _build(_SECTIONS[name], value, name) if name in _SECTIONS else value
    cfg = RunConfig(**kw)
    if cfg.complementary.input_dim != cfg.data.d_y:
        raise ConfigError("complementary.input_dim must equal data.d_y")
    if cfg.encoder.seq_len != cfg.data.seq_len or cfg.encoder.vocab != cfg.data.vocab:
        raise ConfigError("encoder seq_len/vocab must match the data config")
    return cfg


def loads(text: str) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None
    return from_dict(raw)


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


def dumps(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


_JSON_TYPES = {"int": "integer", "float": "number", "bool": "boolean", "str": "string"}


def _field_schema(f: dataclasses.Field) -> dict:
    # annotations are strings here (postponed evaluation)
    t = str(f.type).replace(" ", "")
    kind = _JSON_TYPES[t.split("|")[0]]
    return {"type": [kind, "null"]} if t.endswith("|None") else {"type": kind}


def json_schema() -> dict:
    """JSON schema of the run config, derived from the dataclasses."""
    sections = {}
    for name, cls in _SECTIONS.items():
        props = {f.name: _field_schema(f) for f in dataclasses.fields(cls)}
        sections[name] = {"type": "object", "additionalProperties": False, "properties": props}
    sections["output_dir"] = {"type": "string"}
    sections["model_seed"] = {"type": "integer"}
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "mopelab run config",
        "type": "object",
        "additionalProperties": False,
        "properties": sections,
    }
