"""Training configuration and the plain-text ``key = value`` config format.

Keys are dotted by section: ``data.noise_sigma = 1.5``, ``optim.lr = 3e-3``,
``loss.lambda3 = 0.5``, ``model.lora_rank = 4``; ``seed``, ``arm`` and
``train_fraction`` are top level.  ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..errors import ConfigError
from ..model import ModelConfig
from ..synthdata import DataConfig

ARMS = ("full_cfa", "ce_only", "focal_only", "focal_align", "focal_cal", "frozen_vs_fullft")


@dataclass(frozen=True)
class ModelDims:
    d_enc: int = 16
    d_llm: int = 32
    n_layers: int = 2
    lora_rank: int = 4
    lora_alpha: float = 16.0
    d_k: int = 0
    ffn_mult: int = 2


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.5
    gamma: float = 2.0
    tau: float = 0.07
    sim_kind: str = "cosine"

    def __post_init__(self):
        if self.sim_kind not in ("cosine", "dot"):
            raise ConfigError(f"unknown sim_kind {self.sim_kind!r}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if min(self.lambda1, self.lambda2, self.lambda3, self.gamma) < 0:
            raise ConfigError("loss weights and gamma must be nonnegative")


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "adamw"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 20
    batch_size: int = 32

    def __post_init__(self):
        if self.kind != "adamw":
            raise ConfigError(f"unsupported optimizer {self.kind!r}")
        if self.lr < 0:
            raise ConfigError("lr must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelDims = field(default_factory=ModelDims)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    arm: str = "full_cfa"
    train_fraction: float = 1.0

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ConfigError(f"unknown arm {self.arm!r}; expected one of {ARMS}")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError("train_fraction must lie in (0, 1]")

    def model_config(self) -> ModelConfig:
        d = self.data
        m = self.model
        return ModelConfig(
            d_v=d.d_v,
            d_enc=m.d_enc,
            d_llm=m.d_llm,
            n_patches=d.n_patches,
            n_layers=m.n_layers,
            vocab_size=d.vocab_size,
            desc_len=d.desc_len,
            n_classes=d.n_classes,
            lora_rank=m.lora_rank,
            lora_alpha=m.lora_alpha,
            d_k=m.d_k,
            ffn_mult=m.ffn_mult,
            full_finetune=self.arm == "frozen_vs_fullft",
        )

    def with_(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)

    def echo(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"data": DataConfig, "model": ModelDims, "loss": LossConfig, "optim": OptimConfig}


def _coerce(raw: str, typ, key: str):
    typ = {"int": int, "float": float, "str": str, "bool": bool}.get(typ, typ) if isinstance(typ, str) else typ
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(raw, 0)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    sections: dict[str, dict] = {name: {} for name in _SECTIONS}
    top: dict = {}
    top_types = {f.name: f.type for f in fields(TrainConfig) if f.name not in _SECTIONS}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {line_no}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in _SECTIONS:
                raise ConfigError(f"config line {line_no}: unknown section {sec!r}")
            types = {f.name: f.type for f in fields(_SECTIONS[sec])}
            if name not in types:
                raise ConfigError(f"config line {line_no}: unknown key {key!r}")
            sections[sec][name] = _coerce(raw, types[name], key)
        else:
            if key not in top_types:
                raise ConfigError(f"config line {line_no}: unknown key {key!r}")
            top[key] = _coerce(raw, top_types[key], key)
    try:
        updates = {sec: replace(getattr(cfg, sec), **vals) for sec, vals in sections.items() if vals}
        return replace(cfg, **updates, **top)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def dump_config(cfg: TrainConfig) -> str:
    lines = [f"seed = {cfg.seed}", f"arm = {cfg.arm}", f"train_fraction = {cfg.train_fraction!r}"]
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            lines.append(f"{sec}.{f.name} = {getattr(obj, f.name)!r}".replace("'", ""))
    return "\n".join(lines) + "\n"
