"""Run configuration: a YAML file of sections mirroring the dataclasses below.

Every key is optional; unknown keys and wrong types are rejected with the
dotted path of the offending field. Example::

    model:
      layers: 4
      width: 64
    optim:
      lr: 1.0e-3
    train:
      steps: 2000
      seed: 3
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

DATA_ROOT_ENV = "MASKVL_DATA_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 32
    patch: int = 8
    channels: int = 3
    layers: int = 4
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    m_max: int = 16
    dec_layers: int = 2
    dec_width: int = 32
    dec_heads: int = 4
    norm_pix_loss: bool = False

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size // self.patch, self.image_size // self.patch

    @property
    def n_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def check(self) -> list[str]:
        errs = []
        if self.patch <= 0 or self.image_size % self.patch:
            errs.append(f"model.image_size: {self.image_size} not divisible by patch {self.patch}")
        if self.heads <= 0 or self.width % self.heads:
            errs.append(f"model.width: {self.width} not divisible by heads {self.heads}")
        if self.dec_heads <= 0 or self.dec_width % self.dec_heads:
            errs.append(f"model.dec_width: {self.dec_width} not divisible by dec_heads {self.dec_heads}")
        if self.m_max < 2:
            errs.append("model.m_max: must be >= 2")
        if self.layers < 0 or self.dec_layers < 0:
            errs.append("model.layers: must be >= 0")
        return errs


@dataclass
class MaskConfig:
    image_ratio: float = 0.6
    text_prob: float = 0.15
    itm_swap_prob: float = 0.5
    bert_mix: bool = False

    def check(self) -> list[str]:
        errs = []
        for name in ("image_ratio", "text_prob", "itm_swap_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                errs.append(f"mask.{name}: {v} outside [0, 1]")
        return errs


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_fraction: float = 0.1
    finetune_lr: float = 5e-4
    mim_lr: float = 3e-3
    layer_decay: float = 0.5

    def check(self) -> list[str]:
        errs = []
        if not 0.0 <= self.warmup_fraction <= 1.0:
            errs.append(f"optim.warmup_fraction: {self.warmup_fraction} outside [0, 1]")
        if self.eps <= 0:
            errs.append("optim.eps: must be > 0")
        return errs


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    log_every: int = 100
    num_samples: int = 256
    eval_pairs: int = 64

    def check(self) -> list[str]:
        errs = []
        if self.steps < 0:
            errs.append("train.steps: must be >= 0")
        if self.batch_size < 1:
            errs.append("train.batch_size: must be >= 1")
        return errs


@dataclass
class DataConfig:
    source: str = "synthetic"
    manifest: str = ""
    image_root: str = ""
    vocab_min_count: int = 1

    def check(self) -> list[str]:
        errs = []
        if self.source not in ("synthetic", "jsonl"):
            errs.append(f"data.source: expected 'synthetic' or 'jsonl', got {self.source!r}")
        if self.source == "jsonl" and not self.manifest:
            errs.append("data.manifest: required when source is jsonl")
        return errs

    def resolved_image_root(self) -> str:
        return self.image_root or os.environ.get(DATA_ROOT_ENV, "")


@dataclass
class FinetuneConfig:
    steps: int = 2000
    batch_size: int = 32
    num_samples: int = 512
    negatives: int = 15
    hidden_mult: int = 2
    vqa_kinds: str = "color,shape,where"  # comma-separated question kinds
    nlvr_colors: str = "red,green,blue,yellow"  # colors named by pair captions

    def check(self) -> list[str]:
        errs = [] if self.negatives >= 1 else ["finetune.negatives: must be >= 1"]
        bad = [k for k in self.vqa_kinds.split(",") if k not in ("color", "shape", "where")]
        if bad:
            errs.append(f"finetune.vqa_kinds: unknown kinds {bad}")
        bad = [c for c in self.nlvr_colors.split(",") if c not in ("red", "green", "blue", "yellow")]
        if bad:
            errs.append(f"finetune.nlvr_colors: unknown colors {bad}")
        return errs


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict[str, Any] | None) -> "Config":
        errors: list[str] = []
        cfg = _build(cls, raw or {}, "", errors)
        if not errors:
            for section in dataclasses.fields(cfg):
                errors.extend(getattr(cfg, section.name).check())
        if errors:
            raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
        return cfg


def _build(cls, raw: Any, path: str, errors: list[str]):
    if not isinstance(raw, dict):
        errors.append(f"{path.rstrip('.') or '<root>'}: expected a mapping, got {type(raw).__name__}")
        return cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            errors.append(f"{path}{key}: unknown field")
    kwargs = {}
    for name, f in known.items():
        if name not in raw:
            continue
        value = raw[name]
        where = f"{path}{name}"
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, where + ".", errors)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                errors.append(f"{where}: expected bool, got {value!r}")
            else:
                kwargs[name] = value
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                errors.append(f"{where}: expected int, got {value!r}")
            else:
                kwargs[name] = value
        elif isinstance(default, float):
            if isinstance(value, str):
                # PyYAML reads exponent literals without a dot ("1e-3") as strings
                try:
                    value = float(value)
                except ValueError:
                    pass
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                errors.append(f"{where}: expected float, got {value!r}")
            else:
                kwargs[name] = float(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                errors.append(f"{where}: expected string, got {value!r}")
            else:
                kwargs[name] = value
    return cls(**kwargs)


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return Config.from_dict(raw)


def dump_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
