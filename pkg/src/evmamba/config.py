"""Configuration records and their JSON file form.

A config file is a JSON object with up to three sections::

    {"data": {...}, "model": {...}, "train": {...}}

Keys are the dataclass field names below. ``apply_overrides`` accepts
``key=value`` strings where ``key`` is either ``section.field`` or a bare
field name that is unique across sections.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .events import CATEGORY_NAMES

FUSION_MODES = ("add", "concat", "b-matrix", "a-matrix")
LOSS_MODES = ("softmax-ce", "eq5-bce")
REPRESENTATIONS = ("both", "frame", "voxel")
SCHEDULES = ("constant", "cosine")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    categories: list = field(default_factory=lambda: list(CATEGORY_NAMES))
    train_per_category: int = 200
    test_per_category: int = 100
    width: int = 64
    height: int = 64
    duration_us: int = 200_000
    rate: float = 10.0
    noise_fraction: float = 0.1
    binary: bool = True
    seed: int = 0

    def validate(self):
        if len(self.categories) < 2:
            raise ConfigError("need at least 2 categories")
        if self.train_per_category < 1 or self.test_per_category < 1:
            raise ConfigError("train and test counts per category must be >= 1")
        unknown = [c for c in self.categories if c not in CATEGORY_NAMES]
        if unknown:
            raise ConfigError(f"unknown generator(s): {unknown}")
        return self


@dataclass
class ModelConfig:
    input_height: int = 32
    input_width: int = 32
    patch: int = 4
    dim: int = 64
    inner_dim: int = 0  # 0 -> dim // 2
    depth: int = 2
    state_size: int = 16
    frames: int = 8
    tokens: int = 16
    clips: int = 8
    micro: int = 2
    fusion: str = "add"
    loss: str = "softmax-ce"
    representation: str = "both"
    categories: int = 5
    delta: int = 1
    eps_min: int = 1
    max_voxels: int = 64
    s_min: float = -1.0
    cells_across: int = 16
    # LayerNorm epsilon; also a noise floor so near-empty patches stay quiet
    norm_eps: float = 0.01
    dtype: str = "float32"
    seed: int = 0

    @property
    def descriptor_dim(self):
        return self.micro ** 3 + 2

    @property
    def grid(self):
        return self.input_height // self.patch, self.input_width // self.patch

    def validate(self):
        if self.input_height % self.patch or self.input_width % self.patch:
            raise ConfigError(
                f"input {self.input_height}x{self.input_width} not divisible by patch {self.patch}"
            )
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.categories < 2:
            raise ConfigError("need at least 2 categories")
        if self.dim % 2:
            raise ConfigError("dim must be even")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion!r}")
        if self.loss not in LOSS_MODES:
            raise ConfigError(f"unknown loss mode {self.loss!r}")
        if self.representation not in REPRESENTATIONS:
            raise ConfigError(f"unknown representation {self.representation!r}")
        if self.norm_eps <= 0:
            raise ConfigError("norm_eps must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if min(self.frames, self.tokens, self.clips, self.delta, self.eps_min) < 1:
            raise ConfigError("frames, tokens, clips, delta and eps_min must be >= 1")
        return self

    @classmethod
    def paper_scale(cls, categories=150):
        """Full-size settings: 224x224 input, 33 blocks, 8 frames."""
        return cls(input_height=224, input_width=224, patch=4, dim=96, depth=33,
                   categories=categories)


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 16
    lr: float = 0.02
    weight_decay: float = 0.0001
    momentum: float = 0.9
    clip_norm: float = 1.0  # 0 disables
    schedule: str = "cosine"  # or "constant"
    stop_at: float = 0.0  # stop once test top-1 reaches this; 0 disables
    shuffle_seed: int = 1

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        return self

    @classmethod
    def paper_scale(cls):
        return cls(epochs=30, lr=0.001, weight_decay=0.0001, momentum=0.0, clip_norm=0.0,
                   schedule="constant")


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        cfg = cls()
        for section, values in d.items():
            if section not in ("data", "model", "train"):
                raise ConfigError(f"unknown config section {section!r}")
            target = getattr(cfg, section)
            for key, val in values.items():
                _set_field(target, key, val)
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")

    def validate(self):
        self.data.validate()
        self.model.validate()
        self.train.validate()
        return self


def _coerce(current, raw):
    if not isinstance(raw, str):
        return raw
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, list):
        return [s for s in raw.split(",") if s]
    return raw


def _set_field(target, key, value):
    if key not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigError(f"unknown key {key!r} for {type(target).__name__}")
    try:
        setattr(target, key, _coerce(getattr(target, key), value))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def apply_overrides(cfg: Config, overrides):
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        if "." in key:
            section, _, name = key.partition(".")
            if section not in ("data", "model", "train"):
                raise ConfigError(f"unknown config section {section!r}")
            _set_field(getattr(cfg, section), name, value)
            continue
        owners = [s for s in ("data", "model", "train")
                  if key in {f.name for f in dataclasses.fields(getattr(cfg, s))}]
        if not owners:
            raise ConfigError(f"unknown key {key!r}")
        if len(owners) > 1:
            raise ConfigError(f"key {key!r} is ambiguous; use one of "
                              + ", ".join(f"{o}.{key}" for o in owners))
        _set_field(getattr(cfg, owners[0]), key, value)
    return cfg
