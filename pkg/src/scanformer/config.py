"""Configuration dataclasses and the flat ``section.key = value`` file format.

Example::

    # desk run
    model.d = 64
    train.epochs = 30
    gen.noise = 0.05
    paths.data_dir = data
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class ModelConfig:
    d: int = 64
    layers: int = 4
    heads: int = 4
    scales: int = 3
    patch: int = 8
    text_len: int = 8
    vocab: int = 18
    image: int = 64
    channels: int = 3
    split: int = 0              # Encoder1 depth; 0 means layers // 2
    cache_grad: str = "all"     # which cached segments pass gradients: none | text | all
    seed: int = 0

    def __post_init__(self):
        if self.split == 0:
            self.split = self.layers // 2
        self.validate()

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def grid(self, level: int) -> tuple[int, int]:
        side = self.level_side(level) // self.patch
        return side, side

    def level_side(self, level: int) -> int:
        return self.image // 2 ** (self.scales - 1 - level)

    def tokens(self, level: int) -> int:
        r, c = self.grid(level)
        return r * c

    def validate(self) -> None:
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if not 1 <= self.split <= self.layers:
            raise ConfigError(f"split={self.split} outside 1..{self.layers}")
        if self.image % (self.patch * 2 ** (self.scales - 1)):
            raise ConfigError(f"image side {self.image} not divisible by P*2^(S-1)")
        if self.cache_grad not in ("none", "text", "all"):
            raise ConfigError(f"cache_grad must be none|text|all, got {self.cache_grad!r}")


PRESETS = {
    "desk": dict(),
    # ViLT-sized encoder on 640x640 inputs; P=32 gives the 25/100/400 token grids.
    "paper": dict(d=768, layers=12, heads=12, scales=3, patch=32, text_len=40, vocab=30522, image=640),
    "tiny": dict(d=16, layers=2, heads=2, scales=3, patch=4, text_len=8, vocab=18, image=32),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


@dataclass
class GenConfig:
    image: int = 64
    min_objects: int = 2
    max_objects: int = 5
    small_min: int = 10
    small_max: int = 16
    large_min: int = 20
    large_max: int = 30
    noise: float = 0.05
    background: float = 0.5
    max_iou: float = 0.1
    text_len: int = 8
    retries: int = 200
    train_seed: int = 0
    val_seed: int = 1_000_000


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    warmup_steps: int = 300
    peak_lr: float = 1e-3
    decay: str = "linear"
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    lambda_sparse: float = 0.05
    seed: int = 0
    n_train: int = 8000
    n_val: int = 1000
    eval_every: int = 1


@dataclass
class Paths:
    data_dir: str = "data"
    out_dir: str = "runs"
    checkpoint: str = "runs/best.ckpt"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    paths: Paths = field(default_factory=Paths)


def _coerce(value: str, kind, key: str):
    kind = {"int": int, "float": float, "str": str}.get(kind, kind)
    try:
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from exc
    return value


def parse_config(text: str, base_dir: Path | None = None) -> RunConfig:
    sections: dict[str, dict] = {"model": {}, "train": {}, "gen": {}, "paths": {}}
    preset_name = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "model.preset":
            preset_name = value
            continue
        section, _, name = key.partition(".")
        if section not in sections or not name:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        sections[section][name] = value
    classes = {"model": ModelConfig, "train": TrainConfig, "gen": GenConfig, "paths": Paths}
    built = {}
    for section, cls in classes.items():
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for name, value in sections[section].items():
            if name not in fields:
                raise ConfigError(f"unknown key {section}.{name}")
            kwargs[name] = _coerce(value, fields[name], f"{section}.{name}")
        if section == "model" and preset_name is not None:
            built[section] = preset(preset_name, **kwargs)
        else:
            built[section] = cls(**kwargs)
    paths = built["paths"]
    if base_dir is not None:
        for f in dataclasses.fields(Paths):
            p = Path(getattr(paths, f.name))
            setattr(paths, f.name, str(p if p.is_absolute() else (base_dir / p).resolve()))
    return RunConfig(**built)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, path.parent.resolve())


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in ("model", "train", "gen", "paths"):
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {getattr(obj, f.name)}")
    return "\n".join(lines) + "\n"
