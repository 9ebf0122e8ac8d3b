"""Run configuration: dataclasses plus the ``section.key = value`` file format.

Example::

    # desk run
    loss.lambda = 0.05
    loss.l1_mode = mean_per_element
    backbone.loupe_enabled = true
    schedule.epochs = 20
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Tuple

from .backbone import BackboneConfig
from .data import DatasetSpec
from .errors import ConfigError
from .objective import LossConfig, ScheduleConfig
from .tensor import PRECISIONS

# full-scale recipe values (224px, pretrained backbone); desk runs override lr
FULL_SCALE_LR = 1e-5
DESK_LR = 3e-4


@dataclass
class OptimConfig:
    lr: float = DESK_LR
    weight_decay: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.99


@dataclass
class AugmentConfig:
    crop_size: int = 60
    flip_prob: float = 0.5
    eval_resize: int = 68
    eval_crop: int = 64


@dataclass
class RunConfig:
    data: DatasetSpec = field(default_factory=DatasetSpec)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(base_lr=DESK_LR))
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    precision: str = "single"
    out_dir: str = "runs/default"
    data_path: str = ""

    def __post_init__(self):
        resolve(self)

    def validate(self) -> None:
        self.data.validate()
        self.backbone.validate()
        self.loss.validate()
        self.schedule.validate()
        if self.precision not in PRECISIONS:
            raise ConfigError(f"run.precision must be one of {tuple(PRECISIONS)}, got {self.precision!r}")
        if self.backbone.num_classes != self.data.num_classes:
            raise ConfigError(
                f"backbone.num_classes ({self.backbone.num_classes}) != data.num_classes ({self.data.num_classes})"
            )
        if self.augment.eval_crop != self.backbone.input_size:
            raise ConfigError(
                f"augment.eval_crop ({self.augment.eval_crop}) must equal backbone.input_size ({self.backbone.input_size})"
            )
        if self.data.image_size != self.backbone.input_size:
            raise ConfigError(
                f"data.image_size ({self.data.image_size}) must equal backbone.input_size ({self.backbone.input_size})"
            )
        if not self.augment.eval_crop <= self.augment.eval_resize:
            raise ConfigError("augment.eval_crop must not exceed augment.eval_resize")
        if not self.data.patch_size <= self.augment.crop_size <= self.data.image_size:
            raise ConfigError(
                f"augment.crop_size must lie in [{self.data.patch_size}, {self.data.image_size}], got {self.augment.crop_size}"
            )
        if not 0 <= self.augment.flip_prob <= 1:
            raise ConfigError("augment.flip_prob must lie in [0, 1]")


# file key -> (section attribute, field name)
_SECTIONS = {
    "data": "data",
    "backbone": "backbone",
    "loss": "loss",
    "optim": "optim",
    "schedule": "schedule",
    "augment": "augment",
}
_RENAMES = {
    ("loss", "lambda"): "lam",
    ("schedule", "epochs"): "total_epochs",
}
_RUN_KEYS = {"seed", "precision", "out_dir", "data_path"}
# keys tied to other fields; never read from file
_DERIVED = {("backbone", "seed"), ("schedule", "base_lr")}


def _parse_value(raw: str, current: Any, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None


def _field_name(section: str, key: str) -> str:
    return _RENAMES.get((section, key), key)


def _file_key(section: str, name: str) -> str:
    for (sec, k), n in _RENAMES.items():
        if sec == section and n == name:
            return k
    return name


def apply_overrides(cfg: RunConfig, items: List[Tuple[str, str]]) -> RunConfig:
    """Set dotted keys on ``cfg``; unknown keys raise ConfigError."""
    for key, raw in items:
        parts = key.split(".")
        if len(parts) == 2 and parts[0] == "run" and parts[1] in _RUN_KEYS:
            setattr(cfg, parts[1], _parse_value(raw, getattr(cfg, parts[1]), key))
            continue
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise ConfigError(f"{key}: unknown key")
        section, name = parts[0], _field_name(*parts)
        if (section, name) in _DERIVED:
            raise ConfigError(f"{key}: derived from another key, cannot be set")
        obj = getattr(cfg, _SECTIONS[section])
        names = {f.name for f in dataclasses.fields(obj)}
        if name not in names:
            raise ConfigError(f"{key}: unknown key")
        value = _parse_value(raw, getattr(obj, name), key)
        if dataclasses.is_dataclass(obj) and getattr(type(obj), "__dataclass_params__").frozen:
            obj = dataclasses.replace(obj, **{name: value})
            setattr(cfg, _SECTIONS[section], obj)
        else:
            setattr(obj, name, value)
    return resolve(cfg)


def resolve(cfg: RunConfig) -> RunConfig:
    """Tie derived fields together (model seed, schedule base lr)."""
    cfg.backbone.seed = cfg.seed
    cfg.schedule.base_lr = cfg.optim.lr
    return cfg


def parse_text(text: str, base: RunConfig = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    items = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        items.append((k.strip(), v))
    cfg = apply_overrides(cfg, items)
    cfg.validate()
    return cfg


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text)


def to_items(cfg: RunConfig) -> List[Tuple[str, Any]]:
    items = []
    for section, attr in _SECTIONS.items():
        obj = getattr(cfg, attr)
        for f in dataclasses.fields(obj):
            if (section, f.name) in _DERIVED:
                continue
            items.append((f"{section}.{_file_key(section, f.name)}", getattr(obj, f.name)))
    for k in sorted(_RUN_KEYS):
        items.append((f"run.{k}", getattr(cfg, k)))
    return items


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def dump_text(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in to_items(cfg))


def to_dict(cfg: RunConfig) -> Dict[str, Any]:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in to_items(cfg)}


def full_scale_recipe() -> RunConfig:
    """The reference optimization recipe at full scale (shape checks only)."""
    cfg = RunConfig(backbone=BackboneConfig.full_scale())
    cfg.optim.lr = FULL_SCALE_LR
    cfg.schedule.total_epochs = 50
    cfg.schedule.patience = 5
    cfg.schedule.batch_size = 32
    cfg.loss.lam = 0.05
    return resolve(cfg)
