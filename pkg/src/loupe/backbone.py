"""Hierarchical conv classifier with Swin-like stage geometry.

Patch embed (stride = patch size) -> 4 stages of pre-activation residual
blocks with 2x2 patch merging between them, channels C1, 2C1, 4C1, 8C1 ->
global average pool -> linear head. The Loupe sits after Stage 2.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .attention import LoupeParams, apply_loupe
from .errors import ConfigError, DimensionError
from .tensor import (
    Tensor,
    add,
    as_dtype,
    conv2d,
    global_avg_pool,
    linear,
    patch_embed,
    patch_merge,
    relu,
)

LOUPE_KEYS = ("loupe.w1", "loupe.b1", "loupe.w2", "loupe.b2")


@dataclass
class BackboneConfig:
    input_size: int = 64
    in_channels: int = 3
    patch_size: int = 4
    base_channels: int = 16
    blocks_per_stage: Tuple[int, int, int, int] = (1, 1, 1, 1)
    num_classes: int = 10
    loupe_enabled: bool = True
    insertion_stage: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.insertion_stage != 2:
            raise ConfigError(f"backbone.insertion_stage: only stage 2 is supported, got {self.insertion_stage}")
        if len(self.blocks_per_stage) != 4 or any(b < 0 for b in self.blocks_per_stage):
            raise ConfigError(f"backbone.blocks_per_stage: need 4 non-negative ints, got {self.blocks_per_stage}")
        for name in ("input_size", "in_channels", "patch_size", "base_channels", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"backbone.{name} must be >= 1")
        if self.input_size % (self.patch_size * 8):
            raise ConfigError(
                f"backbone.input_size: {self.input_size} not divisible by patch_size*8 = {self.patch_size * 8}"
            )

    def stage_channels(self) -> List[int]:
        return [self.base_channels * 2 ** s for s in range(4)]

    def stage_sizes(self) -> List[int]:
        return [self.input_size // (self.patch_size * 2 ** s) for s in range(4)]

    @classmethod
    def full_scale(cls, **overrides) -> "BackboneConfig":
        """224px input, C1=128: Stage-2 features are 28x28x256."""
        kw = dict(input_size=224, base_channels=128, num_classes=200)
        kw.update(overrides)
        return cls(**kw)


@dataclass
class ModelState:
    config: BackboneConfig
    params: Dict[str, np.ndarray]
    step: int = 0
    seed: int = 0

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def backbone_keys(self) -> List[str]:
        return [k for k in self.params if not k.startswith("loupe.")]

    def loupe_keys(self) -> List[str]:
        return [k for k in self.params if k.startswith("loupe.")]

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()}, self.step, self.seed)


def param_shapes(cfg: BackboneConfig) -> Dict[str, tuple]:
    """Name -> shape for every array, in a fixed order."""
    ch = cfg.stage_channels()
    p = cfg.patch_size
    shapes: Dict[str, tuple] = {
        "embed.w": (ch[0], cfg.in_channels, p, p),
        "embed.b": (ch[0],),
    }
    for s in range(4):
        c = ch[s]
        for b in range(cfg.blocks_per_stage[s]):
            pre = f"stage{s + 1}.block{b}"
            shapes[f"{pre}.conv1.w"] = (c, c, 3, 3)
            shapes[f"{pre}.conv1.b"] = (c,)
            shapes[f"{pre}.conv2.w"] = (c, c, 3, 3)
            shapes[f"{pre}.conv2.b"] = (c,)
        if s == 1 and cfg.loupe_enabled:
            lp = LoupeParams.init(c, np.random.default_rng(0))
            for k, v in lp.arrays().items():
                shapes[f"loupe.{k}"] = v.shape
        if s < 3:
            shapes[f"merge{s + 1}.w"] = (2 * c, 4 * c)
            shapes[f"merge{s + 1}.b"] = (2 * c,)
    shapes["head.w"] = (cfg.num_classes, ch[3])
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


def _init_array(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".b"):
        return np.zeros(shape)
    fan_in = int(np.prod(shape[1:]))
    if name.endswith("conv1.w") or name == "embed.w":
        std = np.sqrt(2.0 / fan_in)
    elif name.endswith("conv2.w"):
        # residual branch starts small so the stack begins near identity
        std = 0.25 * np.sqrt(2.0 / fan_in)
    else:
        std = np.sqrt(1.0 / fan_in)
    return rng.standard_normal(shape) * std


def build(config: BackboneConfig, precision: str = "single") -> ModelState:
    """Deterministic initialization from ``config.seed``.

    Each array draws from its own seed stream keyed by name, so a model with
    and without the Loupe share identical backbone weights.
    """
    config.validate()
    dtype = as_dtype(precision)
    params: Dict[str, np.ndarray] = {}
    loupe_done = False
    for name, shape in param_shapes(config).items():
        key = [config.seed] + [ord(ch) for ch in name]
        rng = np.random.default_rng(key)
        if name.startswith("loupe."):
            if not loupe_done:
                lp = LoupeParams.init(shape[1], np.random.default_rng([config.seed] + [ord(c) for c in "loupe"]))
                for k, v in lp.arrays().items():
                    params[f"loupe.{k}"] = v.astype(dtype)
                loupe_done = True
            continue
        params[name] = _init_array(name, shape, rng).astype(dtype)
    return ModelState(config=config, params=params, step=0, seed=config.seed)


@dataclass
class ForwardResult:
    logits: Tensor
    map: Optional[Tensor]
    stage_shapes: List[tuple] = field(default_factory=list)
    embed_shape: tuple = ()


def _block(x: Tensor, p: Dict[str, Tensor], pre: str) -> Tensor:
    h = conv2d(relu(x), p[f"{pre}.conv1.w"], p[f"{pre}.conv1.b"], padding=1)
    h = conv2d(relu(h), p[f"{pre}.conv2.w"], p[f"{pre}.conv2.b"], padding=1)
    return add(x, h)


def leaves(state: ModelState, requires_grad: bool = False) -> Dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in state.params.items()}


def forward(
    state: ModelState,
    images,
    params: Optional[Dict[str, Tensor]] = None,
    stage2_scale: Optional[float] = None,
) -> ForwardResult:
    """Run the classifier; ``params`` defaults to non-differentiable leaves.

    ``stage2_scale`` multiplies the Stage-2 output by a constant instead of
    applying the Loupe (used as a reference model in tests).
    """
    cfg = state.config
    if params is None:
        params = leaves(state)
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=state.dtype))
    if x.data.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
        raise DimensionError(
            f"forward: expected N x {cfg.in_channels} x {cfg.input_size} x {cfg.input_size}, got {x.shape}"
        )
    x = patch_embed(x, params["embed.w"], params["embed.b"])
    embed_shape = x.shape
    amap = None
    stage_shapes = []
    for s in range(4):
        for b in range(cfg.blocks_per_stage[s]):
            x = _block(x, params, f"stage{s + 1}.block{b}")
        stage_shapes.append(x.shape)
        if s == 1:
            if stage2_scale is not None:
                x = x * stage2_scale
            elif cfg.loupe_enabled:
                lp = {k.split(".", 1)[1]: params[k] for k in LOUPE_KEYS}
                x, amap = apply_loupe(x, lp)
        if s < 3:
            x = patch_merge(x, params[f"merge{s + 1}.w"], params[f"merge{s + 1}.b"])
    logits = linear(global_avg_pool(x), params["head.w"], params["head.b"])
    return ForwardResult(logits=logits, map=amap, stage_shapes=stage_shapes, embed_shape=embed_shape)


def count_params(state: ModelState) -> Dict[str, float]:
    backbone = sum(state.params[k].size for k in state.backbone_keys())
    loupe = sum(state.params[k].size for k in state.loupe_keys()) if state.config.loupe_enabled else 0
    return {"backbone": backbone, "loupe": loupe, "ratio": loupe / (backbone + loupe)}
