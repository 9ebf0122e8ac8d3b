"""Loupe: a lightweight spatial-attention module for hierarchical classifiers.

Everything runs on numpy: a small reverse-mode autodiff engine, the
attention head, a Swin-shaped conv backbone, the sparsity-regularized
objective with a Lion optimizer, a synthetic fine-grained dataset with
ground-truth part masks, and attention visualization.
"""
from .attention import LoupeParams, apply_loupe, param_count
from .backbone import BackboneConfig, ModelState, build, forward
from .config import RunConfig
from .data import DatasetSpec, generate
from .errors import CompatibilityError, ConfigError, ContractError, DimensionError, LoupeError, NumericError

__all__ = [
    "BackboneConfig",
    "CompatibilityError",
    "ConfigError",
    "ContractError",
    "DatasetSpec",
    "DimensionError",
    "LoupeError",
    "LoupeParams",
    "ModelState",
    "NumericError",
    "RunConfig",
    "apply_loupe",
    "build",
    "forward",
    "generate",
    "param_count",
]
