"""The Loupe: a small conv head that predicts a spatial attention map.

    map = sigmoid(conv1x1(relu(conv3x3(F))))
    F_refined = F * map            (broadcast over channels)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, broadcast_mul, conv2d, relu, sigmoid


def hidden_width(channels: int) -> int:
    return max(1, channels // 4)


def param_count(channels: int) -> int:
    if channels < 1:
        raise ContractError(f"channel count must be >= 1, got {channels}")
    hid = hidden_width(channels)
    return 9 * channels * hid + 2 * hid + 1


@dataclass
class LoupeParams:
    w1: np.ndarray  # hid x C x 3 x 3
    b1: np.ndarray  # hid
    w2: np.ndarray  # 1 x hid x 1 x 1
    b2: np.ndarray  # 1

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, dtype=np.float64) -> "LoupeParams":
        """Fan-in scaled w1; zero w2/b2 so the initial map is exactly 0.5."""
        hid = hidden_width(channels)
        std = np.sqrt(2.0 / (9 * channels))
        return cls(
            w1=(rng.standard_normal((hid, channels, 3, 3)) * std).astype(dtype),
            b1=np.zeros(hid, dtype=dtype),
            w2=np.zeros((1, hid, 1, 1), dtype=dtype),
            b2=np.zeros(1, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def size(self) -> int:
        return sum(a.size for a in self.arrays().values())


def attention_forward(features: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """N x C x H x W features -> N x 1 x H x W map with values in (0, 1)."""
    if features.data.ndim != 4:
        raise DimensionError(f"attention_forward: expected N x C x H x W, got {features.shape}")
    if features.shape[1] != w1.shape[1]:
        raise DimensionError(
            f"attention_forward: channel axis mismatch, features have {features.shape[1]}, "
            f"Loupe built for {w1.shape[1]}"
        )
    hidden = relu(conv2d(features, w1, b1, padding=1))
    return sigmoid(conv2d(hidden, w2, b2, padding=0))


def refine(features: Tensor, amap: Tensor) -> Tensor:
    return broadcast_mul(features, amap)


def apply_loupe(features: Tensor, params: Dict[str, Tensor]) -> tuple:
    """Returns (refined features, attention map)."""
    amap = attention_forward(features, params["w1"], params["b1"], params["w2"], params["b2"])
    return refine(features, amap), amap


def border_mass(amap: np.ndarray) -> float:
    """Fraction of total attention that sits in the outermost 1-pixel ring."""
    m = np.asarray(amap, dtype=np.float64)
    total = m.sum()
    if total == 0:
        return 0.0
    inner = m[..., 1:-1, 1:-1].sum() if m.shape[-1] > 2 and m.shape[-2] > 2 else 0.0
    return float((total - inner) / total)


def overhead_ratio(channels: int, backbone_params: int) -> float:
    """Loupe share of total parameters for a backbone of the given size."""
    lp = param_count(channels)
    return lp / (backbone_params + lp)
