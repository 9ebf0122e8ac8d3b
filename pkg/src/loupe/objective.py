"""Training objective and optimization recipe.

total = CE + lambda * L1(map); Lion updates; per-epoch cosine learning
rate; early stopping on validation accuracy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, GraphStateError
from .tensor import L1_MODES, Tensor, l1_reduce, softmax_cross_entropy


@dataclass
class LossConfig:
    lam: float = 0.05
    l1_mode: str = "sum_per_sample"

    def validate(self) -> None:
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ConfigError(f"loss.lambda must be finite and >= 0, got {self.lam}")
        if self.l1_mode not in L1_MODES:
            raise ConfigError(f"loss.l1_mode must be one of {L1_MODES}, got {self.l1_mode!r}")


@dataclass
class LossParts:
    total: Tensor
    ce: float
    sparsity: float


def composite_loss(logits: Tensor, labels, amap: Optional[Tensor], cfg: LossConfig) -> LossParts:
    """Cross-entropy plus lambda-weighted L1 of the attention map.

    ``sparsity`` is the unweighted L1 term (0 without a map).
    """
    cfg.validate()
    ce = softmax_cross_entropy(logits, labels)
    if amap is None:
        return LossParts(ce, float(ce.data), 0.0)
    l1 = l1_reduce(amap, cfg.l1_mode)
    if cfg.lam == 0:
        return LossParts(ce, float(ce.data), float(l1.data))
    return LossParts(ce + l1 * cfg.lam, float(ce.data), float(l1.data))


@dataclass
class OptimState:
    lr: float = 1e-5
    weight_decay: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.99
    t: int = 0
    momentum: Dict[str, np.ndarray] = field(default_factory=dict)


def lion_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimState) -> None:
    """One in-place Lion update of ``params``.

    c = b1*m + (1-b1)*g;  p -= lr*(sign(c) + wd*p);  m = b2*m + (1-b2)*g
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise GraphStateError(f"lion_step: grad for {name} has shape {g.shape}, param {p.shape}")
        m = state.momentum.get(name)
        if m is None:
            m = state.momentum[name] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise GraphStateError(f"lion_step: momentum for {name} has shape {m.shape}, param {p.shape}")
        c = state.beta1 * m + (1 - state.beta1) * g
        p -= state.lr * (np.sign(c) + state.weight_decay * p)
        m *= state.beta2
        m += (1 - state.beta2) * g
    state.t += 1


@dataclass
class ScheduleConfig:
    base_lr: float = 1e-5
    total_epochs: int = 50
    min_lr: float = 0.0
    patience: int = 5
    batch_size: int = 32

    def validate(self) -> None:
        if self.total_epochs < 1:
            raise ConfigError("schedule.epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("schedule.patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("schedule.batch_size must be >= 1")


def cosine_lr(epoch: int, cfg: ScheduleConfig) -> float:
    if not 0 <= epoch <= cfg.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1 + math.cos(math.pi * epoch / cfg.total_epochs))


def early_stop(val_acc_history: Sequence[float], patience: int) -> bool:
    """True when none of the last ``patience`` epochs beat the earlier best."""
    if len(val_acc_history) <= patience:
        return False
    best_before = max(val_acc_history[:-patience])
    for v in val_acc_history[-patience:]:
        if v > best_before:
            return False
    return True
