"""Training loop, evaluation and metrics persistence."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import checkpoint
from . import config as config_mod
from .attention import border_mass
from .backbone import ModelState, build, forward, leaves
from .config import RunConfig
from .data import Split, augment_batch, eval_split, generate_cached, read_dataset
from .objective import OptimState, composite_loss, cosine_lr, early_stop, lion_step
from .tensor import as_dtype, backward
from .viz import localization_scores

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
TIMING_FILE = "timing.jsonl"
BEST_CKPT = "best"
EVAL_BATCH = 125


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    train_ce: float
    train_sparsity: float
    val_accuracy: float
    test_accuracy: Optional[float]
    mean_attention_mass: Optional[float]
    pointing_hit_rate: Optional[float]
    iou_mean: Optional[float]
    lr: float
    wall_seconds: Optional[float]


def load_splits(cfg: RunConfig) -> Dict[str, Split]:
    if cfg.data_path:
        _, splits = read_dataset(cfg.data_path)
    else:
        splits = generate_cached(cfg.data)
    return splits


def predict(state: ModelState, images: np.ndarray, batch: int = EVAL_BATCH):
    """Logits and (if present) attention maps for a stack of images."""
    logits, maps = [], []
    images = images.astype(state.dtype, copy=False)
    for i in range(0, len(images), batch):
        out = forward(state, images[i:i + batch])
        logits.append(out.logits.data)
        if out.map is not None:
            maps.append(out.map.data)
    return np.concatenate(logits), (np.concatenate(maps) if maps else None)


def evaluate(state: ModelState, split: Split, localization: bool = True) -> Dict[str, Optional[float]]:
    """Accuracy and, for Loupe models, localization statistics.

    Localization entries are None (not zero) for models without a map.
    """
    logits, maps = predict(state, split.images)
    acc = float(np.mean(np.argmax(logits, axis=1) == split.labels))
    out: Dict[str, Optional[float]] = {
        "accuracy": acc,
        "mean_attention_mass": None,
        "pointing_hit_rate": None,
        "iou_mean": None,
        "border_mass": None,
    }
    if maps is not None:
        out["mean_attention_mass"] = float(maps.astype(np.float64).mean())
        out["border_mass"] = float(np.mean([border_mass(m[0]) for m in maps]))
        if localization:
            scores = localization_scores(maps, split.masks)
            out["pointing_hit_rate"] = float(scores["hit"].mean())
            out["iou_mean"] = float(scores["iou"].mean())
    return out


def _write_line(path: Path, obj) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, sort_keys=False) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


@dataclass
class TrainResult:
    state: ModelState
    records: List[MetricsRecord]
    best_epoch: int
    best_val_accuracy: float
    test: Dict[str, Optional[float]]
    out_dir: Path


def train(cfg: RunConfig, out_dir=None, quiet: bool = False) -> TrainResult:
    """Run the full recipe and persist metrics + best-validation checkpoint.

    Output directory layout: metrics.jsonl (config echo line, then one
    MetricsRecord per epoch), timing.jsonl, best/ checkpoint, summary.json.
    """
    config_mod.resolve(cfg)
    cfg.validate()
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in (METRICS_FILE, TIMING_FILE):
        (out / name).unlink(missing_ok=True)
    # the echo omits where the run was written so identical runs compare byte-equal
    echo = {k: v for k, v in config_mod.to_dict(cfg).items() if k != "run.out_dir"}
    _write_line(out / METRICS_FILE, {"config": echo})

    splits = load_splits(cfg)
    aug = cfg.augment
    val = eval_split(splits["val"], aug.eval_resize, aug.eval_crop)
    test = eval_split(splits["test"], aug.eval_resize, aug.eval_crop)
    train_split = splits["train"]
    dtype = as_dtype(cfg.precision)

    state = build(cfg.backbone, cfg.precision)
    opt = OptimState(
        lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay, beta1=cfg.optim.beta1, beta2=cfg.optim.beta2
    )
    sched = cfg.schedule
    history: List[float] = []
    records: List[MetricsRecord] = []
    best_val, best_epoch, best_state = -1.0, 0, None
    n = len(train_split)
    t_start = time.perf_counter()

    for epoch in range(1, sched.total_epochs + 1):
        opt.lr = cosine_lr(epoch - 1, sched)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        images, _ = augment_batch(
            train_split.images[order],
            train_split.masks[order],
            train_split.origins[order],
            rng,
            aug.crop_size,
            aug.flip_prob,
            cfg.data.patch_size,
        )
        images = images.astype(dtype, copy=False)
        labels = train_split.labels[order]
        sums = np.zeros(3)
        n_batches = 0
        for i in range(0, n, sched.batch_size):
            p = leaves(state, requires_grad=True)
            res = forward(state, images[i:i + sched.batch_size], p)
            parts = composite_loss(res.logits, labels[i:i + sched.batch_size], res.map, cfg.loss)
            backward(parts.total)
            grads = {k: t.grad for k, t in p.items() if t.grad is not None}
            lion_step(state.params, grads, opt)
            state.step += 1
            sums += (float(parts.total.data), parts.ce, parts.sparsity)
            n_batches += 1
        train_loss, train_ce, train_sp = (sums / n_batches).tolist()

        val_stats = evaluate(state, val)
        history.append(val_stats["accuracy"])
        if val_stats["accuracy"] > best_val:
            best_val, best_epoch, best_state = val_stats["accuracy"], epoch, state.copy()
            checkpoint.save(out / BEST_CKPT, best_state, cfg)
        stop = early_stop(history, sched.patience) or epoch == sched.total_epochs

        test_acc = None
        test_stats: Dict[str, Optional[float]] = {}
        if stop:
            test_stats = evaluate(best_state, test)
            test_acc = test_stats["accuracy"]
        rec = MetricsRecord(
            epoch=epoch,
            train_loss=train_loss,
            train_ce=train_ce,
            train_sparsity=train_sp,
            val_accuracy=val_stats["accuracy"],
            test_accuracy=test_acc,
            mean_attention_mass=val_stats["mean_attention_mass"],
            pointing_hit_rate=val_stats["pointing_hit_rate"],
            iou_mean=val_stats["iou_mean"],
            lr=opt.lr,
            # wall time lives in timing.jsonl so metrics stay byte-reproducible
            wall_seconds=None,
        )
        records.append(rec)
        _write_line(out / METRICS_FILE, asdict(rec))
        _write_line(out / TIMING_FILE, {"epoch": epoch, "wall_seconds": time.perf_counter() - t_start})
        if not quiet:
            log.info(
                "epoch %d loss %.4f ce %.4f sp %.4f val %.4f lr %.2e",
                epoch, train_loss, train_ce, train_sp, val_stats["accuracy"], opt.lr,
            )
        if stop:
            break

    summary = {
        "best_epoch": best_epoch,
        "best_val_accuracy": best_val,
        "epochs_run": len(records),
        "test": test_stats,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return TrainResult(best_state, records, best_epoch, best_val, test_stats, out)
