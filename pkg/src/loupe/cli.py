"""Command-line entry point.

    loupe train     --config run.cfg [--seed N] [--out DIR] [--precision single|double]
    loupe eval      --checkpoint DIR [--split test] [--shuffle-labels SEED]
    loupe viz       --checkpoint DIR --n 8 --out DIR
    loupe gradcheck --config run.cfg
    loupe sweep     --config run.cfg --lambdas 0,0.05,0.5 --seeds 0,1,2
    loupe gen-data  --config run.cfg --out data.lfg1

Exit codes: 0 success, 2 config error, 3 numeric/contract failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import checkpoint
from . import config as config_mod
from .backbone import build, forward, leaves
from .config import RunConfig
from .data import eval_split, generate, shuffled_labels, write_dataset
from .errors import CompatibilityError, ConfigError, ContractError, LoupeError
from .gradcheck import GradCheckReport, grad_check
from .objective import composite_loss
from .train import evaluate, load_splits, predict, train
from .viz import attention_iou, overlay_write, pointing_game, top_fraction_mask, trace_contours, upsample_bilinear

log = logging.getLogger("loupe")

DEFAULT_LAMBDAS = (0.0, 0.01, 0.05, 0.1, 0.5, 5.0)
GRADCHECK_TOL = 1e-4
VIZ_FRACTION = 0.05


# ----------------------------------------------------------------------------
# building blocks (importable; the subcommands are thin wrappers)


def load_config(path: Optional[str], seed: Optional[int] = None, out: Optional[str] = None,
                precision: Optional[str] = None, overrides: Sequence[str] = ()) -> RunConfig:
    cfg = config_mod.load(path) if path else RunConfig()
    items = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        items.append((k.strip(), v))
    if seed is not None:
        items.append(("run.seed", str(seed)))
    if out is not None:
        items.append(("run.out_dir", out))
    if precision is not None:
        items.append(("run.precision", precision))
    cfg = config_mod.apply_overrides(cfg, items)
    cfg.validate()
    return cfg


def model_gradcheck(cfg: RunConfig, n_coords: int = 200, eps: float = 1e-4, batch: int = 4) -> GradCheckReport:
    """Finite-difference check of the full loss on one small batch, in double precision.

    The Loupe's output layer starts at zero, which makes the first-layer
    gradient vanish identically; it is perturbed so every group is exercised.
    """
    cfg = config_mod.apply_overrides(copy.deepcopy(cfg), [("run.precision", "double")])
    state = build(cfg.backbone, "double")
    rng = np.random.default_rng([cfg.seed, 0x6C])
    if "loupe.w2" in state.params:
        state.params["loupe.w2"] = rng.standard_normal(state.params["loupe.w2"].shape) * 0.5
        state.params["loupe.b2"] = rng.standard_normal(1) * 0.5
    split = load_splits(cfg)["train"]
    images = split.images[:batch].astype(np.float64)
    labels = split.labels[:batch]

    def model_eval(p):
        res = forward(state, images, p)
        return composite_loss(res.logits, labels, res.map, cfg.loss).total

    return grad_check(model_eval, state.params, eps=eps, n_coords=n_coords, seed=cfg.seed)


def analytic_grads(cfg: RunConfig, batch: int = 4) -> Dict[str, np.ndarray]:
    """Backprop gradients at initialization (Loupe output layer perturbed as above)."""
    state = build(cfg.backbone, "double")
    rng = np.random.default_rng([cfg.seed, 0x6C])
    if "loupe.w2" in state.params:
        state.params["loupe.w2"] = rng.standard_normal(state.params["loupe.w2"].shape) * 0.5
        state.params["loupe.b2"] = rng.standard_normal(1) * 0.5
    split = load_splits(cfg)["train"]
    p = leaves(state, requires_grad=True)
    res = forward(state, split.images[:batch].astype(np.float64), p)
    composite_loss(res.logits, split.labels[:batch], res.map, cfg.loss).total.backward()
    return {k: t.grad for k, t in p.items()}


def _check_compatible(state, cfg: RunConfig, splits) -> None:
    want = (state.config.in_channels, state.config.input_size, state.config.input_size)
    got = splits["test"].images.shape[1:]
    if tuple(got) != want:
        raise CompatibilityError(f"dataset images {tuple(got)} vs checkpoint input {want}")


def eval_checkpoint(ckpt: str, split: str = "test", shuffle_seed: Optional[int] = None,
                    data_path: Optional[str] = None) -> Dict[str, Optional[float]]:
    state, cfg = checkpoint.load(ckpt, "single")
    if data_path:
        cfg.data_path = data_path
    splits = load_splits(cfg)
    _check_compatible(state, cfg, splits)
    sp = eval_split(splits[split], cfg.augment.eval_resize, cfg.augment.eval_crop)
    if shuffle_seed is not None:
        sp = shuffled_labels(sp, shuffle_seed)
    out = evaluate(state, sp)
    out["split"] = split
    out["n"] = len(sp)
    return out


def viz_checkpoint(ckpt: str, n: int, out_dir, data_path: Optional[str] = None) -> List[dict]:
    state, cfg = checkpoint.load(ckpt, "single")
    if not state.config.loupe_enabled:
        raise ContractError("viz needs a checkpoint with the Loupe enabled")
    if data_path:
        cfg.data_path = data_path
    splits = load_splits(cfg)
    _check_compatible(state, cfg, splits)
    test = eval_split(splits["test"], cfg.augment.eval_resize, cfg.augment.eval_crop)
    n = min(n, len(test))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    logits, maps = predict(state, test.images[:n])
    s = test.images.shape[-1]
    up = upsample_bilinear(maps.astype(np.float64), (s, s))[:, 0]
    rows = []
    for i in range(n):
        mask = top_fraction_mask(up[i], VIZ_FRACTION)
        name = f"sample_{i:04d}.ppm"
        image = np.clip(test.images[i].astype(np.float64), 0.0, 1.0)
        overlay_write(image, trace_contours(mask), out_dir / name)
        rows.append({
            "file": name,
            "label": int(test.labels[i]),
            "pred": int(np.argmax(logits[i])),
            "hit": pointing_game(up[i], test.masks[i]),
            "iou": attention_iou(mask, test.masks[i]),
            "highlighted": int(mask.sum()),
        })
    sidecar = out_dir / "viz_metrics.jsonl"
    sidecar.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return rows


@dataclass
class SweepRow:
    lam: float
    n_seeds: int
    acc_mean: float
    acc_sd: float
    mass_mean: Optional[float]
    mass_sd: Optional[float]
    pointing_mean: Optional[float]


def _mean_sd(vals):
    if any(v is None for v in vals):
        return None, None
    a = np.asarray(vals, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


def run_sweep(cfg: RunConfig, lambdas: Sequence[float], seeds: Sequence[int], out_dir, runner=None) -> List[SweepRow]:
    """Train one model per (lambda, seed); rows come back in ``lambdas`` order.

    ``runner(cfg, out_dir) -> test-metrics dict`` can be swapped in (tests
    use it to share runs between criteria).
    """
    if not lambdas:
        raise ConfigError("sweep needs at least one lambda")
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    out_dir = Path(out_dir)
    if runner is None:
        def runner(c, d):
            return train(c, d, quiet=True).test
    rows = []
    for lam in lambdas:
        accs, masses, points = [], [], []
        for seed in seeds:
            c = config_mod.apply_overrides(copy.deepcopy(cfg), [("loss.lambda", repr(float(lam))), ("run.seed", str(seed))])
            c.validate()
            res = runner(c, out_dir / f"lam_{lam:g}" / f"seed_{seed}")
            accs.append(res["accuracy"])
            masses.append(res["mean_attention_mass"])
            points.append(res["pointing_hit_rate"])
        am, asd = _mean_sd(accs)
        mm, msd = _mean_sd(masses)
        pm, _ = _mean_sd(points)
        rows.append(SweepRow(float(lam), len(seeds), am, asd, mm, msd, pm))
    return rows


def format_sweep(rows: Sequence[SweepRow]) -> str:
    def f(v, fmt):
        return "n/a" if v is None else format(v, fmt)

    lines = [f"{'lambda':>8}  {'seeds':>5}  {'accuracy':>17}  {'attention mass':>17}  {'pointing':>8}"]
    for r in rows:
        lines.append(
            f"{r.lam:>8g}  {r.n_seeds:>5d}  {f(r.acc_mean, '.4f'):>8} ± {f(r.acc_sd, '.4f'):<6}  "
            f"{f(r.mass_mean, '.4f'):>8} ± {f(r.mass_sd, '.4f'):<6}  {f(r.pointing_mean, '.3f'):>8}"
        )
    return "\n".join(lines)


def _parse_list(text: str, cast) -> list:
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse list {text!r}: {exc}") from exc


# ----------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed, args.out, args.precision, args.set)
    res = train(cfg, quiet=args.quiet)
    print(json.dumps({"best_epoch": res.best_epoch, "best_val_accuracy": res.best_val_accuracy,
                      "epochs_run": len(res.records), "test": res.test, "out_dir": str(res.out_dir)}))
    return 0


def cmd_eval(args) -> int:
    out = eval_checkpoint(args.checkpoint, args.split, args.shuffle_labels, args.data)
    print(json.dumps(out))
    return 0


def cmd_viz(args) -> int:
    out = args.out or str(Path(args.checkpoint).parent / "viz")
    rows = viz_checkpoint(args.checkpoint, args.n, out, args.data)
    hits = np.mean([r["hit"] for r in rows]) if rows else math.nan
    print(f"wrote {len(rows)} overlays to {out} (pointing hit rate {hits:.3f})")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config, args.seed, None, "double", args.set)
    rep = model_gradcheck(cfg, n_coords=args.coords)
    ok = rep.passed(GRADCHECK_TOL)
    for name, err in rep.per_param.items():
        print(f"  {name:<28} {err:.3e}")
    if not cfg.backbone.loupe_enabled:
        print("  loupe parameters: absent (loupe disabled)")
    for name in rep.unchecked:
        print(f"  {name:<28} unchecked (every probe crossed a relu kink)")
    print(f"max_rel_err {rep.max_rel_err:.3e} over {rep.n_checked} coordinates (worst: {rep.worst_param}); "
          f"{rep.kinks_skipped} kink-crossing probes resampled")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 3


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, None, args.out, args.precision, args.set)
    lambdas = _parse_list(args.lambdas, float) if args.lambdas else list(DEFAULT_LAMBDAS)
    seeds = _parse_list(args.seeds, int)
    out = Path(cfg.out_dir)
    rows = run_sweep(cfg, lambdas, seeds, out)
    table = format_sweep(rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.txt").write_text(table + "\n", encoding="utf-8")
    (out / "sweep.jsonl").write_text("".join(json.dumps(r.__dict__) + "\n" for r in rows), encoding="utf-8")
    print(table)
    return 0


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, None, None, None, args.set)
    write_dataset(args.out, cfg.data, generate(cfg.data))
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="loupe", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out=True, precision=True):
        p.add_argument("--config", help="key = value config file (defaults when omitted)")
        p.add_argument("--seed", type=int)
        if out:
            p.add_argument("--out", help="output directory")
        if precision:
            p.add_argument("--precision", choices=("single", "double"))
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="LFG1 dataset file (defaults to the checkpoint's config)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--shuffle-labels", type=int, metavar="SEED", help="permute labels first (sanity check)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("viz", help="write attention overlays for the first test samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_viz)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    common(p, out=False, precision=False)
    p.add_argument("--coords", type=int, default=200)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("sweep", help="train over a lambda grid and several seeds")
    common(p)
    p.add_argument("--lambdas", help="comma-separated; default " + ",".join(f"{v:g}" for v in DEFAULT_LAMBDAS))
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("gen-data", help="write the synthetic dataset as an LFG1 file")
    common(p, out=False, precision=False)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except LoupeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
