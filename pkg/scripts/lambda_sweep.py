"""Sparsity-weight sweep: accuracy and attention mass per lambda.

    python scripts/lambda_sweep.py --seeds 0,1,2 --epochs 6 --out runs/sweep
"""
import argparse
import json
from pathlib import Path

from loupe.cli import DEFAULT_LAMBDAS, format_sweep, load_config, run_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config", default=None)
    ap.add_argument("--lambdas", default=",".join(f"{v:g}" for v in DEFAULT_LAMBDAS))
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()

    cfg = load_config(args.config, overrides=[f"schedule.epochs={args.epochs}", "loss.l1_mode=mean_per_element"])
    out = Path(args.out)
    rows = run_sweep(cfg, [float(v) for v in args.lambdas.split(",")], [int(s) for s in args.seeds.split(",")], out)
    table = format_sweep(rows)
    print(table)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.txt").write_text(table + "\n")
    (out / "sweep.jsonl").write_text("".join(json.dumps(r.__dict__) + "\n" for r in rows))


if __name__ == "__main__":
    main()
