"""Train the Loupe model and the plain backbone over several seeds and compare.

    python scripts/compare_baseline.py --seeds 0,1,2,3,4 --epochs 12 --out runs/compare
"""
import argparse
import json
from pathlib import Path

import numpy as np

from loupe.cli import load_config
from loupe.train import train


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config", default=None)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--lam", type=float, default=0.05)
    ap.add_argument("--out", default="runs/compare")
    args = ap.parse_args()

    out = Path(args.out)
    rows = []
    for seed in [int(s) for s in args.seeds.split(",")]:
        for loupe in (True, False):
            cfg = load_config(args.config, seed=seed, overrides=[
                f"backbone.loupe_enabled={loupe}",
                f"schedule.epochs={args.epochs}",
                f"loss.lambda={args.lam}",
                "loss.l1_mode=mean_per_element",
            ])
            name = f"{'loupe' if loupe else 'baseline'}_seed{seed}"
            res = train(cfg, out / name, quiet=True)
            row = {"model": "loupe" if loupe else "baseline", "seed": seed, "best_epoch": res.best_epoch, **res.test}
            rows.append(row)
            print(json.dumps(row))

    print()
    for model in ("loupe", "baseline"):
        acc = np.array([r["accuracy"] for r in rows if r["model"] == model])
        print(f"{model:<9} test accuracy {acc.mean():.4f} ± {acc.std(ddof=1) if len(acc) > 1 else 0:.4f} (n={len(acc)})")
    (out / "compare.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))


if __name__ == "__main__":
    main()
