"""Train a short desk run (if needed) and write attention overlays for test images.

    python scripts/render_attention.py --run runs/desk --n 16
"""
import argparse
from pathlib import Path

from loupe.cli import load_config, viz_checkpoint
from loupe.train import train


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config", default="configs/desk.cfg")
    ap.add_argument("--run", default="runs/desk")
    ap.add_argument("--n", type=int, default=16)
    args = ap.parse_args()

    run = Path(args.run)
    if not (run / "best" / "manifest.txt").exists():
        train(load_config(args.config, out=str(run)), run)
    rows = viz_checkpoint(str(run / "best"), args.n, run / "viz")
    hits = sum(r["hit"] for r in rows)
    print(f"{len(rows)} overlays in {run / 'viz'}; pointing hits {hits}/{len(rows)}")


if __name__ == "__main__":
    main()
