"""Reduced residual U-Net on blobs-masked: foreground IoU after 2000 steps.

    python3 scripts/run_seg_benchmark.py --seeds 1 2 3 --out runs/seg_benchmark.json
"""
import argparse
import json
from pathlib import Path

from ddtl import benchmarks as B


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(B.SEG_SEEDS))
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--out", type=Path, default=Path("runs/seg_benchmark.json"))
    args = ap.parse_args()

    rows = []
    for seed in args.seeds:
        r = B.run_seg(seed, args.steps)
        rows.append({"seed": seed, "foreground_iou": r.iou, "macro_iou": r.report["iou"],
                     "loss_first": r.losses[0], "loss_last": r.losses[-1],
                     "seconds": round(r.seconds, 1)})
        print(f"seed {seed}: foreground IoU {r.iou:.4f}, loss {r.losses[0]:.4f} -> "
              f"{r.losses[-1]:.4f} ({r.seconds:.0f}s)", flush=True)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
