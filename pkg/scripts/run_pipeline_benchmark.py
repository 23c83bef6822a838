"""Raw-image vs. segmented-image DFF accuracy on the golden seeds.

One segmenter (seed 1, 2000 steps) masks the target images of every DFF seed.

    python3 scripts/run_pipeline_benchmark.py --out runs/pipeline_benchmark.json
"""
import argparse
import json
from pathlib import Path

from ddtl import benchmarks as B


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(B.DFF_SEEDS))
    ap.add_argument("--seg-seed", type=int, default=1)
    ap.add_argument("--out", type=Path, default=Path("runs/pipeline_benchmark.json"))
    args = ap.parse_args()

    seg = B.run_seg(args.seg_seed)
    print(f"segmenter seed {args.seg_seed}: foreground IoU {seg.iou:.4f}", flush=True)
    rows = []
    for seed in args.seeds:
        raw = B.run_dff(seed)
        masked = B.run_dff(seed, segmenter=(seg.params, B.SEG_ARCH))
        rows.append({"seed": seed, "raw": raw.accuracy, "segmented": masked.accuracy})
        print(f"seed {seed}: raw {raw.accuracy:.3f}, segmented {masked.accuracy:.3f}", flush=True)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
