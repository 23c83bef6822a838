"""Full-loss DFF vs. the lambda_D = 0 ablation on the seeded synthetic benchmark.

    python3 scripts/run_dff_benchmark.py --seeds 1 2 3 4 5 --out runs/dff_benchmark.json
"""
import argparse
import json
from pathlib import Path

from ddtl import benchmarks as B


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(B.DFF_SEEDS))
    ap.add_argument("--out", type=Path, default=Path("runs/dff_benchmark.json"))
    args = ap.parse_args()

    rows = []
    for seed in args.seeds:
        for lambdas in (B.FULL, B.NO_DOMAIN):
            r = B.run_dff(seed, lambdas)
            rows.append({"seed": seed, "lambdas": list(r.lambdas), "accuracy": r.accuracy,
                         "final_L": r.history[-1].L, "seconds": round(r.seconds, 1)})
            print(f"seed {seed} lambdas {r.lambdas}: accuracy {r.accuracy:.3f} "
                  f"({r.seconds:.0f}s)", flush=True)
    for lambdas in (B.FULL, B.NO_DOMAIN):
        acc = B.mean(r["accuracy"] for r in rows if tuple(r["lambdas"]) == lambdas)
        print(f"mean accuracy {lambdas}: {acc:.4f}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
