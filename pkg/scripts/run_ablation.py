"""Run the desk ablation grid and print the table.

    python scripts/run_ablation.py --out runs/ablation [--cells full,no_stochastic]
"""

import argparse
import csv
import sys
from pathlib import Path

from probpcqa.cli import main


def parse():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("runs/ablation"))
    p.add_argument("--cells")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    return p.parse_args()


def run():
    args = parse()
    manifest = args.out / "data" / "manifest.jsonl"
    if not manifest.exists() and main(["gen-data", "--preset", "desk", "--out", str(args.out / "data")]):
        sys.exit(2)
    argv = ["ablate", "--manifest", str(manifest), "--preset", "desk", "--seed", str(args.seed),
            "--out", str(args.out / "grid")]
    if args.cells:
        argv += ["--cells", args.cells]
    if args.epochs:
        argv += ["--epochs", str(args.epochs)]
    code = main(argv)
    with open(args.out / "grid" / "ablation.csv") as f:
        rows = list(csv.DictReader(f))
    print(f"{'cell':<16}{'mode':<7}{'srcc':>8}{'plcc':>8}{'krcc':>8}{'rmse':>8}  status")
    for r in rows:
        nums = "".join(f"{float(r[k]):8.3f}" if r[k] else f"{'-':>8}" for k in ("srcc", "plcc", "krcc", "rmse"))
        print(f"{r['cell']:<16}{r['mode']:<7}{nums}  {r['status']}")
    sys.exit(code)


if __name__ == "__main__":
    run()
