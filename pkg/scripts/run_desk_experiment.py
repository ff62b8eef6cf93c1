"""Generate the desk dataset, train the full model, score and evaluate the test split.

    python scripts/run_desk_experiment.py --out runs/desk [--seed 0] [--epochs N]

Everything goes through the ``probpcqa`` command line, so each stage leaves its
own ``run.json`` next to its outputs.
"""

import argparse
import json
import sys
from pathlib import Path

from probpcqa.cli import main


def stage(*argv):
    code = main([str(a) for a in argv])
    if code:
        sys.exit(code)


def parse():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("runs/desk"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--samples", type=int, default=37)
    p.add_argument("--no-stochastic", action="store_true")
    return p.parse_args()


def run():
    args = parse()
    data, train, score = args.out / "data", args.out / "train", args.out / "score"
    manifest = data / "manifest.jsonl"
    if not manifest.exists():
        stage("gen-data", "--preset", "desk", "--out", data)
    extra = ["--epochs", args.epochs] if args.epochs else []
    if args.no_stochastic:
        extra.append("--no-stochastic")
    stage("train", "--manifest", manifest, "--preset", "desk", "--seed", args.seed, "--out", train, *extra)
    stage("score", "--checkpoint", train / "checkpoint.ckpt", "--manifest", manifest,
          "--samples", args.samples, "--dump-ratings", "--out", score)
    stage("eval", "--predictions", score / "predictions.csv", "--manifest", manifest, "--out", args.out / "eval")
    print(json.dumps(json.loads((args.out / "eval" / "report.json").read_text()), indent=2))


if __name__ == "__main__":
    run()
