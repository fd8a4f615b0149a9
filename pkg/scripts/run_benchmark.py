#!/usr/bin/env python3
"""Synthetic benchmark driver.

Generates the default synthetic dataset, trains the conditional flow,
the unconditional ablation, and the Gaussian baseline, evaluates all
three, and prints a comparison table. Everything lands under --workdir
so intermediate artifacts can be inspected afterwards.

Usage:
    python scripts/run_benchmark.py --workdir /tmp/bench [--seed 0]
"""

import argparse
import sys
from pathlib import Path

from flowad.cli import main as flowad


TRAIN_FLAGS = ["--layers", "4", "--epochs", "12", "--warmup-epochs", "2",
               "--lr", "2e-3", "--image-batch", "32",
               "--vector-batch", "2048"]


def run(args):
    code = flowad(args)
    if code != 0:
        sys.exit(code)


def read_report(out_dir):
    row = (out_dir / "report.csv").read_text().splitlines()[1].split(",")
    return {"detection": row[1], "pixel_auroc": row[2], "aupro": row[3]}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--shift", type=float, default=6.0)
    opts = ap.parse_args()

    work = Path(opts.workdir)
    data = work / "data"
    run(["synth", "--out", str(data), "--seed", str(opts.seed),
         "--n-train", "32", "--shift", str(opts.shift)])

    variants = {
        "cflow": TRAIN_FLAGS + ["--condition-dim", "16"],
        "uflow": TRAIN_FLAGS + ["--no-condition"],
        "mvg": ["--model", "mvg"],
    }
    results = {}
    for name, flags in variants.items():
        model_dir = work / name
        run(["train", "--data", str(data), "--out", str(model_dir),
             "--seed", str(opts.seed)] + flags)
        eval_dir = work / f"eval_{name}"
        run(["eval", "--data", str(data), "--out", str(eval_dir),
             "--checkpoint", str(model_dir / "checkpoint.cfck"),
             "--emit-maps"])
        results[name] = read_report(eval_dir)

    print(f"\n{'model':<8} {'detection':>10} {'pixel auroc':>12} {'aupro':>8}")
    for name, r in results.items():
        print(f"{name:<8} {r['detection']:>10} {r['pixel_auroc']:>12} "
              f"{r['aupro']:>8}")


if __name__ == "__main__":
    main()
