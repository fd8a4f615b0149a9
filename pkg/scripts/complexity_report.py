#!/usr/bin/env python3
"""Model size vs spatial resolution.

Trains the flow and the Gaussian baseline on single-scale datasets of
increasing grid size and tabulates checkpoint parameter bytes. The flow
size is independent of the grid; the per-position Gaussian grows with
the number of positions.

Usage:
    python scripts/complexity_report.py --workdir /tmp/complexity
"""

import argparse
import sys
from pathlib import Path

from flowad.cli import main as flowad

GRIDS = ["8x8x4", "16x16x4", "32x32x4"]


def run(args):
    code = flowad(args)
    if code != 0:
        sys.exit(code)


def param_bytes(bench_dir):
    for line in (bench_dir / "bench.csv").read_text().splitlines():
        if line.startswith("param_bytes,"):
            return int(line.split(",")[1])
    raise RuntimeError("param_bytes missing from bench.csv")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workdir", required=True)
    opts = ap.parse_args()
    work = Path(opts.workdir)

    table = {}
    for grid in GRIDS:
        data = work / f"data_{grid}"
        run(["synth", "--out", str(data), "--seed", "0", "--n-train", "8",
             "--n-test-good", "1", "--n-test-anom", "1", "--scales", grid,
             "--image-size", "64", "--patch-min", "2", "--patch-max", "4"])
        for kind in ("flow", "mvg"):
            model_dir = work / f"{kind}_{grid}"
            train = ["train", "--data", str(data), "--out", str(model_dir)]
            if kind == "mvg":
                train += ["--model", "mvg"]
            else:
                train += ["--epochs", "1", "--warmup-epochs", "0",
                          "--layers", "2", "--condition-dim", "8",
                          "--image-batch", "4", "--vector-batch", "64"]
            run(train)
            bench = work / f"bench_{kind}_{grid}"
            run(["bench", "--data", str(data),
                 "--checkpoint", str(model_dir / "checkpoint.cfck"),
                 "--out", str(bench), "--iters", "3"])
            table[(kind, grid)] = param_bytes(bench)

    print(f"\n{'grid':<10} {'flow bytes':>12} {'mvg bytes':>12}")
    for grid in GRIDS:
        print(f"{grid:<10} {table[('flow', grid)]:>12} "
              f"{table[('mvg', grid)]:>12}")


if __name__ == "__main__":
    main()
