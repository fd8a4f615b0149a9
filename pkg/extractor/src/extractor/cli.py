"""flowad-extract: image tree -> feature pyramids."""

from __future__ import annotations

import argparse
import sys

from .encoders import ENCODERS
from .pipeline import ExtractConfig, extract


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="flowad-extract",
        description="Extract CNN feature pyramids from an MVTec-style "
                    "image tree into CFPD files plus manifest")
    p.add_argument("--root", required=True, help="dataset root directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--encoder", choices=ENCODERS, default="resnet18")
    p.add_argument("--size", type=int, default=256,
                   help="square input resolution (e.g. 128/256/512)")
    p.add_argument("--layers", default="1,2,3",
                   help="comma-separated tap layers out of 1,2,3")
    p.add_argument("--augment-rotation", action="store_true",
                   help="add +/-5 degree rotated train views")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for the random-weights fallback")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        layers = tuple(int(x) for x in args.layers.split(","))
        config = ExtractConfig(encoder=args.encoder, input_size=args.size,
                               layers=layers,
                               rotation_augment=args.augment_rotation,
                               fallback_seed=args.seed)
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        result = extract(args.root, args.out, config)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"wrote {result.num_images} pyramids "
          f"(weights: {result.encoder_weights}, "
          f"masks_available: {result.masks_available}) "
          f"-> {result.manifest_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
