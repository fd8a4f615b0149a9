#!/usr/bin/env python3
"""Regenerate the golden CFPD files under tests/golden/.

The three inputs are computed gradient/checker patterns (no image files
needed) pushed through the seeded random-weight ResNet-18 at 64 px.
Anyone re-running this script on the same torch/torchvision versions
reproduces the files bit-exactly; the SHA256SUMS file pins them.
"""

import hashlib
import warnings
from pathlib import Path

import numpy as np

from extractor.encoders import build_encoder
from extractor.formats import verify_roundtrip, write_pyramid

GOLDEN_DIR = Path(__file__).resolve().parent.parent / "tests" / "golden"


def golden_inputs():
    yx = np.mgrid[0:64, 0:64].astype(np.float32) / 63.0
    ramp = np.stack([yx[0], yx[1], (yx[0] + yx[1]) / 2], axis=-1)
    checker = np.stack([((np.indices((64, 64)).sum(axis=0) // 8) % 2)
                        .astype(np.float32)] * 3, axis=-1)
    rings = np.stack([np.sin(12.0 * np.hypot(yx[0] - 0.5, yx[1] - 0.5))
                      .astype(np.float32) * 0.5 + 0.5] * 3, axis=-1)
    return {"golden_ramp": ramp, "golden_checker": checker,
            "golden_rings": rings}


def main():
    GOLDEN_DIR.mkdir(parents=True, exist_ok=True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        encoder = build_encoder("resnet18", (1, 2, 3), fallback_seed=0)
    sums = []
    for name, pixels in golden_inputs().items():
        maps = encoder.feature_maps(pixels[None])
        scales = [m[0].astype(np.float32) for m in maps]
        scales.sort(key=lambda m: m.shape[0] * m.shape[1])
        path = GOLDEN_DIR / f"{name}.cfpd"
        write_pyramid(path, name, scales)
        verify_roundtrip(path, name, scales)
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        sums.append(f"{digest}  {path.name}")
        print(sums[-1])
    (GOLDEN_DIR / "SHA256SUMS").write_text("\n".join(sums) + "\n")


if __name__ == "__main__":
    main()
