"""MVTec-style directory tree -> CFPD features + manifest + PGM masks.

Expected layout under the dataset root:

    train/good/*.png
    test/<defect-or-good>/*.png
    ground_truth/<defect>/<stem>_mask.png   (optional)

Images are resized to the configured square resolution without
cropping, pushed through the encoder in eval mode, and the tapped
feature maps are written deepest scale first (smallest grid first), the
ordering the consuming engine expects. Masks are resized with
nearest-neighbor so they stay binary.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import formats
from .encoders import TAP_STRIDES, build_encoder, deepest_stride

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
ROTATION_DEGREES = 5.0


@dataclass
class ExtractConfig:
    encoder: str = "resnet18"
    input_size: int = 256  # square resize target
    layers: tuple[int, ...] = (1, 2, 3)
    rotation_augment: bool = False  # extra +/-5 degree train views
    fallback_seed: int = 0

    def __post_init__(self):
        self.layers = tuple(sorted(self.layers))
        if not self.layers or any(l not in TAP_STRIDES for l in self.layers):
            raise ValueError(
                f"layers must be a subset of {sorted(TAP_STRIDES)}")
        stride = deepest_stride(self.layers)
        if self.input_size % stride != 0 or self.input_size < stride:
            raise ValueError(
                f"input size {self.input_size} not divisible by the "
                f"deepest tap stride {stride}")


@dataclass
class ExtractResult:
    manifest_path: Path
    num_images: int
    masks_available: bool
    encoder_weights: str


def _load_image(path: Path, size: int, rotation: float = 0.0) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    if rotation:
        img = img.rotate(rotation, resample=Image.BILINEAR)
    img = img.resize((size, size), resample=Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def _load_mask(path: Path, size: int) -> np.ndarray:
    img = Image.open(path).convert("L").resize((size, size),
                                               resample=Image.NEAREST)
    return (np.asarray(img) > 0).astype(np.uint8) * 255


def _find_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir()
                  if p.suffix.lower() in IMAGE_SUFFIXES)


def _mask_for(root: Path, defect: str, stem: str) -> Path | None:
    gt = root / "ground_truth" / defect
    for candidate in (gt / f"{stem}_mask.png", gt / f"{stem}.png"):
        if candidate.exists():
            return candidate
    return None


def extract(dataset_root: str | Path, out_dir: str | Path,
            config: ExtractConfig) -> ExtractResult:
    root = Path(dataset_root)
    out = Path(out_dir)
    if not (root / "train" / "good").is_dir():
        raise FileNotFoundError(f"{root}: expected train/good directory")
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    encoder = build_encoder(config.encoder, config.layers,
                            config.fallback_seed)

    jobs = []  # (image path, split, label, defect, image_id, rotation)
    for img_path in _find_images(root / "train" / "good"):
        stem = img_path.stem
        jobs.append((img_path, "train", "good", "good",
                     f"train_good_{stem}", 0.0))
        if config.rotation_augment:
            for sign, tag in ((-1, "m"), (1, "p")):
                jobs.append((img_path, "train", "good", "good",
                             f"train_good_{stem}_rot{tag}5",
                             sign * ROTATION_DEGREES))
    test_dir = root / "test"
    defects = sorted(d.name for d in test_dir.iterdir()
                     if d.is_dir()) if test_dir.is_dir() else []
    for defect in defects:
        label = "good" if defect == "good" else "anomalous"
        for img_path in _find_images(test_dir / defect):
            jobs.append((img_path, "test", label, defect,
                         f"test_{defect}_{img_path.stem}", 0.0))

    if not jobs:
        raise FileNotFoundError(f"{root}: no images found")

    # masks_available only if every anomalous test image has one
    masks_available = all(
        _mask_for(root, defect, path.stem) is not None
        for path, split, label, defect, _, _ in jobs
        if split == "test" and label == "anomalous")

    entries = []
    for img_path, split, label, defect, image_id, rotation in jobs:
        pixels = _load_image(img_path, config.input_size, rotation)
        maps = encoder.feature_maps(pixels[None])
        scales = [m[0].astype(np.float32) for m in maps]
        scales.sort(key=lambda m: m.shape[0] * m.shape[1])  # deepest first
        cfpd = out / "features" / f"{image_id}.cfpd"
        formats.write_pyramid(cfpd, image_id, scales)
        formats.verify_roundtrip(cfpd, image_id, scales)

        mask_rel = None
        if masks_available and split == "test" and label == "anomalous":
            mask_src = _mask_for(root, defect, img_path.stem)
            mask_rel = f"masks/{image_id}.pgm"
            formats.write_pgm(out / mask_rel,
                              _load_mask(mask_src, config.input_size))
        entries.append((image_id, split, label, mask_rel))

    manifest_path = out / "manifest.tsv"
    formats.write_manifest(manifest_path,
                           (config.input_size, config.input_size),
                           masks_available, entries)
    return ExtractResult(manifest_path=manifest_path, num_images=len(entries),
                         masks_available=masks_available,
                         encoder_weights=encoder.weights)
