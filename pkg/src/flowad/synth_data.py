"""Deterministic synthetic feature pyramids with known anomaly masks.

Anomaly-free vectors at grid position (h, w) are drawn from
N(mu(h, w), Sigma0) where mu is a smooth low-frequency sinusoidal field
over the grid (so spatial conditioning carries real signal) and Sigma0 is
one fixed random SPD matrix per scale. Anomalous test images additionally
shift every vector inside a random axis-aligned rectangle by `shift`
along a random unit direction.

The rectangle lives on the finest (largest H x W) scale's grid; a cell of
a coarser scale is anomalous when its center falls inside the rectangle's
normalized extent. The image-resolution mask replicates the finest-grid
rectangle exactly, so its pixel count is the rectangle area times the
upsampling factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .feature_store import (DatasetManifest, FeaturePyramid, ManifestEntry,
                            write_manifest, write_pgm, write_pyramid)


@dataclass
class SynthConfig:
    seed: int = 0
    n_train: int = 32
    n_test_good: int = 8
    n_test_anom: int = 8
    # deepest-first ordering: spatial dims non-decreasing with scale index.
    # Depths stay small: the log-likelihood spread of a D-dim Gaussian
    # grows like sqrt(D), and a large spread saturates the exp() step of
    # the scoring pipeline, washing out pixel-level localization.
    scales: tuple[tuple[int, int, int], ...] = ((8, 8, 8), (16, 16, 4))
    image_size: tuple[int, int] = (64, 64)
    patch_min: int = 4
    patch_max: int = 8
    shift: float = 6.0
    mean_amplitude: float = 1.0
    unit_covariance: bool = False

    def __post_init__(self):
        if self.shift < 0:
            raise ConfigError("anomaly shift must be >= 0")
        if self.n_train < 1:
            raise ConfigError("need at least one train image")
        fh, fw, _ = self.finest
        if not (1 <= self.patch_min <= self.patch_max <= min(fh, fw)):
            raise ConfigError("patch size range must fit the finest grid")
        ih, iw = self.image_size
        if ih % fh != 0 or iw % fw != 0:
            raise ConfigError("image size must be a multiple of the finest grid")

    @property
    def finest(self) -> tuple[int, int, int]:
        return max(self.scales, key=lambda s: s[0] * s[1])

    @property
    def finest_index(self) -> int:
        return self.scales.index(self.finest)


@dataclass
class _ScaleDistribution:
    mean_field: np.ndarray  # (H, W, D)
    chol: np.ndarray        # (D, D) lower factor of Sigma0


def _make_distributions(config: SynthConfig) -> list[_ScaleDistribution]:
    rng = np.random.default_rng([config.seed, 0xD157])
    dists = []
    for h, w, d in config.scales:
        if config.unit_covariance:
            chol = np.eye(d)
        else:
            q, _ = np.linalg.qr(rng.standard_normal((d, d)))
            eig = rng.uniform(0.5, 1.5, size=d)
            chol = np.linalg.cholesky((q * eig) @ q.T)
        fh = rng.integers(1, 3, size=d)
        fw = rng.integers(1, 3, size=d)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=d)
        hh = np.arange(h)[:, None, None] / h
        ww = np.arange(w)[None, :, None] / w
        mean = config.mean_amplitude * np.sin(
            2.0 * np.pi * (fh * hh + fw * ww) + phase)
        dists.append(_ScaleDistribution(mean_field=mean, chol=chol))
    return dists


@dataclass
class SynthImage:
    pyramid: FeaturePyramid
    mask: np.ndarray | None  # image-resolution, None for good images


def _generate_image(config: SynthConfig, dists: list[_ScaleDistribution],
                    image_id: str, index: int, anomalous: bool) -> SynthImage:
    rng = np.random.default_rng([config.seed, index])
    patch = None
    if anomalous:
        fh, fw, _ = config.finest
        ph = int(rng.integers(config.patch_min, config.patch_max + 1))
        pw = int(rng.integers(config.patch_min, config.patch_max + 1))
        h0 = int(rng.integers(0, fh - ph + 1))
        w0 = int(rng.integers(0, fw - pw + 1))
        patch = (h0, w0, ph, pw)

    scales = []
    for k, ((h, w, d), dist) in enumerate(zip(config.scales, dists)):
        noise = rng.standard_normal((h * w, d)) @ dist.chol.T
        feat = dist.mean_field + noise.reshape(h, w, d)
        if patch is not None:
            direction = rng.standard_normal(d)
            direction /= np.linalg.norm(direction)
            fh, fw, _ = config.finest
            h0, w0, ph, pw = patch
            centers_h = (np.arange(h) + 0.5) / h
            centers_w = (np.arange(w) + 0.5) / w
            in_h = (centers_h >= h0 / fh) & (centers_h < (h0 + ph) / fh)
            in_w = (centers_w >= w0 / fw) & (centers_w < (w0 + pw) / fw)
            cell_mask = np.outer(in_h, in_w)
            feat = feat + cell_mask[:, :, None] * (config.shift * direction)
        scales.append(feat.astype(np.float32).astype(np.float64))

    mask = None
    if anomalous:
        fh, fw, _ = config.finest
        h0, w0, ph, pw = patch
        ih, iw = config.image_size
        ry, rx = ih // fh, iw // fw
        mask = np.zeros(config.image_size, dtype=np.int64)
        mask[h0 * ry:(h0 + ph) * ry, w0 * rx:(w0 + pw) * rx] = 255
    return SynthImage(pyramid=FeaturePyramid(image_id=image_id, scales=scales),
                      mask=mask)


def generate(config: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    """Write CFPD features, PGM masks, and the manifest; fully seeded."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    dists = _make_distributions(config)

    entries = []
    index = 0
    plan = ([("train", "good")] * config.n_train
            + [("test", "good")] * config.n_test_good
            + [("test", "anomalous")] * config.n_test_anom)
    for split, label in plan:
        image_id = f"{split}_{label}_{index:04d}"
        img = _generate_image(config, dists, image_id, index,
                              anomalous=(label == "anomalous"))
        write_pyramid(out / "features" / f"{image_id}.cfpd", img.pyramid)
        mask_path = None
        if img.mask is not None:
            mask_path = f"masks/{image_id}.pgm"
            write_pgm(out / mask_path, img.mask, maxval=255)
        entries.append(ManifestEntry(image_id=image_id, split=split,
                                     label=label, mask_path=mask_path))
        index += 1

    manifest = DatasetManifest(name="synthetic", image_size=config.image_size,
                               masks_available=config.n_test_anom > 0,
                               entries=entries)
    write_manifest(out / "manifest.tsv", manifest)
    return manifest


def load_split_pyramids(data_dir: str | Path, manifest: DatasetManifest,
                        split: str) -> list[FeaturePyramid]:
    from .feature_store import read_pyramid
    data_dir = Path(data_dir)
    return [read_pyramid(data_dir / "features" / f"{e.image_id}.cfpd")
            for e in manifest.entries if e.split == split]
