"""Threshold-agnostic evaluation: AUROC and AUPRO.

AUROC uses the rank-based (Mann-Whitney) formulation with midrank tie
handling, equal to the trapezoidal area under the ROC curve. AUPRO sweeps
thresholds over the pooled unique scores (coarsened to at most 1000
quantile-spaced levels for large sets), computes the mean per-region
overlap against 8-connected ground-truth regions, and integrates the
left-continuous PRO-vs-FPR curve by trapezoid on [0, fpr_limit].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ValidationError

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via midranks; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise ConfigError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUROC needs both classes present")
    ranks = _midranks(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    pos = np.arange(1, x.size + 1, dtype=np.float64)
    # average positions across each tie group
    boundaries = np.nonzero(np.diff(sx))[0] + 1
    start = 0
    for stop in list(boundaries) + [x.size]:
        ranks[order[start:stop]] = pos[start:stop].mean()
        start = stop
        i += 1
    return ranks


def connected_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected labeling; labels ordered by first raster occurrence."""
    mask = np.asarray(mask) > 0
    labeled, count = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    if count == 0:
        return labeled, 0
    # relabel so label i appears before label i+1 in raster order
    flat = labeled.reshape(-1)
    first = np.full(count + 1, flat.size)
    np.minimum.at(first, flat, np.arange(flat.size))
    order = np.argsort(first[1:], kind="stable")
    remap = np.zeros(count + 1, dtype=labeled.dtype)
    remap[1 + order] = np.arange(1, count + 1)
    return remap[labeled], count


@dataclass
class ProCurve:
    fpr: np.ndarray
    pro: np.ndarray
    aupro: float
    fpr_limit: float


def aupro(score_maps: list[np.ndarray], gt_masks: list[np.ndarray],
          fpr_limit: float = 0.3, max_thresholds: int = 1000) -> float:
    return pro_curve(score_maps, gt_masks, fpr_limit, max_thresholds).aupro


def pro_curve(score_maps: list[np.ndarray], gt_masks: list[np.ndarray],
              fpr_limit: float = 0.3,
              max_thresholds: int = 1000) -> ProCurve:
    if len(score_maps) != len(gt_masks):
        raise ConfigError("score map / mask count mismatch")
    if not 0 < fpr_limit <= 1:
        raise ConfigError("fpr_limit must be in (0, 1]")

    regions = []  # (image index, boolean region mask, region size)
    neg_total = 0
    for i, mask in enumerate(gt_masks):
        mask = np.asarray(mask) > 0
        if mask.shape != np.asarray(score_maps[i]).shape:
            raise ConfigError(f"image {i}: score/mask shape mismatch")
        labeled, count = connected_components(mask)
        for r in range(1, count + 1):
            region = labeled == r
            regions.append((i, region, int(region.sum())))
        neg_total += int((~mask).sum())
    if not regions:
        raise ValidationError("AUPRO needs at least one anomalous region")
    if neg_total == 0:
        raise ValidationError("AUPRO needs anomaly-free pixels")

    pooled = np.concatenate([np.asarray(s).reshape(-1) for s in score_maps])
    thresholds = np.unique(pooled)
    if thresholds.size > max_thresholds:
        qs = np.linspace(0.0, 1.0, max_thresholds)
        thresholds = np.unique(np.quantile(pooled, qs))
    thresholds = thresholds[::-1]  # strictest first

    fprs = [0.0]
    pros = [0.0]
    for th in thresholds:
        fp = 0
        overlaps = []
        for i, (smap, mask) in enumerate(zip(score_maps, gt_masks)):
            pred = np.asarray(smap) >= th
            fp += int((pred & ~(np.asarray(mask) > 0)).sum())
        for i, region, size in regions:
            pred = np.asarray(score_maps[i]) >= th
            overlaps.append((pred & region).sum() / size)
        fprs.append(fp / neg_total)
        pros.append(float(np.mean(overlaps)))

    fpr = np.asarray(fprs)
    pro = np.asarray(pros)
    # dedupe equal FPRs keeping the best PRO (curve is monotone in both)
    keep_fpr, keep_pro = [], []
    for f, p in zip(fpr, pro):
        if keep_fpr and f == keep_fpr[-1]:
            keep_pro[-1] = max(keep_pro[-1], p)
        else:
            keep_fpr.append(f)
            keep_pro.append(p)
    fpr = np.asarray(keep_fpr)
    pro = np.asarray(keep_pro)

    area = _integrate_left_continuous(fpr, pro, fpr_limit)
    return ProCurve(fpr=fpr, pro=pro, aupro=area / fpr_limit,
                    fpr_limit=fpr_limit)


def _integrate_left_continuous(fpr: np.ndarray, pro: np.ndarray,
                               limit: float) -> float:
    """Trapezoid over achieved points within [0, limit]; the cut point at
    the limit extends the curve left-continuously (constant from the last
    achieved point)."""
    inside = fpr <= limit
    xs = list(fpr[inside])
    ys = list(pro[inside])
    if not xs or xs[0] > 0.0:
        xs.insert(0, 0.0)
        ys.insert(0, 0.0)
    if xs[-1] < limit:
        xs.append(limit)
        ys.append(ys[-1])
    return float(np.trapezoid(ys, xs))


@dataclass
class EvalReport:
    detection_auroc: float | None
    localization_auroc: float | None
    aupro: float | None

    def csv_row(self, name: str) -> str:
        def fmt(v):
            return "n/a" if v is None else f"{v:.6f}"
        return (f"{name},{fmt(self.detection_auroc)},"
                f"{fmt(self.localization_auroc)},{fmt(self.aupro)}")


def evaluate(image_scores: np.ndarray, image_labels: np.ndarray,
             score_maps: list[np.ndarray] | None = None,
             gt_masks: list[np.ndarray] | None = None,
             fpr_limit: float = 0.3,
             per_image_auroc: bool = False) -> EvalReport:
    """Detection AUROC always; localization metrics when masks exist.

    Localization AUROC pools all test pixels into one sweep by default;
    per_image_auroc averages one AUROC per anomalous image instead.
    """
    det = auroc(image_scores, image_labels)
    if score_maps is None or gt_masks is None or any(
            m is None for m in gt_masks):
        return EvalReport(detection_auroc=det, localization_auroc=None,
                          aupro=None)
    if per_image_auroc:
        per = [auroc(s.reshape(-1), (m > 0).reshape(-1))
               for s, m in zip(score_maps, gt_masks)
               if (m > 0).any() and not (m > 0).all()]
        loc = float(np.mean(per)) if per else None
    else:
        pooled_scores = np.concatenate([s.reshape(-1) for s in score_maps])
        pooled_labels = np.concatenate([(m > 0).reshape(-1) for m in gt_masks])
        loc = auroc(pooled_scores, pooled_labels)
    pro = aupro(score_maps, gt_masks, fpr_limit)
    return EvalReport(detection_auroc=det, localization_auroc=loc, aupro=pro)


def write_report_csv(path: str | Path, rows: list[tuple[str, EvalReport]],
                     extra_header: str = "") -> None:
    header = "class,detection_auroc,localization_auroc,aupro"
    lines = [header + extra_header]
    lines += [rep.csv_row(name) for name, rep in rows]
    Path(path).write_text("\n".join(lines) + "\n")
