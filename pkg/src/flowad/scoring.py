"""From per-scale log-likelihoods to the final anomaly map.

Pipeline over an evaluation set: per-scale log-likelihood grids ->
overflow-safe probability conversion with min-max normalization pooled
over the whole set -> align-corners bilinear upsampling to image
resolution -> max-minus-sum aggregation -> optional F1-optimal threshold.

All statistics (the subtracted per-scale max, the min/max normalization
bounds, the aggregation max) are pooled across the entire evaluation set
so scores stay comparable between images.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, ValidationError
from .feature_store import FeaturePyramid
from .flow_core import FlowModel, positional_encoding_grid


@dataclass
class ScaleLikelihoodMap:
    scale: int
    values: np.ndarray  # (H_k, W_k) log-likelihoods


@dataclass
class AnomalyMap:
    scores: np.ndarray                    # (H, W), >= 0, high = anomalous
    per_scale: list[np.ndarray] | None = None
    threshold: float | None = None


def likelihood_maps(model: FlowModel, pyramid: FeaturePyramid,
                    eval_batch: int = 8192) -> list[ScaleLikelihoodMap]:
    """Per-scale log-likelihood grids in raster order.

    Positions are processed in chunks of eval_batch; the flow inference
    matmuls are batch-size invariant, so any chunking yields bit-identical
    maps.
    """
    if pyramid.num_scales != model.num_scales:
        raise ConfigError(
            f"model has {model.num_scales} scales, pyramid has "
            f"{pyramid.num_scales}")
    if eval_batch < 1:
        raise ConfigError("eval_batch must be positive")
    out = []
    for k, feat in enumerate(pyramid.scales):
        dec = model.scale(k)
        h, w, d = feat.shape
        if d != dec.dim:
            raise ConfigError(
                f"scale {k}: decoder dim {dec.dim} != feature depth {d}")
        z = feat.reshape(h * w, d)
        c = positional_encoding_grid(h, w, dec.cond_dim, dec.pe_base)
        vals = np.empty(h * w)
        for start in range(0, h * w, eval_batch):
            stop = min(start + eval_batch, h * w)
            vals[start:stop] = dec.log_likelihood(z[start:stop], c[start:stop])
        out.append(ScaleLikelihoodMap(scale=k, values=vals.reshape(h, w)))
    return out


def normalize_probabilities(maps: list[np.ndarray]) -> list[np.ndarray]:
    """Convert one scale's log-likelihood grids (whole set) to [0, 1].

    exp() after subtracting the pooled max, then min-max over the set.
    A degenerate constant scale maps to 0.5 everywhere with a warning.
    """
    if not maps:
        raise ConfigError("normalize_probabilities needs at least one map")
    for m in maps:
        if not np.all(np.isfinite(m)):
            raise ValidationError("log-likelihood map contains non-finite values")
    top = max(float(m.max()) for m in maps)
    probs = [np.exp(m - top) for m in maps]
    lo = min(float(p.min()) for p in probs)
    hi = max(float(p.max()) for p in probs)
    if hi == lo:
        warnings.warn("constant probability map carries no signal; "
                      "emitting 0.5 everywhere")
        return [np.full_like(p, 0.5) for p in probs]
    return [(p - lo) / (hi - lo) for p in probs]


def upsample_bilinear(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Align-corners bilinear upsampling: corners map exactly to corners."""
    if grid.ndim != 2:
        raise DimensionError(f"expected 2-D grid, got shape {grid.shape}")
    sh, sw = grid.shape
    if height < sh or width < sw:
        raise ConfigError(
            f"target {height}x{width} smaller than source {sh}x{sw}")
    ys = (np.arange(height) * (sh - 1) / (height - 1)) if height > 1 else np.zeros(height)
    xs = (np.arange(width) * (sw - 1) / (width - 1)) if width > 1 else np.zeros(width)
    if sh == 1:
        ys = np.zeros(height)
    if sw == 1:
        xs = np.zeros(width)
    y0 = np.minimum(ys.astype(int), sh - 1)
    x0 = np.minimum(xs.astype(int), sw - 1)
    y1 = np.minimum(y0 + 1, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = grid[np.ix_(y0, x0)]
    b = grid[np.ix_(y0, x1)]
    c = grid[np.ix_(y1, x0)]
    d = grid[np.ix_(y1, x1)]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
            + c * fy * (1 - fx) + d * fy * fx)


def aggregate(per_image_upsampled: list[list[np.ndarray]]) -> list[AnomalyMap]:
    """Max-minus-sum over the evaluation set.

    Input: per image, the K upsampled probability grids. The aggregation
    max is taken over every pixel of every image, so S >= 0 with equality
    exactly at the set-level arg-max of the summed probabilities.
    """
    if not per_image_upsampled:
        raise ConfigError("aggregate needs at least one image")
    sums = []
    shape = None
    for k_maps in per_image_upsampled:
        if not k_maps:
            raise ConfigError("image has no probability maps")
        for m in k_maps:
            if shape is None:
                shape = m.shape
            elif m.shape != shape:
                raise DimensionError(
                    f"probability grid shape {m.shape} != {shape}")
        sums.append(np.sum(k_maps, axis=0))
    top = max(float(s.max()) for s in sums)
    return [AnomalyMap(scores=top - s, per_scale=list(k_maps))
            for s, k_maps in zip(sums, per_image_upsampled)]


def f1_threshold(scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Best F1 over thresholds at unique score values (score >= tau positive).

    Ties in F1 break toward the smaller threshold.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise DimensionError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ValidationError("F1 threshold needs both classes present")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    tp_cum = np.cumsum(labels[order])
    ranks = np.arange(1, scores.size + 1)
    # candidate thresholds: last occurrence of each distinct score value
    last = np.nonzero(np.diff(sorted_scores, append=-np.inf))[0]
    tp = tp_cum[last].astype(np.float64)
    predicted = ranks[last].astype(np.float64)
    f1 = 2.0 * tp / (predicted + n_pos)
    best = np.argmax(f1)
    # argmax returns the first (largest-threshold) maximizer; prefer the
    # smallest threshold among ties
    ties = np.nonzero(f1 == f1[best])[0]
    best = ties[-1]
    return float(sorted_scores[last[best]]), float(f1[best])


def image_score(anomaly: AnomalyMap | np.ndarray, mode: str = "max",
                top_quantile: float = 0.01) -> float:
    """Reduce a score map to one scalar (max, or mean of the top quantile)."""
    scores = anomaly.scores if isinstance(anomaly, AnomalyMap) else anomaly
    if scores.size == 0:
        raise ConfigError("empty anomaly map")
    if mode == "max":
        return float(scores.max())
    if mode == "topq":
        k = max(1, int(round(scores.size * top_quantile)))
        flat = np.sort(scores.reshape(-1))[::-1]
        return float(flat[:k].mean())
    raise ConfigError(f"unknown image score mode {mode!r}")


def score_histogram_csv(path, anomaly_maps: list[AnomalyMap],
                        masks: list[np.ndarray | None]) -> None:
    """Two-column CSV of pixel scores split by ground-truth label."""
    lines = ["score,label"]
    for amap, mask in zip(anomaly_maps, masks):
        flat = amap.scores.reshape(-1)
        if mask is None:
            lab = np.zeros(flat.size, dtype=int)
        else:
            lab = (mask.reshape(-1) > 0).astype(int)
        lines += [f"{s:.8g},{l}" for s, l in zip(flat, lab)]
    from pathlib import Path
    Path(path).write_text("\n".join(lines) + "\n")
