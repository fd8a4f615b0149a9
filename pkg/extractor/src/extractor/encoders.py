"""Torchvision encoders with multi-scale feature taps.

Taps sit at stage outputs (post-activation). For the ResNets these are
the layer1/layer2/layer3 block outputs at strides 4/8/16; for
MobileNetV3-Large the tap points are found dynamically as the last
feature block producing each of those resolutions, since its blocks are
a flat list rather than named stages.

Pretrained ImageNet weights are loaded when the download succeeds.
Without network access the encoder falls back to a deterministic
seeded random initialization; extraction stays reproducible and the
file formats are unaffected, but features carry no semantic content.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torchvision import models

ENCODERS = ("resnet18", "wide_resnet50", "mobilenet_v3_large")
# strides of the canonical taps ("layers 1, 2, 3")
TAP_STRIDES = {1: 4, 2: 8, 3: 16}

_BUILDERS = {
    "resnet18": (models.resnet18, "ResNet18_Weights"),
    "wide_resnet50": (models.wide_resnet50_2, "Wide_ResNet50_2_Weights"),
    "mobilenet_v3_large": (models.mobilenet_v3_large,
                           "MobileNet_V3_Large_Weights"),
}

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass
class Encoder:
    name: str
    weights: str  # "pretrained" or "random(seed=N)"
    model: torch.nn.Module
    taps: list[torch.nn.Module]  # one module per requested layer

    def feature_maps(self, batch: np.ndarray) -> list[np.ndarray]:
        """(N, H, W, 3) float32 in [0, 1] -> per tap (N, H_k, W_k, D_k)."""
        x = (batch - IMAGENET_MEAN) / IMAGENET_STD
        tensor = torch.from_numpy(np.ascontiguousarray(
            x.transpose(0, 3, 1, 2)))
        captured: dict[int, torch.Tensor] = {}
        handles = [
            tap.register_forward_hook(
                lambda module, inp, out, idx=i: captured.__setitem__(idx, out))
            for i, tap in enumerate(self.taps)]
        try:
            with torch.no_grad():
                self.model(tensor)
        finally:
            for h in handles:
                h.remove()
        return [captured[i].numpy().transpose(0, 2, 3, 1)
                for i in range(len(self.taps))]


def build_encoder(name: str, layers: tuple[int, ...] = (1, 2, 3),
                  fallback_seed: int = 0) -> Encoder:
    if name not in _BUILDERS:
        raise ValueError(f"unknown encoder {name!r}; choose from {ENCODERS}")
    if not layers or any(l not in TAP_STRIDES for l in layers):
        raise ValueError(f"layers must be a subset of {sorted(TAP_STRIDES)}")

    builder, weights_attr = _BUILDERS[name]
    weights_enum = getattr(models, weights_attr).IMAGENET1K_V1
    try:
        model = builder(weights=weights_enum)
        weights = "pretrained"
    except Exception as e:  # no network: deterministic random fallback
        warnings.warn(f"pretrained weights unavailable ({e}); "
                      f"using seeded random initialization")
        torch.manual_seed(fallback_seed)
        model = builder(weights=None)
        weights = f"random(seed={fallback_seed})"
    model.eval()

    if name in ("resnet18", "wide_resnet50"):
        stage = {1: model.layer1, 2: model.layer2, 3: model.layer3}
        taps = [stage[l] for l in layers]
    else:
        taps = [_mobilenet_tap(model, TAP_STRIDES[l]) for l in layers]
    return Encoder(name=name, weights=weights, model=model, taps=taps)


def _mobilenet_tap(model: torch.nn.Module, stride: int) -> torch.nn.Module:
    """Last feature block whose output sits at the given stride."""
    probe = torch.zeros(1, 3, 64, 64)
    sizes = []
    x = probe
    with torch.no_grad():
        for block in model.features:
            x = block(x)
            sizes.append(x.shape[-1])
    want = 64 // stride
    matches = [i for i, s in enumerate(sizes) if s == want]
    if not matches:
        raise ValueError(f"no feature block at stride {stride}")
    return model.features[matches[-1]]


def deepest_stride(layers: tuple[int, ...]) -> int:
    return max(TAP_STRIDES[l] for l in layers)
