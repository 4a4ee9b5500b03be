"""Distortion ensemble and the rate-target objective.

Distortion mixes a robust pixel term, feature-space differences, patchwise
texture statistics, and (in the second training stage) an adversarial term.
The rate weight switches between two constants depending on whether the
actual quantized rate is still above target; the switch itself carries no
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import torch
import torch.nn as nn
import torch.nn.functional as F

STYLE_PATCH = 16


@dataclass(frozen=True)
class DistortionWeights:
    """Mixing weights for the distortion ensemble."""

    alpha: float = 10.0    # pixel
    beta: float = 1.0      # feature
    gamma: float = 80.0    # texture
    delta: float = 0.008   # adversarial

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.delta) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class RateTargetConfig:
    """Bits-per-pixel target and the two rate weights it switches between."""

    tau: float = 0.15
    lambda_a: float = 2.0
    lambda_b: float | None = None  # defaults to 128x the gentle weight

    def __post_init__(self):
        if self.lambda_b is None:
            object.__setattr__(self, "lambda_b", 128.0 * self.lambda_a)
        if not 0 < self.lambda_a < self.lambda_b:
            raise ValueError("need lambda_b > lambda_a > 0")
        if self.tau <= 0:
            raise ValueError("target rate must be positive")


@dataclass
class DistortionReport:
    total: torch.Tensor
    charbonnier: torch.Tensor
    perceptual: torch.Tensor
    style: torch.Tensor
    adversarial: torch.Tensor


def charbonnier_map(x: torch.Tensor, x_hat: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Elementwise smooth L1-like penalty; callers reduce (and may mask)."""
    return torch.sqrt((x - x_hat) ** 2 + eps * eps)


def charbonnier(x: torch.Tensor, x_hat: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Smooth L1-like pixel loss, mean over all elements."""
    return charbonnier_map(x, x_hat, eps).mean()


class FeatureExtractor(Protocol):
    """Maps an image batch to a list of feature maps, coarsest last."""

    def __call__(self, x: torch.Tensor) -> list[torch.Tensor]: ...


class IdentityExtractor(nn.Module):
    """Single-stage extractor returning the image itself; with it the
    feature loss reduces to plain MSE, which anchors the analytic tests."""

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return [x]


class ConvPyramidExtractor(nn.Module):
    """Frozen random conv pyramid with five stages at strides 1,2,4,8,16.

    Random filters are a serviceable stand-in for a pretrained backbone at
    this scale; the seed pins the features so runs are reproducible.
    """

    def __init__(self, widths: tuple[int, ...] = (16, 32, 48, 64, 80), seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.stages = nn.ModuleList()
        cin = 3
        for i, w in enumerate(widths):
            stride = 1 if i == 0 else 2
            self.stages.append(
                nn.Sequential(nn.Conv2d(cin, w, 3, stride=stride, padding=1), nn.GELU())
            )
            cin = w
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def try_vgg_extractor():
    """Pretrained VGG16 feature pyramid when torchvision and its weights are
    reachable; None otherwise (offline boxes)."""
    try:
        import torchvision.models as tvm

        vgg = tvm.vgg16(weights=tvm.VGG16_Weights.IMAGENET1K_V1).features.eval()
    except Exception:
        return None
    cuts = [4, 9, 16, 23, 30]  # relu1_2 .. relu5_3

    class _Vgg(nn.Module):
        def __init__(self):
            super().__init__()
            self.vgg = vgg
            for p in self.parameters():
                p.requires_grad_(False)

        def forward(self, x):
            feats, last = [], 0
            for cut in cuts:
                for layer in self.vgg[last:cut]:
                    x = layer(x)
                feats.append(x)
                last = cut
            return feats

    return _Vgg()


def perceptual_loss(
    feats_x: list[torch.Tensor], feats_x_hat: list[torch.Tensor]
) -> torch.Tensor:
    """Mean squared feature difference, averaged over stages."""
    if len(feats_x) != len(feats_x_hat) or not feats_x:
        raise ValueError("feature lists must be non-empty and aligned")
    terms = [((a - b) ** 2).mean() for a, b in zip(feats_x, feats_x_hat)]
    return torch.stack(terms).mean()


def _patch_grams(feat: torch.Tensor) -> torch.Tensor:
    """Per-patch Gram matrices [B, P, C, C] on non-overlapping 16x16 tiles.

    Maps smaller than a tile contribute one whole-map patch; ragged edges
    are dropped. Grams are normalized by patch area so tile size cancels.
    """
    b, c, h, w = feat.shape
    k = STYLE_PATCH
    if h < k or w < k:
        patches = feat.reshape(b, c, h * w).unsqueeze(1)  # [B, 1, C, hw]
        area = h * w
    else:
        unfolded = F.unfold(feat, kernel_size=k, stride=k)  # [B, C*k*k, P]
        p = unfolded.shape[-1]
        patches = unfolded.reshape(b, c, k * k, p).permute(0, 3, 1, 2)  # [B,P,C,kk]
        area = k * k
    return torch.matmul(patches, patches.transpose(-1, -2)) / area


def style_loss(
    feats_x: list[torch.Tensor], feats_x_hat: list[torch.Tensor]
) -> torch.Tensor:
    """Squared Frobenius distance between patchwise Gram matrices, summed
    over matrix entries, averaged over patches and stages."""
    if len(feats_x) != len(feats_x_hat) or not feats_x:
        raise ValueError("feature lists must be non-empty and aligned")
    terms = []
    for a, b in zip(feats_x, feats_x_hat):
        ga, gb = _patch_grams(a), _patch_grams(b)
        terms.append(((ga - gb) ** 2).sum(dim=(-1, -2)).mean())
    return torch.stack(terms).mean()


def ensemble_distortion(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    extractor: FeatureExtractor,
    weights: DistortionWeights = DistortionWeights(),
    adversarial_term: torch.Tensor | None = None,
) -> DistortionReport:
    """Weighted distortion ensemble; the adversarial term is only consulted
    when its weight is nonzero."""
    feats_x = extractor(x)
    feats_x_hat = extractor(x_hat)
    charb = charbonnier(x, x_hat)
    per = perceptual_loss(feats_x, feats_x_hat)
    sty = style_loss(feats_x, feats_x_hat)
    if weights.delta > 0:
        if adversarial_term is None:
            raise ValueError("nonzero adversarial weight needs an adversarial term")
        adv = adversarial_term
    else:
        adv = x.new_zeros(())
    total = weights.alpha * charb + weights.beta * per + weights.gamma * sty + weights.delta * adv
    return DistortionReport(
        total=total, charbonnier=charb, perceptual=per, style=sty, adversarial=adv
    )


def lambda_select(rate_quantized_bpp: float, cfg: RateTargetConfig) -> float:
    """Rate weight for this step: the gentle weight once the actual
    (quantized) rate is at or under target, the heavy one while still above.

    Takes the quantized rate, never the noised surrogate, and returns a
    plain float, so no gradient flows through the choice.
    """
    return cfg.lambda_a if rate_quantized_bpp <= cfg.tau else cfg.lambda_b


def rd_loss(
    lambda_star: float, rate_bpp: torch.Tensor, distortion: torch.Tensor
) -> torch.Tensor:
    """Lagrangian: lambda* times bits-per-pixel plus distortion."""
    return lambda_star * rate_bpp + distortion
