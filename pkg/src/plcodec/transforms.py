"""Analysis/synthesis transform pairs and the padding that makes arbitrary
image sizes divisible by their total stride.

Activations are GELU throughout so finite-difference gradient checks see a
smooth function everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn


@dataclass(frozen=True)
class TransformConfig:
    """Shared shape parameters for the four transforms."""

    latent_channels: int = 32
    hyper_channels: int = 16
    base_width: int = 64
    downsample_factor_y: int = 16
    downsample_factor_z: int = 64

    def __post_init__(self):
        for name in ("latent_channels", "hyper_channels", "base_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        fy, fz = self.downsample_factor_y, self.downsample_factor_z
        for f in (fy, fz):
            if f < 2 or f & (f - 1):
                raise ValueError("downsample factors must be powers of two")
        if fz % fy or fz == fy:
            raise ValueError("hyper factor must be a larger multiple of the latent factor")

    @property
    def latent_stages(self) -> int:
        return int(math.log2(self.downsample_factor_y))

    @property
    def hyper_stages(self) -> int:
        return int(math.log2(self.downsample_factor_z // self.downsample_factor_y))

    @property
    def context_channels(self) -> int:
        # the hyper synthesis emits two feature maps per latent channel
        return 2 * self.latent_channels


def _down(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size=5, stride=2, padding=2)


def _up(cin: int, cout: int) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(cin, cout, kernel_size=5, stride=2, padding=2, output_padding=1)


class AnalysisTransform(nn.Module):
    """Image [3,H,W] to latent [C_y, H/f_y, W/f_y]."""

    def __init__(self, cfg: TransformConfig):
        super().__init__()
        w = cfg.base_width
        layers: list[nn.Module] = []
        cin = 3
        for i in range(cfg.latent_stages):
            cout = cfg.latent_channels if i == cfg.latent_stages - 1 else w
            layers.append(_down(cin, cout))
            if i < cfg.latent_stages - 1:
                layers.append(nn.GELU())
            cin = cout
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class SynthesisTransform(nn.Module):
    """Latent back to an image, clamped to [0, 1].

    The last bias starts at 0.5 so an untrained decoder sits mid-range where
    the clamp is inactive.
    """

    def __init__(self, cfg: TransformConfig):
        super().__init__()
        w = cfg.base_width
        layers: list[nn.Module] = []
        cin = cfg.latent_channels
        for i in range(cfg.latent_stages):
            cout = 3 if i == cfg.latent_stages - 1 else w
            layers.append(_up(cin, cout))
            if i < cfg.latent_stages - 1:
                layers.append(nn.GELU())
            cin = cout
        with torch.no_grad():
            layers[-1].bias.fill_(0.5)
        self.net = nn.Sequential(*layers)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.net(y).clamp(0.0, 1.0)


class HyperAnalysisTransform(nn.Module):
    """Latent to hyper-latent, a further f_z/f_y downsampling."""

    def __init__(self, cfg: TransformConfig):
        super().__init__()
        w = cfg.base_width
        layers: list[nn.Module] = [nn.Conv2d(cfg.latent_channels, w, 3, padding=1), nn.GELU()]
        cin = w
        for i in range(cfg.hyper_stages):
            cout = cfg.hyper_channels if i == cfg.hyper_stages - 1 else w
            layers.append(_down(cin, cout))
            if i < cfg.hyper_stages - 1:
                layers.append(nn.GELU())
            cin = cout
        self.net = nn.Sequential(*layers)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.net(y)


class HyperSynthesisTransform(nn.Module):
    """Hyper-latent to the context features conditioning every group."""

    def __init__(self, cfg: TransformConfig):
        super().__init__()
        w = cfg.base_width
        layers: list[nn.Module] = []
        cin = cfg.hyper_channels
        for _ in range(cfg.hyper_stages):
            layers.append(_up(cin, w))
            layers.append(nn.GELU())
            cin = w
        layers.append(nn.Conv2d(cin, cfg.context_channels, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


# ---------------------------------------------------------------------------
# padding


def pad_to_multiple(image: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad the trailing two axes up to the next multiple.

    Returns the padded image and the original (height, width) needed to crop
    the reconstruction back.
    """
    h, w = image.shape[-2], image.shape[-1]
    if h < 1 or w < 1:
        raise ValueError("image must be non-empty")
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return image, (h, w)
    pad = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    # reflect needs at least 2 samples along the axis; fall back to edge
    mode = "reflect" if h > 1 and w > 1 else "edge"
    return np.pad(image, pad, mode=mode), (h, w)


def crop_to_size(x: torch.Tensor | np.ndarray, size: tuple[int, int]):
    """Undo ``pad_to_multiple`` on a reconstruction."""
    h, w = size
    return x[..., :h, :w]
