"""Grouped autoregressive entropy model over latents and a learned factorized
density over hyper-latents.

Two rates coexist: a differentiable rate from uniform-noised latents that
drives training, and the actual rate from quantized latents that drives the
rate-target switch and matches the codelength the entropy coder targets.
Quantized-rate computations run in float64 off the autograd graph and share
their primitives with the CDF-table builder, so the coder's target
codelength and the reported quantized rate are the same numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import ndtr

from .rangecoder import counts_from_pmf

SYMBOL_BOUND = 64  # symbols clipped to +/- this many bins around the center
SCALE_FLOOR = 0.11
_MASS_FLOOR = 1e-12
_LOG2 = math.log(2.0)


class _LowerBound(torch.autograd.Function):
    """Clamp from below but let gradients push values back up."""

    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return torch.clamp_min(x, bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        passthrough = (x >= ctx.bound) | (grad < 0)
        return grad * passthrough, None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBound.apply(x, bound)


# ---------------------------------------------------------------------------
# group bookkeeping


@dataclass(frozen=True)
class GroupSpec:
    """Contiguous channel ranges partitioning the latent channels."""

    channel_ranges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        ranges = tuple((int(a), int(b)) for a, b in self.channel_ranges)
        if not ranges:
            raise ValueError("need at least one group")
        if ranges[0][0] != 0:
            raise ValueError("first range must start at channel 0")
        for (a, b), (c, _) in zip(ranges, ranges[1:]):
            if b != c:
                raise ValueError("ranges must be contiguous and ordered")
        if any(b <= a for a, b in ranges):
            raise ValueError("empty group range")
        object.__setattr__(self, "channel_ranges", ranges)

    @classmethod
    def near_equal(cls, channels: int, num_groups: int = 10) -> "GroupSpec":
        """Split ``channels`` into contiguous near-equal groups, remainder
        going to the earliest groups."""
        if not 1 <= num_groups <= channels:
            raise ValueError("num_groups must be in [1, channels]")
        base, rem = divmod(channels, num_groups)
        sizes = [base + 1] * rem + [base] * (num_groups - rem)
        edges = np.concatenate([[0], np.cumsum(sizes)])
        return cls(tuple((int(a), int(b)) for a, b in zip(edges, edges[1:])))

    @property
    def num_groups(self) -> int:
        return len(self.channel_ranges)

    @property
    def channels(self) -> int:
        return self.channel_ranges[-1][1]

    def sizes(self) -> list[int]:
        return [b - a for a, b in self.channel_ranges]


def split_groups(y: torch.Tensor, spec: GroupSpec) -> list[torch.Tensor]:
    """Slice the channel axis into the spec's groups; concatenating the
    result restores ``y`` exactly."""
    if y.shape[-3] != spec.channels:
        raise ValueError(
            f"latent has {y.shape[-3]} channels but spec covers {spec.channels}"
        )
    return [y[..., a:b, :, :] for a, b in spec.channel_ranges]


def merge_groups(groups: list[torch.Tensor]) -> torch.Tensor:
    return torch.cat(groups, dim=-3)


# ---------------------------------------------------------------------------
# Gaussian conditionals


class NonFiniteError(ValueError):
    """An activation or parameter blew up to NaN/inf; training treats
    this as divergence rather than a usage error."""


@dataclass
class GaussianParams:
    """Conditional mean/scale for one latent group."""

    mean: torch.Tensor
    scale: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.scale.shape:
            raise ValueError("mean and scale shapes must match")
        with torch.no_grad():
            if not torch.isfinite(self.mean).all() or not torch.isfinite(self.scale).all():
                raise NonFiniteError("non-finite Gaussian parameters")
            if (self.scale <= 0).any():
                raise ValueError("scale must be strictly positive")


def gaussian_bin_mass(
    centered: torch.Tensor, scale: torch.Tensor, delta: torch.Tensor | float = 1.0
) -> torch.Tensor:
    """Mass of a width-``delta`` bin centered ``centered`` away from the mean."""
    half = 0.5 * delta
    upper = torch.special.ndtr((centered + half) / scale)
    lower = torch.special.ndtr((centered - half) / scale)
    return upper - lower


def noisy_gaussian_bits(
    values: torch.Tensor, params: GaussianParams, delta: torch.Tensor | float = 1.0
) -> torch.Tensor:
    """Differentiable codelength of continuous values under the bin-mass
    likelihood; summed over elements."""
    mass = gaussian_bin_mass(values - params.mean, params.scale, delta)
    return (-torch.log(lower_bound(mass, _MASS_FLOOR)) / _LOG2).sum()


def rate_noised(
    y: torch.Tensor,
    params_per_group: list[GaussianParams],
    spec: GroupSpec,
    generator: torch.Generator,
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Rate of ``y`` perturbed by Uniform(-1/2, 1/2) noise, in bits.

    Returns the total and the per-group breakdown; both carry gradients
    w.r.t. ``y`` and the Gaussian parameters.
    """
    groups = split_groups(y, spec)
    if len(groups) != len(params_per_group):
        raise ValueError("one GaussianParams per group required")
    per_group = []
    for g, p in zip(groups, params_per_group):
        noise = torch.rand(g.shape, generator=generator, dtype=g.dtype) - 0.5
        per_group.append(noisy_gaussian_bits(g + noise, p))
    total = torch.stack(per_group).sum() if per_group else y.new_zeros(())
    return total, per_group


def _np64(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().astype(np.float64)


def quantize_symbols(
    y: torch.Tensor, mean: torch.Tensor, delta: torch.Tensor | float = 1.0
) -> np.ndarray:
    """Mean-centered rounding to the step-``delta`` grid, clipped to the
    coder's symbol window."""
    d = _np64(delta) if isinstance(delta, torch.Tensor) else float(delta)
    s = np.rint((_np64(y) - _np64(mean)) / d)
    return np.clip(s, -SYMBOL_BOUND, SYMBOL_BOUND).astype(np.int64)


def folded_gaussian_bits(
    symbols: np.ndarray, scale: np.ndarray, delta: np.ndarray | float = 1.0
) -> np.ndarray:
    """Ideal per-symbol codelength for mean-centered symbols, with the tail
    mass beyond the symbol window folded into the edge bins.

    Exactly the codelength the coder targets when its table is built from
    the same scale and step.
    """
    ratio = np.asarray(delta, dtype=np.float64) / np.asarray(scale, dtype=np.float64)
    ratio = np.broadcast_to(ratio, symbols.shape)
    upper = np.where(
        symbols >= SYMBOL_BOUND, 1.0, ndtr((symbols + 0.5) * ratio)
    )
    lower = np.where(
        symbols <= -SYMBOL_BOUND, 0.0, ndtr((symbols - 0.5) * ratio)
    )
    mass = np.maximum(upper - lower, _MASS_FLOOR)
    return -np.log2(mass)


def rate_quantized(
    y: torch.Tensor,
    params_per_group: list[GaussianParams],
    spec: GroupSpec,
    delta: torch.Tensor | float = 1.0,
) -> tuple[float, list[float]]:
    """Actual rate of the mean-centered-rounded latents, in bits."""
    groups = split_groups(y, spec)
    if len(groups) != len(params_per_group):
        raise ValueError("one GaussianParams per group required")
    per_group = []
    for (a, b), g, p in zip(spec.channel_ranges, groups, params_per_group):
        if isinstance(delta, torch.Tensor):
            d = delta[..., a:b, :, :] if delta.ndim >= 3 else delta[a:b].view(-1, 1, 1)
        else:
            d = delta
        s = quantize_symbols(g, p.mean, d)
        dd = _np64(d) if isinstance(d, torch.Tensor) else d
        per_group.append(float(folded_gaussian_bits(s, _np64(p.scale), dd).sum()))
    return float(sum(per_group)), per_group


def dequantize(
    symbols: np.ndarray,
    mean: torch.Tensor,
    delta: torch.Tensor | float = 1.0,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Reconstruct latent values from mean-centered symbols."""
    d = delta if isinstance(delta, torch.Tensor) else torch.as_tensor(delta)
    s = torch.from_numpy(np.ascontiguousarray(symbols)).to(dtype)
    return s * d.to(dtype) + mean.to(dtype)


def gaussian_cdf_rows(
    scale: np.ndarray, delta: np.ndarray | float = 1.0
) -> np.ndarray:
    """Quantized-CDF rows for mean-centered symbols, one row per element.

    Rows cover symbols ``-SYMBOL_BOUND .. +SYMBOL_BOUND`` (offset is the
    constant ``-SYMBOL_BOUND``); tails are folded into the edge bins so each
    row is a complete distribution.
    """
    scale = np.asarray(scale, dtype=np.float64)
    delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), scale.shape)
    ratio = (delta.reshape(-1) / scale.reshape(-1)).reshape(-1, 1)
    scale = scale.reshape(-1)
    ks = np.arange(-SYMBOL_BOUND, SYMBOL_BOUND) + 0.5
    edges = ndtr(ks * ratio)
    pmf = np.diff(
        np.concatenate(
            [np.zeros((len(scale), 1)), edges, np.ones((len(scale), 1))], axis=1
        ),
        axis=1,
    )
    return counts_from_pmf(pmf)


# ---------------------------------------------------------------------------
# learned factorized density over hyper-latents


def _softplus_inv(x: float) -> float:
    return math.log(math.expm1(x))


class FactorizedDensity(nn.Module):
    """Per-channel monotone CDF built from small positive-weight layers.

    With no interior filters and default init the CDF is exactly the
    standard logistic sigmoid, which anchors the analytic tests; training
    bends it into whatever marginal the hyper-latents need.
    """

    def __init__(
        self,
        channels: int,
        filters: tuple[int, ...] = (3, 3, 3),
        init_scale: float = 10.0,
        seed: int = 0,
    ):
        super().__init__()
        self.channels = channels
        self.filters = tuple(filters)
        widths = (1, *self.filters, 1)
        gen = torch.Generator().manual_seed(seed)
        scale = init_scale ** (1.0 / (len(widths) - 1))
        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._factors = nn.ParameterList()
        for k in range(len(widths) - 1):
            h = torch.full((channels, widths[k + 1], widths[k]), _softplus_inv(1.0 / scale))
            b = (torch.rand((channels, widths[k + 1], 1), generator=gen) - 0.5)
            self._matrices.append(nn.Parameter(h))
            self._biases.append(nn.Parameter(b))
            if k < len(widths) - 2:
                self._factors.append(nn.Parameter(torch.zeros(channels, widths[k + 1], 1)))

    @classmethod
    def logistic(cls, channels: int = 1) -> "FactorizedDensity":
        """A density whose CDF is exactly Logistic(0, 1) per channel."""
        d = cls(channels, filters=(), init_scale=1.0)
        with torch.no_grad():
            d._biases[0].zero_()
        return d

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-sigmoid CDF logits; ``x`` is [C, ...] with per-channel values."""
        shape = x.shape
        v = x.reshape(self.channels, 1, -1)
        n = len(self._matrices)
        for k in range(n):
            w = F.softplus(self._matrices[k]).to(v.dtype)
            v = torch.matmul(w, v) + self._biases[k].to(v.dtype)
            if k < n - 1:
                v = v + torch.tanh(self._factors[k]).to(v.dtype) * torch.tanh(v)
        return v.reshape(shape)

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))

    def bin_mass(self, x: torch.Tensor, half: float = 0.5) -> torch.Tensor:
        return self.cdf(x + half) - self.cdf(x - half)

    @torch.no_grad()
    def medians(self) -> torch.Tensor:
        """Per-channel median of the learned density, by bisection."""
        lo = torch.full((self.channels,), -256.0)
        hi = torch.full((self.channels,), 256.0)
        for _ in range(64):
            mid = 0.5 * (lo + hi)
            neg = self.logits(mid.view(self.channels, 1)).view(-1) < 0
            lo = torch.where(neg, mid, lo)
            hi = torch.where(neg, hi, mid)
        return 0.5 * (lo + hi)


def hyper_rate_noised(
    z: torch.Tensor, density: FactorizedDensity, generator: torch.Generator
) -> torch.Tensor:
    """Differentiable rate of uniform-noised hyper-latents, in bits."""
    if z.numel() == 0:
        return z.new_zeros(())
    noise = torch.rand(z.shape, generator=generator, dtype=z.dtype) - 0.5
    return hyper_bits_continuous(z + noise, density)


def hyper_bits_continuous(z: torch.Tensor, density: FactorizedDensity) -> torch.Tensor:
    if z.numel() == 0:
        return z.new_zeros(())
    flat = z.reshape(z.shape[-3], -1) if z.ndim == 3 else z.movedim(1, 0).reshape(z.shape[1], -1)
    mass = density.bin_mass(flat)
    return (-torch.log(lower_bound(mass, _MASS_FLOOR)) / _LOG2).sum()


def hyper_centers(density: FactorizedDensity) -> np.ndarray:
    """Integer per-channel symbol-window centers (rounded medians)."""
    return np.rint(_np64(density.medians())).astype(np.int64)


def _channel_first(a: np.ndarray) -> np.ndarray:
    """Flatten [C,...] or [B,C,...] to [C, M]."""
    if a.ndim >= 4:
        a = np.moveaxis(a, 1, 0)
    return a.reshape(a.shape[0], -1)


def quantize_hyper_symbols(z: torch.Tensor, density: FactorizedDensity) -> np.ndarray:
    """Round hyper-latents to integers, clipped to the per-channel window."""
    centers = hyper_centers(density)
    zz = np.rint(_np64(z))
    shape = [1] * zz.ndim
    shape[-3] = len(centers)
    c = centers.reshape(shape)
    return np.clip(zz, c - SYMBOL_BOUND, c + SYMBOL_BOUND).astype(np.int64)


def _hyper_edge_cdf(density: FactorizedDensity, points: np.ndarray) -> np.ndarray:
    """Evaluate the learned CDF at float64 grid points, channel-wise.

    ``points`` is [C, M]; the shared primitive for the quantized hyper rate
    and the hyper CDF tables, so both see identical numbers.
    """
    with torch.no_grad():
        x = torch.from_numpy(points.astype(np.float64))
        out = torch.sigmoid(density.logits(x))
    return out.numpy()


def folded_hyper_bits(symbols: np.ndarray, density: FactorizedDensity) -> np.ndarray:
    """Ideal per-symbol codelength for quantized hyper-latents with tails
    folded at the per-channel window edges."""
    centers = hyper_centers(density).reshape(-1, 1)
    flat = _channel_first(symbols).astype(np.float64)
    upper = _hyper_edge_cdf(density, flat + 0.5)
    lower = _hyper_edge_cdf(density, flat - 0.5)
    upper = np.where(flat >= centers + SYMBOL_BOUND, 1.0, upper)
    lower = np.where(flat <= centers - SYMBOL_BOUND, 0.0, lower)
    bits = -np.log2(np.maximum(upper - lower, _MASS_FLOOR))
    if symbols.ndim >= 4:
        moved = bits.reshape((symbols.shape[1], symbols.shape[0]) + symbols.shape[2:])
        return np.moveaxis(moved, 0, 1)
    return bits.reshape(symbols.shape)


def hyper_rate_quantized(z: torch.Tensor, density: FactorizedDensity) -> float:
    if z.numel() == 0:
        return 0.0
    return float(folded_hyper_bits(quantize_hyper_symbols(z, density), density).sum())


def hyper_cdf_rows(density: FactorizedDensity) -> tuple[np.ndarray, np.ndarray]:
    """Quantized-CDF rows per hyper channel plus per-channel offsets."""
    centers = hyper_centers(density)
    ks = centers.reshape(-1, 1) + np.arange(-SYMBOL_BOUND, SYMBOL_BOUND) + 0.5
    edges = _hyper_edge_cdf(density, ks.astype(np.float64))
    c = density.channels
    pmf = np.diff(
        np.concatenate([np.zeros((c, 1)), edges, np.ones((c, 1))], axis=1), axis=1
    )
    rows = counts_from_pmf(pmf)
    offsets = centers - SYMBOL_BOUND
    return rows, offsets


# ---------------------------------------------------------------------------
# grouped autoregressive prediction


class GroupedEntropyModel(nn.Module):
    """Predicts Gaussian conditionals group by group from the hyper context
    and all previously decoded groups."""

    def __init__(
        self,
        spec: GroupSpec,
        context_channels: int,
        hidden: int = 48,
        scale_floor: float = SCALE_FLOOR,
    ):
        super().__init__()
        self.spec = spec
        self.context_channels = context_channels
        self.scale_floor = scale_floor
        self.predictors = nn.ModuleList()
        seen = 0
        for a, b in spec.channel_ranges:
            ch = b - a
            self.predictors.append(
                nn.Sequential(
                    nn.Conv2d(context_channels + seen, hidden, 3, padding=1),
                    nn.GELU(),
                    nn.Conv2d(hidden, hidden, 3, padding=1),
                    nn.GELU(),
                    nn.Conv2d(hidden, 2 * ch, 1),
                )
            )
            seen += ch

    def predict_params(
        self,
        group_index: int,
        context_features: torch.Tensor,
        previously_decoded_groups: list[torch.Tensor],
    ) -> GaussianParams:
        """Gaussian parameters for one group; depends only on the hyper
        context and strictly earlier groups."""
        if not 0 <= group_index < self.spec.num_groups:
            raise ValueError(f"group index {group_index} out of range")
        if len(previously_decoded_groups) != group_index:
            raise ValueError(
                f"group {group_index} needs exactly the {group_index} earlier groups, "
                f"got {len(previously_decoded_groups)}"
            )
        sizes = self.spec.sizes()
        for j, g in enumerate(previously_decoded_groups):
            if g.shape[-3] != sizes[j]:
                raise ValueError(f"prior group {j} has wrong channel count")
        batched = context_features.ndim == 4
        inp = torch.cat([context_features, *previously_decoded_groups], dim=-3)
        if not batched:
            inp = inp.unsqueeze(0)
        raw = self.predictors[group_index](inp)
        if not batched:
            raw = raw.squeeze(0)
        mean, raw_scale = raw.chunk(2, dim=-3)
        scale = self.scale_floor + F.softplus(raw_scale)
        return GaussianParams(mean=mean, scale=scale)

    def teacher_forced_params(
        self,
        context_features: torch.Tensor,
        decoded_groups: list[torch.Tensor],
    ) -> list[GaussianParams]:
        """Parameters for every group, conditioning each on the given
        (already quantized) earlier groups."""
        return [
            self.predict_params(i, context_features, decoded_groups[:i])
            for i in range(self.spec.num_groups)
        ]


@dataclass
class RateReport:
    """Bit accounting for one image: noised rate, quantized rate, and the
    per-group / hyper breakdown of the quantized rate."""

    rate_noised_bits: float
    rate_quantized_bits: float
    per_group_bits: list[float] = field(default_factory=list)
    hyper_bits: float = 0.0

    def __post_init__(self):
        parts = sum(self.per_group_bits) + self.hyper_bits
        if self.rate_quantized_bits < 0 or self.rate_noised_bits < 0:
            raise ValueError("rates must be non-negative")
        if abs(parts - self.rate_quantized_bits) > 1e-6 * max(1.0, self.rate_quantized_bits):
            raise ValueError("per-part bits do not sum to the quantized total")
