"""Per-image latent refinement.

After amortized encoding, the latents (and a per-channel quantization step
for y) are optimized directly against the rate-target objective, with
quantization relaxed to an annealed stochastic rounding so gradients flow.
The returned state is the one whose *hard* quantized evaluation was best,
since that is what actually gets written to the bitstream.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .entropy import (
    gaussian_bin_mass,
    hyper_bits_continuous,
    lower_bound,
    split_groups,
)
from .losses import (
    DistortionWeights,
    FeatureExtractor,
    RateTargetConfig,
    charbonnier_map,
    lambda_select,
    perceptual_loss,
    rd_loss,
    style_loss,
)
from .model import CodecModel, hard_forward

_MASS_FLOOR = 1e-12
_LOG2 = math.log(2.0)


# ---------------------------------------------------------------------------
# stochastic rounding


def sga_round(v: torch.Tensor, temperature: float, generator: torch.Generator) -> torch.Tensor:
    """Annealed stochastic rounding: mix floor and ceil by a Gumbel-softmax
    whose log-weights shrink with distance, sharpening as T drops.

    Differentiable w.r.t. ``v``; output always lies in [floor(v), floor(v)+1],
    and exactly-integer inputs pass through unchanged at any temperature.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    lo = torch.floor(v)
    hi = lo + 1.0
    # the clamp keeps atanh (and its gradient) finite at the endpoints
    dist = torch.stack([v - lo, hi - v]).clamp(0.0, 1.0 - 1e-5)
    logits = -torch.atanh(dist) / temperature
    u = torch.rand(logits.shape, generator=generator, dtype=v.dtype)
    gumbel = -torch.log(-torch.log(u.clamp(1e-20, 1.0 - 1e-7)))
    w = torch.softmax((logits + gumbel) / temperature, dim=0)
    mixed = w[0] * lo + w[1] * hi
    # the clamp dulls the endpoint, so restore integers as exact fixed points
    return torch.where(v == lo, v, mixed)


@dataclass(frozen=True)
class AnnealSchedule:
    """Hold the temperature flat, then decay exponentially so the final step
    lands exactly on the floor."""

    t_max: float = 0.5
    t_min: float = 1e-3
    decay_start_frac: float = 0.2
    total_steps: int = 2000

    def __post_init__(self):
        if not 0 < self.t_min < self.t_max:
            raise ValueError("need 0 < t_min < t_max")
        if not 0 <= self.decay_start_frac < 1:
            raise ValueError("decay_start_frac must be in [0, 1)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")


def anneal_temperature(step: int, schedule: AnnealSchedule) -> float:
    start = int(schedule.decay_start_frac * schedule.total_steps)
    if step <= start:
        return schedule.t_max
    span = max(schedule.total_steps - start, 1)
    rate = math.log(schedule.t_max / schedule.t_min) / span
    return max(schedule.t_min, schedule.t_max * math.exp(-rate * (step - start)))


# ---------------------------------------------------------------------------
# state and ROI


@dataclass
class LatentState:
    """Optimizable per-image state: latents plus the log of the per-channel
    quantization step (kept in log space so the step stays positive)."""

    y: torch.Tensor
    z: torch.Tensor
    log_delta: torch.Tensor
    step: int = 0

    @property
    def delta(self) -> torch.Tensor:
        return self.log_delta.exp()

    def detached(self) -> "LatentState":
        return LatentState(
            y=self.y.detach().clone(),
            z=self.z.detach().clone(),
            log_delta=self.log_delta.detach().clone(),
            step=self.step,
        )


@dataclass
class RoiConfig:
    """Binary foreground mask at padded image resolution plus the weights
    balancing foreground and background distortion."""

    mask: torch.Tensor
    lambda_fg: float = 1.0
    lambda_bg: float = 0.0

    def __post_init__(self):
        m = self.mask
        if m.ndim != 2:
            raise ValueError("mask must be a 2-D array")
        vals = torch.unique(m)
        if not bool(((vals == 0) | (vals == 1)).all()):
            raise ValueError("mask must be binary")
        if self.lambda_fg < 0 or self.lambda_bg < 0:
            raise ValueError("region weights must be non-negative")


def load_roi_mask(path, padded_size: tuple[int, int]) -> torch.Tensor:
    """Read a single-channel 0/255 mask image and nearest-resize it to the
    padded dimensions."""
    from PIL import Image

    h, w = padded_size
    img = Image.open(path).convert("L").resize((w, h), Image.NEAREST)
    arr = np.asarray(img)
    return torch.from_numpy((arr >= 128).astype(np.float32))


def _masked_distortion(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    extractor: FeatureExtractor,
    weights: DistortionWeights,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Adversarial-free distortion; with a mask, pixel terms are weighted
    elementwise and feature terms see masked composites."""
    cmap = charbonnier_map(x, x_hat)
    if mask is None:
        pixel = cmap.mean()
        fa, fb = extractor(x), extractor(x_hat)
    else:
        pixel = (mask * cmap).mean()
        fa, fb = extractor(x * mask), extractor(x_hat * mask)
    return (
        weights.alpha * pixel
        + weights.beta * perceptual_loss(fa, fb)
        + weights.gamma * style_loss(fa, fb)
    )


def roi_distortion(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    extractor: FeatureExtractor,
    weights: DistortionWeights,
    roi: RoiConfig,
) -> torch.Tensor:
    """Foreground/background split of the distortion; an all-ones mask with
    unit foreground weight reproduces the unmasked value bit for bit."""
    if roi.mask.shape != x.shape[-2:]:
        raise ValueError(
            f"mask {tuple(roi.mask.shape)} does not match image {tuple(x.shape[-2:])}"
        )
    m = roi.mask.to(x.dtype)
    total = roi.lambda_fg * _masked_distortion(x, x_hat, extractor, weights, m)
    if roi.lambda_bg > 0:
        total = total + roi.lambda_bg * _masked_distortion(
            x, x_hat, extractor, weights, 1.0 - m
        )
    return total


# ---------------------------------------------------------------------------
# the refinement objective


def _soft_group_bits(
    y_tilde: torch.Tensor, params, spec, delta: torch.Tensor
) -> torch.Tensor:
    bits = y_tilde.new_zeros(())
    for (a, b), g, p in zip(spec.channel_ranges, split_groups(y_tilde, spec), params):
        d = delta[a:b].view(-1, 1, 1)
        mass = gaussian_bin_mass(g - p.mean, p.scale, d)
        bits = bits + (-torch.log(lower_bound(mass, _MASS_FLOOR)) / _LOG2).sum()
    return bits


@dataclass
class HardEvaluation:
    """Deterministic metrics of a state as the bitstream would see it."""

    rate_bpp: float
    distortion: float
    lambda_star: float
    loss: float


@torch.no_grad()
def hard_evaluation(
    x: torch.Tensor,
    state: LatentState,
    model: CodecModel,
    extractor: FeatureExtractor,
    weights: DistortionWeights,
    cfg: RateTargetConfig,
    roi: RoiConfig | None = None,
) -> HardEvaluation:
    delta = state.log_delta.exp()
    hf = hard_forward(model, state.y, state.z, delta)
    num_pixels = x.shape[-1] * x.shape[-2]
    rate_bpp = hf.total_bits / num_pixels
    x_hat = model.synthesis(hf.y_hat)
    if roi is not None:
        d = roi_distortion(x, x_hat, extractor, weights, roi)
    else:
        d = _masked_distortion(x, x_hat, extractor, weights)
    lam = lambda_select(rate_bpp, cfg)
    return HardEvaluation(
        rate_bpp=rate_bpp,
        distortion=float(d),
        lambda_star=lam,
        loss=lam * rate_bpp + float(d),
    )


def _refinement_forward(
    x: torch.Tensor,
    state: LatentState,
    model: CodecModel,
    extractor: FeatureExtractor,
    weights: DistortionWeights,
    cfg: RateTargetConfig,
    temperature: float,
    generator: torch.Generator,
    roi: RoiConfig | None,
    lambda_star: float | None,
) -> tuple[torch.Tensor, torch.Tensor]:
    delta = state.log_delta.exp()
    d = delta.view(-1, 1, 1)
    y_tilde = sga_round(state.y / d, temperature, generator) * d
    z_tilde = sga_round(state.z, temperature, generator)
    context = model.hyper_synthesis(z_tilde)
    params = model.entropy.teacher_forced_params(
        context, split_groups(y_tilde, model.spec)
    )
    bits = _soft_group_bits(y_tilde, params, model.spec, delta)
    bits = bits + hyper_bits_continuous(z_tilde, model.hyper_density)
    num_pixels = x.shape[-1] * x.shape[-2]
    x_hat = model.synthesis(y_tilde)
    if roi is not None:
        distortion = roi_distortion(x, x_hat, extractor, weights, roi)
    else:
        distortion = _masked_distortion(x, x_hat, extractor, weights)
    if lambda_star is None:
        lambda_star = hard_evaluation(
            x, state, model, extractor, weights, cfg, roi
        ).lambda_star
    rate_bpp = bits / num_pixels
    return rd_loss(lambda_star, rate_bpp, distortion), rate_bpp


def refinement_loss(
    x: torch.Tensor,
    state: LatentState,
    model: CodecModel,
    extractor: FeatureExtractor,
    weights: DistortionWeights,
    cfg: RateTargetConfig,
    temperature: float,
    generator: torch.Generator,
    roi: RoiConfig | None = None,
    lambda_star: float | None = None,
) -> torch.Tensor:
    """Stochastically relaxed objective: rate of the annealed-rounded
    latents plus the adversarial-free distortion of their reconstruction.

    The rate weight comes from the hard-quantized rate of the current state
    (computed here when not supplied), so the switch never sees the
    relaxation.
    """
    return _refinement_forward(
        x, state, model, extractor, weights, cfg, temperature, generator, roi, lambda_star
    )[0]


# ---------------------------------------------------------------------------
# the optimization loop


@dataclass
class TraceRow:
    step: int
    temperature: float
    loss: float
    rate_bpp: float
    hard_loss: float
    hard_rate_bpp: float
    best_hard_loss: float


def write_trace_csv(trace: list[TraceRow], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["step", "temperature", "loss", "rate_bpp", "hard_loss", "hard_rate_bpp", "best_hard_loss"]
        )
        for row in trace:
            writer.writerow(
                [row.step, f"{row.temperature:.6g}", f"{row.loss:.8g}", f"{row.rate_bpp:.8g}",
                 f"{row.hard_loss:.8g}", f"{row.hard_rate_bpp:.8g}", f"{row.best_hard_loss:.8g}"]
            )


def refine_latents(
    x: torch.Tensor,
    model: CodecModel,
    extractor: FeatureExtractor,
    cfg: RateTargetConfig,
    weights: DistortionWeights,
    schedule: AnnealSchedule | None = None,
    steps: int | None = None,
    roi: RoiConfig | None = None,
    seed: int = 0,
    learning_rate: float = 5e-3,
) -> tuple[LatentState, list[TraceRow]]:
    """Optimize latents and quantization step for one image.

    Starts from the amortized encoding, runs an adaptive-gradient loop on
    (y, z, log-step) against the annealed objective, and returns the state
    with the lowest hard-quantized loss along with a per-step trace.
    """
    if steps is None:
        steps = schedule.total_steps if schedule is not None else 2000
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if schedule is None:
        # steps=0 still evaluates the amortized starting point once
        schedule = AnnealSchedule(total_steps=max(steps, 1))
    generator = torch.Generator().manual_seed(seed)

    flags = [p.requires_grad for p in model.parameters()]
    model.requires_grad_(False)
    try:
        with torch.no_grad():
            y0 = model.analysis(x)
            z0 = model.hyper_analysis(y0)
        state = LatentState(
            y=y0.clone().requires_grad_(True),
            z=z0.clone().requires_grad_(True),
            log_delta=torch.zeros(model.config.latent_channels, dtype=y0.dtype).requires_grad_(True),
        )
        opt = torch.optim.Adam([state.y, state.z, state.log_delta], lr=learning_rate)

        trace: list[TraceRow] = []
        best: LatentState | None = None
        best_loss = math.inf

        def evaluate(step: int, temperature: float) -> bool:
            nonlocal best, best_loss
            hard = hard_evaluation(x, state, model, extractor, weights, cfg, roi)
            loss, soft_bpp = _refinement_forward(
                x, state, model, extractor, weights, cfg, temperature,
                generator, roi, hard.lambda_star,
            )
            if hard.loss < best_loss:
                best_loss = hard.loss
                best = state.detached()
                best.step = step
            trace.append(
                TraceRow(
                    step=step,
                    temperature=temperature,
                    loss=float(loss.detach()),
                    rate_bpp=float(soft_bpp.detach()) if isinstance(soft_bpp, torch.Tensor) else float(soft_bpp),
                    hard_loss=hard.loss,
                    hard_rate_bpp=hard.rate_bpp,
                    best_hard_loss=best_loss,
                )
            )
            if not torch.isfinite(loss):
                return False
            opt.zero_grad()
            loss.backward()
            opt.step()
            state.step = step + 1
            return True

        for step in range(steps):
            if not evaluate(step, anneal_temperature(step, schedule)):
                break
        # the post-final-step state deserves a look too
        final_hard = hard_evaluation(x, state, model, extractor, weights, cfg, roi)
        if final_hard.loss < best_loss:
            best_loss = final_hard.loss
            best = state.detached()
        trace.append(
            TraceRow(
                step=steps,
                temperature=schedule.t_min,
                loss=final_hard.loss,
                rate_bpp=final_hard.rate_bpp,
                hard_loss=final_hard.loss,
                hard_rate_bpp=final_hard.rate_bpp,
                best_hard_loss=best_loss,
            )
        )
        assert best is not None
        return best, trace
    finally:
        for p, flag in zip(model.parameters(), flags):
            p.requires_grad_(flag)
