"""Full codec model: the four transforms plus both entropy components, with
checkpoint round-tripping and a weight digest that ties bitstreams to the
exact model that produced them.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

import numpy as np

from .entropy import (
    FactorizedDensity,
    GaussianParams,
    GroupSpec,
    GroupedEntropyModel,
    SYMBOL_BOUND,
    dequantize,
    folded_gaussian_bits,
    folded_hyper_bits,
    hyper_rate_noised,
    hyper_rate_quantized,
    merge_groups,
    quantize_hyper_symbols,
    quantize_symbols,
    rate_noised,
    rate_quantized,
    split_groups,
)
from .transforms import (
    AnalysisTransform,
    HyperAnalysisTransform,
    HyperSynthesisTransform,
    SynthesisTransform,
    TransformConfig,
)

CHECKPOINT_FORMAT_VERSION = 1


def quantize_ste(values: torch.Tensor, mean: torch.Tensor) -> torch.Tensor:
    """Mean-centered rounding with a straight-through gradient, clipped to
    the coder's symbol window like the real codec."""
    centered = values - mean
    hard = torch.clamp(torch.round(centered), -SYMBOL_BOUND, SYMBOL_BOUND)
    return mean + centered + (hard - centered).detach()


@dataclass
class ForwardReport:
    """Everything a training step needs from one model pass."""

    x_hat: torch.Tensor
    y: torch.Tensor
    y_hat: torch.Tensor
    z: torch.Tensor
    params: list[GaussianParams]
    rate_noised_bits: torch.Tensor  # differentiable
    rate_quantized_bits: float
    per_group_bits: list[float] = field(default_factory=list)
    hyper_bits: float = 0.0


class CodecModel(nn.Module):
    """Transforms plus entropy model, grouped into the three parameter
    collections the two training stages need."""

    def __init__(
        self,
        config: TransformConfig | None = None,
        num_groups: int = 10,
        entropy_hidden: int = 48,
        seed: int = 0,
    ):
        super().__init__()
        self.config = config or TransformConfig()
        self.num_groups = num_groups
        self.entropy_hidden = entropy_hidden
        self.seed = seed
        self.spec = GroupSpec.near_equal(self.config.latent_channels, num_groups)
        torch.manual_seed(seed)
        self.analysis = AnalysisTransform(self.config)
        self.synthesis = SynthesisTransform(self.config)
        self.hyper_analysis = HyperAnalysisTransform(self.config)
        self.hyper_synthesis = HyperSynthesisTransform(self.config)
        self.entropy = GroupedEntropyModel(
            self.spec, self.config.context_channels, hidden=entropy_hidden
        )
        self.hyper_density = FactorizedDensity(self.config.hyper_channels, seed=seed)

    # parameter collections ------------------------------------------------

    def encoder_parameters(self):
        return list(self.analysis.parameters())

    def decoder_parameters(self):
        return list(self.synthesis.parameters())

    def entropy_parameters(self):
        return (
            list(self.hyper_analysis.parameters())
            + list(self.hyper_synthesis.parameters())
            + list(self.entropy.parameters())
            + list(self.hyper_density.parameters())
        )

    # forward passes -------------------------------------------------------

    def context_from_hyper(self, z_hat: torch.Tensor) -> torch.Tensor:
        return self.hyper_synthesis(z_hat)

    def decode_latents(
        self, context: torch.Tensor, y: torch.Tensor
    ) -> tuple[list[torch.Tensor], list[GaussianParams]]:
        """Group-by-group quantization, each group conditioned on the
        already-quantized earlier ones (the decoder sees the same values)."""
        groups = split_groups(y, self.spec)
        decoded: list[torch.Tensor] = []
        params: list[GaussianParams] = []
        for i, g in enumerate(groups):
            p = self.entropy.predict_params(i, context, decoded)
            params.append(p)
            decoded.append(quantize_ste(g, p.mean))
        return decoded, params

    def training_forward(self, x: torch.Tensor, generator: torch.Generator) -> ForwardReport:
        """One differentiable pass: noised rate for the gradient, quantized
        rate for the rate target and the logs."""
        y = self.analysis(x)
        z = self.hyper_analysis(y)
        z_hat = quantize_ste(z, torch.zeros_like(z))
        context = self.hyper_synthesis(z_hat)
        decoded, params = self.decode_latents(context, y)
        y_hat = merge_groups(decoded)
        x_hat = self.synthesis(y_hat)

        noised_y, _ = rate_noised(y, params, self.spec, generator)
        noised = noised_y + hyper_rate_noised(z, self.hyper_density, generator)
        quant_y, per_group = rate_quantized(y, params, self.spec)
        hyper_bits = hyper_rate_quantized(z, self.hyper_density)
        return ForwardReport(
            x_hat=x_hat,
            y=y,
            y_hat=y_hat,
            z=z,
            params=params,
            rate_noised_bits=noised,
            rate_quantized_bits=quant_y + hyper_bits,
            per_group_bits=per_group,
            hyper_bits=hyper_bits,
        )

    # identity -------------------------------------------------------------

    def weight_digest(self) -> int:
        """64-bit digest over the architecture and exact weight bytes; two
        models agree iff they decode bitstreams identically."""
        h = hashlib.sha256()
        h.update(repr(sorted(asdict(self.config).items())).encode())
        h.update(repr((self.num_groups, self.entropy_hidden)).encode())
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(str(tuple(t.shape)).encode())
            h.update(t.detach().cpu().numpy().tobytes())
        return int.from_bytes(h.digest()[:8], "little")


def tensors_digest(tensors) -> str:
    """Order-sensitive byte digest of a tensor collection, for freeze checks."""
    h = hashlib.sha256()
    for t in tensors:
        h.update(str(tuple(t.shape)).encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class HardForward:
    """Deterministic quantized pass shared by the encoder, the decoder's
    expectations, and refinement's progress tracking."""

    y_hat: torch.Tensor
    z_hat: torch.Tensor
    params: list[GaussianParams]
    y_symbols: list[np.ndarray]  # per group, mean-centered steps
    z_symbols: np.ndarray
    per_group_bits: list[float]
    hyper_bits: float

    @property
    def total_bits(self) -> float:
        return sum(self.per_group_bits) + self.hyper_bits


@torch.no_grad()
def hard_forward(
    model: "CodecModel", y: torch.Tensor, z: torch.Tensor, delta: torch.Tensor | None = None
) -> HardForward:
    """Quantize latents exactly as the bitstream does: hyper-latents first,
    then each group against parameters predicted from what is already
    decoded. ``delta`` is the per-channel step from refinement (1 if absent).
    """
    z_symbols = quantize_hyper_symbols(z, model.hyper_density)
    z_hat = torch.from_numpy(z_symbols).to(y.dtype)
    context = model.hyper_synthesis(z_hat)
    decoded: list[torch.Tensor] = []
    params: list[GaussianParams] = []
    sym_groups: list[np.ndarray] = []
    group_bits: list[float] = []
    for i, (a, b) in enumerate(model.spec.channel_ranges):
        p = model.entropy.predict_params(i, context, decoded)
        g = y[..., a:b, :, :]
        d = delta[a:b].view(-1, 1, 1) if delta is not None else 1.0
        s = quantize_symbols(g, p.mean, d)
        dd = d.detach().cpu().numpy().astype(np.float64) if isinstance(d, torch.Tensor) else d
        bits = float(
            folded_gaussian_bits(s, p.scale.detach().cpu().numpy().astype(np.float64), dd).sum()
        )
        params.append(p)
        sym_groups.append(s)
        group_bits.append(bits)
        decoded.append(dequantize(s, p.mean, d if isinstance(d, torch.Tensor) else 1.0, y.dtype))
    hyper_bits = float(folded_hyper_bits(z_symbols, model.hyper_density).sum())
    return HardForward(
        y_hat=merge_groups(decoded),
        z_hat=z_hat,
        params=params,
        y_symbols=sym_groups,
        z_symbols=z_symbols,
        per_group_bits=group_bits,
        hyper_bits=hyper_bits,
    )


# checkpointing -------------------------------------------------------------


def save_checkpoint(
    path,
    model: CodecModel,
    discriminator: nn.Module | None = None,
    codebook: torch.Tensor | None = None,
    step: int = 0,
    stage: int = 1,
    extra: dict | None = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "transform_config": asdict(model.config),
        "num_groups": model.num_groups,
        "entropy_hidden": model.entropy_hidden,
        "seed": model.seed,
        "state_dict": model.state_dict(),
        "discriminator": discriminator.state_dict() if discriminator is not None else None,
        "codebook": codebook,
        "step": step,
        "stage": stage,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[CodecModel, dict]:
    """Rebuild the model bit-exactly; the raw payload rides along for
    training resumption."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {version!r}")
    model = CodecModel(
        config=TransformConfig(**payload["transform_config"]),
        num_groups=payload["num_groups"],
        entropy_hidden=payload["entropy_hidden"],
        seed=payload["seed"],
    )
    model.load_state_dict(payload["state_dict"])
    return model, payload
