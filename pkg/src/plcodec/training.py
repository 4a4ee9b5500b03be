"""Two-stage optimization at desk scale.

Stage 1 trains analysis, synthesis, and the entropy stack jointly on the
rate-switched objective with the adversarial weight forced to zero. Stage
2 freezes everything except the synthesis transform, builds the feature
codebook, and alternates discriminator and decoder updates; the frozen
parameters must come out bit-identical.

Both stages log one CSV row per step and halt on a non-finite loss,
keeping the parameters from the last step that still evaluated finite.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adversarial import Discriminator, adversarial_loss, discriminator_loss, fit_codebook, semantic_labels
from .data import extract_patches
from .entropy import NonFiniteError, hyper_rate_quantized, merge_groups, rate_quantized
from .losses import (
    ConvPyramidExtractor,
    DistortionReport,
    DistortionWeights,
    RateTargetConfig,
    ensemble_distortion,
    lambda_select,
    rd_loss,
)
from .model import CodecModel, load_checkpoint, quantize_ste, save_checkpoint, tensors_digest
from .transforms import TransformConfig

STAGE1_LOG_FIELDS = (
    "step",
    "rate_noised_bpp",
    "rate_quantized_bpp",
    "lambda_star",
    "charbonnier",
    "perceptual",
    "style",
    "adversarial",
    "distortion",
    "loss",
)
STAGE2_LOG_FIELDS = (
    "step",
    "disc_loss",
    "rate_quantized_bpp",
    "lambda_star",
    "charbonnier",
    "perceptual",
    "style",
    "adversarial",
    "distortion",
    "loss",
)


@dataclass(frozen=True)
class TrainConfig:
    image_dir: str = ""
    out_dir: str = "runs"
    patch_size: int = 256
    batch_size: int = 8
    patch_count: int = 64
    stage1_steps: int = 500
    stage2_steps: int = 200
    learning_rate: float = 1e-4
    disc_learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    seed: int = 0
    rate_target: RateTargetConfig = field(default_factory=RateTargetConfig)
    weights: DistortionWeights = field(default_factory=DistortionWeights)
    transform: TransformConfig = field(default_factory=TransformConfig)
    num_groups: int = 10
    entropy_hidden: int = 48
    num_codes: int = 64
    log_every: int = 1
    checkpoint_every: int = 250

    def __post_init__(self):
        if self.patch_size % 64:
            raise ValueError("patch_size must be divisible by 64")
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.batch_size < 1 or self.patch_count < 1:
            raise ValueError("batch_size and patch_count must be positive")
        if self.learning_rate <= 0 or self.disc_learning_rate <= 0:
            raise ValueError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def save_train_config(cfg: TrainConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(asdict(cfg), f, indent=2)


def load_train_config(path) -> TrainConfig:
    with open(path) as f:
        raw = json.load(f)
    raw["rate_target"] = RateTargetConfig(**raw.get("rate_target", {}))
    raw["weights"] = DistortionWeights(**raw.get("weights", {}))
    raw["transform"] = TransformConfig(**raw.get("transform", {}))
    return TrainConfig(**raw)


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    steps_run: int
    halted: bool
    final_loss: float


def _write_log(path: Path, fields, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(fields)
        w.writerows(rows)


def _batch(patches: np.ndarray, rng: np.random.Generator, batch_size: int) -> torch.Tensor:
    idx = rng.integers(0, patches.shape[0], size=batch_size)
    return torch.from_numpy(patches[idx])


def _snapshot(module: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _distortion_row(report: DistortionReport) -> list[float]:
    terms = (report.charbonnier, report.perceptual, report.style, report.adversarial, report.total)
    return [float(t.detach()) if isinstance(t, torch.Tensor) else float(t) for t in terms]


def train_stage1(
    config: TrainConfig,
    patches: np.ndarray | None = None,
    resume_from=None,
) -> TrainResult:
    """Joint optimization of all parameter groups, adversarial weight off."""
    if patches is None:
        patches = extract_patches(config.image_dir, config.patch_size, config.patch_count, config.seed)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "stage1.pt"
    log_path = out / "stage1_log.csv"

    start_step = 0
    if resume_from is not None:
        model, payload = load_checkpoint(resume_from)
        start_step = int(payload["step"])
    else:
        model = CodecModel(
            config.transform, num_groups=config.num_groups, entropy_hidden=config.entropy_hidden, seed=config.seed
        )
    extractor = ConvPyramidExtractor(seed=config.seed)
    w = config.weights
    weights = DistortionWeights(alpha=w.alpha, beta=w.beta, gamma=w.gamma, delta=0.0)
    opt = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), weight_decay=config.weight_decay
    )
    noise = torch.Generator().manual_seed(config.seed + 1)
    rng = np.random.default_rng(config.seed + 2)

    rows: list[list] = []
    halted = False
    final_loss = float("nan")
    good = _snapshot(model)
    steps_done = 0
    for i in range(config.stage1_steps):
        step = start_step + i
        x = _batch(patches, rng, config.batch_size)
        try:
            report = model.training_forward(x, noise)
            pixels = x.shape[0] * x.shape[-2] * x.shape[-1]
            rate_bpp = report.rate_noised_bits / pixels
            quant_bpp = report.rate_quantized_bits / pixels
            lam = lambda_select(quant_bpp, config.rate_target)
            distortion = ensemble_distortion(x, report.x_hat, extractor, weights)
            loss = rd_loss(lam, rate_bpp, distortion.total)
            diverged = not torch.isfinite(loss)
        except NonFiniteError:
            diverged = True
        if diverged:
            model.load_state_dict(good)
            halted = True
            break
        final_loss = float(loss.detach())
        good = _snapshot(model)
        opt.zero_grad()
        loss.backward()
        opt.step()
        steps_done = i + 1
        if step % config.log_every == 0:
            rows.append(
                [step, float(rate_bpp.detach()), quant_bpp, lam] + _distortion_row(distortion) + [final_loss]
            )
        if config.checkpoint_every and steps_done % config.checkpoint_every == 0:
            save_checkpoint(ckpt_path, model, step=start_step + steps_done, stage=1)

    save_checkpoint(ckpt_path, model, step=start_step + steps_done, stage=1, extra={"halted": halted})
    _write_log(log_path, STAGE1_LOG_FIELDS, rows)
    return TrainResult(ckpt_path, log_path, steps_run=steps_done, halted=halted, final_loss=final_loss)


def build_codebook(
    patches: np.ndarray, extractor, num_codes: int, seed: int = 0, sample_cap: int = 4096
) -> torch.Tensor:
    """Cluster last-stage features of clean patches into the label codebook."""
    with torch.no_grad():
        feats = extractor(torch.from_numpy(patches))[-1]
    vectors = feats.permute(0, 2, 3, 1).reshape(-1, feats.shape[1])
    if vectors.shape[0] > sample_cap:
        keep = torch.randperm(vectors.shape[0], generator=torch.Generator().manual_seed(seed))[:sample_cap]
        vectors = vectors[keep]
    return fit_codebook(vectors, num_codes=num_codes, seed=seed)


def train_stage2(
    config: TrainConfig,
    stage1_checkpoint,
    patches: np.ndarray | None = None,
) -> TrainResult:
    """Decoder + discriminator fine-tuning against frozen everything else."""
    stage1_checkpoint = Path(stage1_checkpoint)
    if not stage1_checkpoint.exists():
        raise FileNotFoundError(f"stage-1 checkpoint not found: {stage1_checkpoint}")
    if patches is None:
        patches = extract_patches(config.image_dir, config.patch_size, config.patch_count, config.seed)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "stage2.pt"
    log_path = out / "stage2_log.csv"

    model, payload = load_checkpoint(stage1_checkpoint)
    torch.manual_seed(config.seed + 3)
    extractor = ConvPyramidExtractor(seed=config.seed)
    codebook = payload.get("codebook")
    if codebook is None:
        codebook = build_codebook(patches, extractor, config.num_codes, seed=config.seed)
    disc = Discriminator(num_codes=int(codebook.shape[0]))

    frozen_before = tensors_digest(model.encoder_parameters() + model.entropy_parameters())
    model.requires_grad_(False)
    for p in model.decoder_parameters():
        p.requires_grad_(True)
    opt_dec = torch.optim.AdamW(
        model.decoder_parameters(), lr=config.learning_rate, betas=(0.9, 0.999), weight_decay=config.weight_decay
    )
    opt_disc = torch.optim.AdamW(
        disc.parameters(), lr=config.disc_learning_rate, betas=(0.9, 0.999), weight_decay=config.weight_decay
    )
    rng = np.random.default_rng(config.seed + 4)

    rows: list[list] = []
    halted = False
    final_loss = float("nan")
    good_dec = _snapshot(model.synthesis)
    good_disc = _snapshot(disc)
    steps_done = 0
    for step in range(config.stage2_steps):
        x = _batch(patches, rng, config.batch_size)
        try:
            with torch.no_grad():
                y = model.analysis(x)
                z = model.hyper_analysis(y)
                z_hat = quantize_ste(z, torch.zeros_like(z))
                context = model.hyper_synthesis(z_hat)
                decoded, params = model.decode_latents(context, y)
                y_hat = merge_groups(decoded)
                quant_bits, _ = rate_quantized(y, params, model.spec)
                quant_bits += hyper_rate_quantized(z, model.hyper_density)
                labels = semantic_labels(x, extractor, codebook)
            x_hat = model.synthesis(y_hat)

            dloss = discriminator_loss(disc, x, x_hat, labels)
            opt_disc.zero_grad()
            dloss.backward()
            opt_disc.step()

            adv = adversarial_loss(disc, x_hat, labels)
            distortion = ensemble_distortion(x, x_hat, extractor, config.weights, adversarial_term=adv)
            pixels = x.shape[0] * x.shape[-2] * x.shape[-1]
            quant_bpp = quant_bits / pixels
            lam = lambda_select(quant_bpp, config.rate_target)
            loss = rd_loss(lam, quant_bpp, distortion.total)
            diverged = not (torch.isfinite(loss) and torch.isfinite(dloss))
        except NonFiniteError:
            diverged = True
        if diverged:
            model.synthesis.load_state_dict(good_dec)
            disc.load_state_dict(good_disc)
            halted = True
            break
        final_loss = float(loss.detach())
        good_dec = _snapshot(model.synthesis)
        good_disc = _snapshot(disc)
        opt_dec.zero_grad()
        loss.backward()
        opt_dec.step()
        steps_done = step + 1
        if step % config.log_every == 0:
            rows.append([step, float(dloss.detach()), quant_bpp, lam] + _distortion_row(distortion) + [final_loss])

    frozen_after = tensors_digest(model.encoder_parameters() + model.entropy_parameters())
    if frozen_before != frozen_after:
        raise RuntimeError("frozen parameters changed during decoder fine-tuning")
    save_checkpoint(
        ckpt_path,
        model,
        discriminator=disc,
        codebook=codebook,
        step=int(payload["step"]) + steps_done,
        stage=2,
        extra={"halted": halted},
    )
    _write_log(log_path, STAGE2_LOG_FIELDS, rows)
    return TrainResult(ckpt_path, log_path, steps_run=steps_done, halted=halted, final_loss=final_loss)
