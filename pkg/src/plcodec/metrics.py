"""Evaluation harness: distortion metrics, bpp, and BD-rate deltas.

BD-rate follows the Bjøntegaard construction: fit log-rate as a function
of quality for both curves, average the gap over the shared quality
interval, and map back through exp. Four-point curves get the classic
single cubic least-squares fit; five or more points switch to a monotone
piecewise-cubic Hermite interpolant. Metrics where lower is better are
negated onto a higher-is-better axis before fitting.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.interpolate import PchipInterpolator

from .codec import CompressedObject, RefineOptions, compress_with_report, unpack_latents
from .data import list_images, load_image
from .losses import (
    ConvPyramidExtractor,
    DistortionWeights,
    FeatureExtractor,
    RateTargetConfig,
    charbonnier,
    lambda_select,
    perceptual_loss,
    rd_loss,
)
from .model import CodecModel
from .refinement import AnnealSchedule, _masked_distortion
from .transforms import crop_to_size, pad_to_multiple

PSNR_CAP_DB = 100.0
_MSE_FLOOR = 1e-10


def psnr(x, x_hat) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images, capped at 100."""
    a = x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
    b = x_hat.detach().cpu().numpy() if isinstance(x_hat, torch.Tensor) else np.asarray(x_hat)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse < _MSE_FLOOR:
        return PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / mse)


def bpp(obj: CompressedObject) -> float:
    return obj.bpp


# ---------------------------------------------------------------------------
# rate-distortion curves and BD-rate


@dataclass(frozen=True)
class RdCurve:
    """A swept codec operating line: (bpp, quality) samples."""

    points: tuple[tuple[float, float], ...]
    metric_name: str = "quality"
    higher_is_better: bool = True

    def __post_init__(self):
        if len(self.points) < 1:
            raise ValueError("curve needs at least one point")
        pts = tuple((float(r), float(q)) for r, q in self.points)
        rates = sorted(r for r, _ in pts)
        if any(r <= 0 or not math.isfinite(r) for r in rates):
            raise ValueError("bpp values must be positive and finite")
        if any(not math.isfinite(q) for _, q in pts):
            raise ValueError("quality values must be finite")
        if any(b - a <= 0 for a, b in zip(rates, rates[1:])):
            raise ValueError("bpp values must be distinct")
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_csv(cls, path, metric_name: str = "quality", higher_is_better: bool = True) -> "RdCurve":
        pts = []
        with open(path, newline="") as f:
            for row in csv.reader(f):
                if not row or row[0].strip().startswith("#"):
                    continue
                try:
                    pts.append((float(row[0]), float(row[1])))
                except ValueError:
                    continue  # header line
        return cls(tuple(pts), metric_name=metric_name, higher_is_better=higher_is_better)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bpp", self.metric_name])
            w.writerows(self.points)


def bd_fit_label(num_points: int) -> str:
    return "cubic-polynomial" if num_points == 4 else "piecewise-cubic-hermite"


def _log_rate_integral(curve: RdCurve, lo: float, hi: float) -> float:
    q = np.array([p[1] for p in curve.points], dtype=np.float64)
    if not curve.higher_is_better:
        q = -q
    lr = np.log([p[0] for p in curve.points])
    order = np.argsort(q)
    q, lr = q[order], lr[order]
    if np.any(np.diff(q) <= 0):
        raise ValueError("quality values must be distinct for BD fitting")
    if len(q) == 4:
        anti = np.polyint(np.polyfit(q, lr, 3))
        return float(np.polyval(anti, hi) - np.polyval(anti, lo))
    return float(PchipInterpolator(q, lr).integrate(lo, hi))


def _quality_span(curve: RdCurve) -> tuple[float, float]:
    sign = 1.0 if curve.higher_is_better else -1.0
    vals = [sign * p[1] for p in curve.points]
    return min(vals), max(vals)


def bd_rate(reference: RdCurve, candidate: RdCurve) -> float:
    """Average rate change of candidate vs reference in percent; negative
    means the candidate spends fewer bits at matched quality."""
    if reference.higher_is_better != candidate.higher_is_better:
        raise ValueError("curves disagree on metric orientation")
    if len(reference.points) < 4 or len(candidate.points) < 4:
        raise ValueError("BD-rate needs at least 4 points per curve")
    lo = max(_quality_span(reference)[0], _quality_span(candidate)[0])
    hi = min(_quality_span(reference)[1], _quality_span(candidate)[1])
    if not hi > lo:
        raise ValueError("curves have no overlapping quality range")
    avg = (_log_rate_integral(candidate, lo, hi) - _log_rate_integral(reference, lo, hi)) / (hi - lo)
    return (math.exp(avg) - 1.0) * 100.0


# ---------------------------------------------------------------------------
# dataset evaluation


@dataclass
class ImageResult:
    name: str
    bpp: float
    psnr_db: float
    charbonnier: float
    perceptual: float
    rd_objective: float
    lambda_star: float

    _FIELDS = ("name", "bpp", "psnr_db", "charbonnier", "perceptual", "rd_objective", "lambda_star")

    def row(self) -> list:
        return [getattr(self, k) for k in self._FIELDS]


@dataclass
class EvalReport:
    rows: list[ImageResult]
    aggregate: dict[str, float]
    skipped: list[str]
    refine: bool
    csv_path: Path | None = None
    json_path: Path | None = None

    def mean_of(self, key: str) -> float:
        return float(np.mean([getattr(r, key) for r in self.rows]))


def _aggregate(rows: list[ImageResult]) -> dict[str, float]:
    keys = ImageResult._FIELDS[1:]
    return {k: float(np.mean([getattr(r, k) for r in rows])) for k in keys}


def evaluate_dataset(
    image_dir,
    model: CodecModel,
    rate_target: RateTargetConfig,
    refine: bool = False,
    out_dir=None,
    weights: DistortionWeights | None = None,
    extractor: FeatureExtractor | None = None,
    refine_steps: int = 120,
    seed: int = 0,
) -> EvalReport:
    """Compress, transport, and score every image in a directory.

    Each image passes through the real container bytes. The rd objective
    is scored exactly the way refinement scores its own progress (padded
    dims, quantized rate, rate-dependent multiplier), so refined and
    unrefined runs are comparable point for point.
    """
    if weights is None:
        weights = DistortionWeights(delta=0.0)
    if extractor is None:
        extractor = ConvPyramidExtractor()
    paths = list_images(image_dir)
    if not paths:
        raise ValueError(f"no images found in {image_dir}")

    rows: list[ImageResult] = []
    skipped: list[str] = []
    for path in paths:
        try:
            img = load_image(path)
        except Exception as exc:
            warnings.warn(f"skipping unreadable image {path.name}: {exc}")
            skipped.append(path.name)
            continue
        opts = None
        if refine:
            opts = RefineOptions(
                rate_target=rate_target,
                weights=weights,
                schedule=AnnealSchedule(total_steps=refine_steps),
                seed=seed,
                extractor=extractor,
            )
        obj, report = compress_with_report(img, model, refine=opts)

        padded, size = pad_to_multiple(img, model.config.downsample_factor_z)
        x_pad = torch.from_numpy(np.ascontiguousarray(padded)).unsqueeze(0)
        with torch.no_grad():
            latents = unpack_latents(obj, model)
            xhat_pad = model.synthesis(latents.y_hat)
            rate_bpp = report.ideal_bits / (padded.shape[-2] * padded.shape[-1])
            lam = lambda_select(rate_bpp, rate_target)
            distortion = _masked_distortion(x_pad, xhat_pad, extractor, weights)
            objective = float(rd_loss(lam, rate_bpp, distortion))
            xhat = crop_to_size(xhat_pad, size).squeeze(0)
            x = torch.from_numpy(img)
            rows.append(
                ImageResult(
                    name=path.name,
                    bpp=obj.bpp,
                    psnr_db=psnr(x, xhat),
                    charbonnier=float(charbonnier(x, xhat)),
                    perceptual=float(perceptual_loss(extractor(x.unsqueeze(0)), extractor(xhat.unsqueeze(0)))),
                    rd_objective=objective,
                    lambda_star=lam,
                )
            )
    if not rows:
        raise ValueError(f"no decodable images in {image_dir}")

    result = EvalReport(rows=rows, aggregate=_aggregate(rows), skipped=skipped, refine=refine)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        suffix = "refined" if refine else "amortized"
        result.csv_path = out / f"eval_{suffix}.csv"
        with open(result.csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(ImageResult._FIELDS)
            for r in rows:
                w.writerow(r.row())
        result.json_path = out / f"eval_{suffix}.json"
        with open(result.json_path, "w") as f:
            json.dump(
                {
                    "aggregate": result.aggregate,
                    "num_images": len(rows),
                    "skipped": skipped,
                    "refine": refine,
                    "seed": seed,
                },
                f,
                indent=2,
            )
    return result


def plot_rd_points(reports: list[EvalReport], path) -> None:
    """Scatter each report's (bpp, PSNR) rows into one figure."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for rep in reports:
        label = "refined" if rep.refine else "amortized"
        ax.scatter([r.bpp for r in rep.rows], [r.psnr_db for r in rep.rows], label=label, s=18)
    ax.set_xlabel("bpp")
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
