"""Command-line entry points: train, compress, decompress, eval, bdrate.

Every command exits with a code from a small fixed map so shell scripts
can branch on the failure class:

    0  success
    2  usage or configuration problem (bad flags, unreadable config,
       checkpoint/container mismatch, malformed curve data)
    3  a required input artifact is missing (checkpoint, image, container,
       curve file, stage-1 checkpoint for stage-2 training)
    4  an optional coder backend is unavailable
    5  stored container bytes failed validation

Checkpoint resolution: --checkpoint wins when given; otherwise the
directory named by PLCODEC_CHECKPOINT_DIR is searched for stage2.pt,
then stage1.pt. Commands are deterministic: identical inputs, flags,
and seeds produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .codec import (
    ConfigMismatchError,
    RefineOptions,
    UnknownCoderError,
    compress_with_report,
    decompress,
    get_coder,
    read_plc,
    write_plc,
)
from .data import load_image, save_image
from .losses import RateTargetConfig
from .metrics import RdCurve, bd_fit_label, bd_rate, evaluate_dataset, plot_rd_points
from .model import load_checkpoint
from .rangecoder import CorruptPayloadError
from .rans_backend import BackendUnavailableError, load_rans_backend
from .refinement import RoiConfig, load_roi_mask, write_trace_csv
from .training import load_train_config, train_stage1, train_stage2

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_ARTIFACT = 3
EXIT_BACKEND_UNAVAILABLE = 4
EXIT_CORRUPT = 5

RANS_HINT = "hint: build the rANS coder (cd rans-ts && npm install && npm run build) or point PLCODEC_RANS_CLI at it; --coder ref always works"


class UsageError(ValueError):
    """Bad flag combination or unresolvable configuration."""


def _resolve_checkpoint(arg: str | None) -> Path:
    if arg:
        p = Path(arg)
        if not p.exists():
            raise FileNotFoundError(f"checkpoint not found: {p}")
        return p
    env = os.environ.get("PLCODEC_CHECKPOINT_DIR")
    if not env:
        raise UsageError("no checkpoint given: pass --checkpoint or set PLCODEC_CHECKPOINT_DIR")
    for name in ("stage2.pt", "stage1.pt"):
        cand = Path(env) / name
        if cand.exists():
            return cand
    raise FileNotFoundError(f"no stage2.pt or stage1.pt under PLCODEC_CHECKPOINT_DIR={env}")


def _load_model(arg: str | None):
    model, _ = load_checkpoint(_resolve_checkpoint(arg))
    model.eval()
    return model


def _pick_coder(name: str):
    """Map the --coder flag to a backend instance (None = in-process default)."""
    if name == "ref":
        return None
    return load_rans_backend()


def cmd_train(args) -> int:
    config_path = Path(args.config)
    if not config_path.exists():
        raise UsageError(f"config file not found: {config_path}")
    config = load_train_config(config_path)
    stage1_ckpt = Path(config.out_dir) / "stage1.pt"
    if args.stage in ("1", "both"):
        result = train_stage1(config)
        stage1_ckpt = result.checkpoint_path
        status = " (halted: loss diverged)" if result.halted else ""
        print(f"stage1 checkpoint: {result.checkpoint_path}{status}")
        print(f"stage1 log: {result.log_path}")
    if args.stage in ("2", "both"):
        result = train_stage2(config, stage1_ckpt)
        status = " (halted: loss diverged)" if result.halted else ""
        print(f"stage2 checkpoint: {result.checkpoint_path}{status}")
        print(f"stage2 log: {result.log_path}")
    return EXIT_OK


def cmd_compress(args) -> int:
    if args.roi_mask and not args.refine:
        raise UsageError("--roi-mask only affects refinement: add --refine")
    model = _load_model(args.checkpoint)
    image = load_image(args.input)
    coder = _pick_coder(args.coder)

    refine = None
    if args.refine:
        roi = None
        if args.roi_mask:
            factor = model.config.downsample_factor_z
            h, w = image.shape[-2], image.shape[-1]
            padded = (-(-h // factor) * factor, -(-w // factor) * factor)
            mask = load_roi_mask(args.roi_mask, padded)
            roi = RoiConfig(mask=mask, lambda_fg=args.fg_weight, lambda_bg=args.bg_weight)
        refine = RefineOptions(
            rate_target=RateTargetConfig(tau=args.target_bpp),
            steps=args.refine_steps,
            roi=roi,
        )

    obj, report = compress_with_report(image, model, refine=refine, coder=coder)
    out = Path(args.output)
    write_plc(out, obj)
    print(f"bpp: {obj.bpp:.4f}")
    if args.refine:
        trace_path = out.with_suffix(out.suffix + ".trace.csv")
        write_trace_csv(report.trace, trace_path)
        print(f"trace: {trace_path}")
    return EXIT_OK


def cmd_decompress(args) -> int:
    model = _load_model(args.checkpoint)
    obj = read_plc(args.input)
    try:
        get_coder(obj.coder_id)
    except UnknownCoderError:
        load_rans_backend()  # raises BackendUnavailableError when absent
    image = decompress(obj, model)
    save_image(args.output, image)
    print(f"wrote: {args.output}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    out_dir = Path(args.out_dir)
    report = evaluate_dataset(
        args.image_dir,
        model,
        RateTargetConfig(tau=args.target_bpp),
        refine=args.refine,
        out_dir=out_dir,
        refine_steps=args.refine_steps,
        seed=args.seed,
    )
    variant = "refined" if args.refine else "amortized"
    plot_path = out_dir / f"rd_{variant}.png"
    plot_rd_points([report], plot_path)
    print(f"images: {len(report.rows)} (skipped: {len(report.skipped)})")
    for key, value in report.aggregate.items():
        print(f"mean {key}: {value:.6f}")
    print(f"csv: {report.csv_path}")
    print(f"json: {report.json_path}")
    print(f"plot: {plot_path}")
    return EXIT_OK


def cmd_bdrate(args) -> int:
    orient = not args.lower_is_better
    reference = RdCurve.from_csv(args.reference, higher_is_better=orient)
    candidate = RdCurve.from_csv(args.candidate, higher_is_better=orient)
    value = bd_rate(reference, candidate)
    label = bd_fit_label(len(reference.points))
    print(f"BD-rate ({label}): {value:+.2f}%")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plcodec",
        description="Learned image compression with per-image latent refinement.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the two-stage training loop from a config file")
    p_train.add_argument("config", help="JSON training config")
    p_train.add_argument("--stage", choices=("1", "2", "both"), default="both", help="which stage(s) to run")
    p_train.set_defaults(func=cmd_train)

    p_comp = sub.add_parser("compress", help="encode one image to a .plc container")
    p_comp.add_argument("input", help="input image (PNG and friends)")
    p_comp.add_argument("output", help="output .plc path")
    p_comp.add_argument("--checkpoint", help="model checkpoint (default: search PLCODEC_CHECKPOINT_DIR)")
    p_comp.add_argument("--target-bpp", type=float, default=0.15, help="rate target steering refinement")
    p_comp.add_argument("--refine", action="store_true", help="optimize latents per image before coding")
    p_comp.add_argument("--refine-steps", type=int, default=None, help="refinement iteration count")
    p_comp.add_argument("--roi-mask", help="binary mask image marking the region of interest (needs --refine)")
    p_comp.add_argument("--fg-weight", type=float, default=1.0, help="distortion weight inside the mask")
    p_comp.add_argument("--bg-weight", type=float, default=0.0, help="distortion weight outside the mask")
    p_comp.add_argument("--coder", choices=("ref", "rans"), default="ref", help="entropy coder backend")
    p_comp.set_defaults(func=cmd_compress)

    p_dec = sub.add_parser("decompress", help="decode a .plc container to an image")
    p_dec.add_argument("input", help="input .plc path")
    p_dec.add_argument("output", help="output image path")
    p_dec.add_argument("--checkpoint", help="model checkpoint (default: search PLCODEC_CHECKPOINT_DIR)")
    p_dec.set_defaults(func=cmd_decompress)

    p_eval = sub.add_parser("eval", help="compress and score every image in a directory")
    p_eval.add_argument("image_dir", help="directory of test images")
    p_eval.add_argument("--checkpoint", help="model checkpoint (default: search PLCODEC_CHECKPOINT_DIR)")
    p_eval.add_argument("--out-dir", default="eval_out", help="where CSV/JSON/plot artifacts land")
    p_eval.add_argument("--refine", action="store_true", help="refine latents per image")
    p_eval.add_argument("--refine-steps", type=int, default=120, help="refinement iteration count")
    p_eval.add_argument("--target-bpp", type=float, default=0.15, help="rate target steering refinement")
    p_eval.add_argument("--seed", type=int, default=0, help="refinement noise seed")
    p_eval.set_defaults(func=cmd_eval)

    p_bd = sub.add_parser("bdrate", help="average rate difference between two rate-quality curves")
    p_bd.add_argument("reference", help="reference curve CSV (bpp, quality)")
    p_bd.add_argument("candidate", help="candidate curve CSV (bpp, quality)")
    p_bd.add_argument("--lower-is-better", action="store_true", help="quality metric decreases as images improve")
    p_bd.set_defaults(func=cmd_bdrate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (BackendUnavailableError, UnknownCoderError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(RANS_HINT, file=sys.stderr)
        return EXIT_BACKEND_UNAVAILABLE
    except CorruptPayloadError as exc:
        print(f"error: corrupt container: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    except (UsageError, ConfigMismatchError, ValueError, TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
