#!/usr/bin/env python3
"""Sweep rate targets over a test set and emit rate-quality curves.

For each target the sweep runs refined evaluation and records the mean
(bpp, PSNR) point; the amortized pass contributes a baseline point. The
two CSV curves feed straight into `plcodec bdrate`.

Usage:
    python scripts/rd_sweep.py images/ runs/toy/stage1.pt sweep_out \
        --targets 0.1 0.15 0.25 0.4
"""

import argparse
from pathlib import Path

from plcodec.losses import RateTargetConfig
from plcodec.metrics import RdCurve, evaluate_dataset, plot_rd_points
from plcodec.model import load_checkpoint


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("image_dir")
    parser.add_argument("checkpoint")
    parser.add_argument("out_dir")
    parser.add_argument("--targets", type=float, nargs="+", default=[0.1, 0.15, 0.25, 0.4])
    parser.add_argument("--refine-steps", type=int, default=120)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    reports = []
    refined_points = []
    for tau in sorted(args.targets):
        report = evaluate_dataset(
            args.image_dir,
            model,
            RateTargetConfig(tau=tau),
            refine=True,
            out_dir=out / f"tau_{tau:g}",
            refine_steps=args.refine_steps,
            seed=args.seed,
        )
        point = (report.aggregate["bpp"], report.aggregate["psnr_db"])
        refined_points.append(point)
        reports.append(report)
        print(f"tau={tau:g}: bpp {point[0]:.4f}, psnr {point[1]:.2f} dB")

    amortized = evaluate_dataset(
        args.image_dir, model, RateTargetConfig(tau=min(args.targets)), refine=False,
        out_dir=out / "amortized", seed=args.seed,
    )
    print(
        f"amortized: bpp {amortized.aggregate['bpp']:.4f}, "
        f"psnr {amortized.aggregate['psnr_db']:.2f} dB"
    )

    distinct = {round(p[0], 9): p for p in refined_points}
    if len(distinct) >= 2:
        curve = RdCurve(tuple(sorted(distinct.values())), metric_name="psnr")
        curve.to_csv(out / "refined_curve.csv")
        print(f"curve: {out / 'refined_curve.csv'}")
    else:
        print("targets collapsed to one operating point; no curve written")
    plot_rd_points(reports + [amortized], out / "sweep.png")
    print(f"plot: {out / 'sweep.png'}")


if __name__ == "__main__":
    main()
