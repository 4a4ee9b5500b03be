#!/usr/bin/env python3
"""Run the two-stage training loop at desk scale on a folder of images.

Writes the resolved config next to the checkpoints so the run is
reproducible with `plcodec train <out_dir>/config.json`.

Usage:
    python scripts/train_toy.py images/ runs/toy --stage1-steps 500 --stage2-steps 200
"""

import argparse
from pathlib import Path

from plcodec.losses import RateTargetConfig
from plcodec.training import TrainConfig, save_train_config, train_stage1, train_stage2
from plcodec.transforms import TransformConfig


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("image_dir")
    parser.add_argument("out_dir")
    parser.add_argument("--patch-size", type=int, default=64)
    parser.add_argument("--batch-size", type=int, default=4)
    parser.add_argument("--patch-count", type=int, default=64)
    parser.add_argument("--stage1-steps", type=int, default=500)
    parser.add_argument("--stage2-steps", type=int, default=200)
    parser.add_argument("--learning-rate", type=float, default=1e-4)
    parser.add_argument("--target-bpp", type=float, default=0.15)
    parser.add_argument("--latent-channels", type=int, default=8)
    parser.add_argument("--hyper-channels", type=int, default=4)
    parser.add_argument("--base-width", type=int, default=16)
    parser.add_argument("--num-groups", type=int, default=2)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    config = TrainConfig(
        image_dir=args.image_dir,
        out_dir=args.out_dir,
        patch_size=args.patch_size,
        batch_size=args.batch_size,
        patch_count=args.patch_count,
        stage1_steps=args.stage1_steps,
        stage2_steps=args.stage2_steps,
        learning_rate=args.learning_rate,
        seed=args.seed,
        rate_target=RateTargetConfig(tau=args.target_bpp),
        transform=TransformConfig(
            latent_channels=args.latent_channels,
            hyper_channels=args.hyper_channels,
            base_width=args.base_width,
        ),
        num_groups=args.num_groups,
        entropy_hidden=16,
        num_codes=16,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_train_config(config, out / "config.json")

    r1 = train_stage1(config)
    print(f"stage 1: {r1.checkpoint_path} (loss {r1.final_loss:.4f}, halted={r1.halted})")
    if args.stage2_steps > 0 and not r1.halted:
        r2 = train_stage2(config, r1.checkpoint_path)
        print(f"stage 2: {r2.checkpoint_path} (loss {r2.final_loss:.4f}, halted={r2.halted})")


if __name__ == "__main__":
    main()
