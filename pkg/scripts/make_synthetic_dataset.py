#!/usr/bin/env python3
"""Generate a directory of seeded synthetic test images.

Usage:
    python scripts/make_synthetic_dataset.py out/images --count 16 --size 128 --seed 0
"""

import argparse

from plcodec.data import make_synthetic_images


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir", help="directory to fill with PNG images")
    parser.add_argument("--count", type=int, default=16)
    parser.add_argument("--size", type=int, default=128, help="square image side in pixels")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    paths = make_synthetic_images(args.out_dir, args.count, (args.size, args.size), seed=args.seed)
    print(f"wrote {len(paths)} images under {args.out_dir}")


if __name__ == "__main__":
    main()
