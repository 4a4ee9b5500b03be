"""Image IO, a deterministic synthetic corpus, and patch extraction.

Images travel as float32 arrays shaped [3, height, width] in [0, 1].
File IO quantizes through 8-bit PNG: save rounds x*255 to the nearest
integer, load divides by 255, so save(load(p)) is byte-stable.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".bmp", ".jpg", ".jpeg", ".webp")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path, image) -> None:
    arr = np.asarray(image, dtype=np.float32)
    if hasattr(image, "detach"):
        arr = image.detach().cpu().numpy()
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError("image must be [3, height, width]")
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8.transpose(1, 2, 0)).save(path)


def list_images(image_dir) -> list[Path]:
    root = Path(image_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"not a directory: {root}")
    return sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# ---------------------------------------------------------------------------
# synthetic corpus: structured content with edges, texture, and smooth ramps
# so toy models have something to learn and refinement has something to gain


def synthetic_image(index: int, size: tuple[int, int] = (128, 128), seed: int = 0) -> np.ndarray:
    h, w = size
    rng = np.random.default_rng(seed * 1000 + index)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")

    base = np.stack(
        [
            0.5 + 0.45 * np.sin(2 * np.pi * (rng.uniform(0.5, 3) * xx + rng.uniform())),
            0.5 + 0.45 * np.cos(2 * np.pi * (rng.uniform(0.5, 3) * yy + rng.uniform())),
            xx * rng.uniform(0.3, 1.0) + yy * rng.uniform(0.0, 0.7),
        ]
    )
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0.1, 0.9, 2)
        r = rng.uniform(0.05, 0.3)
        disk = ((yy - cy) ** 2 + (xx - cx) ** 2) < r * r
        base[rng.integers(0, 3)][disk] = rng.uniform()
    period = int(rng.integers(4, 17))
    checker = ((yy * h // period + xx * w // period) % 2).astype(np.float32)
    base[rng.integers(0, 3)] = 0.7 * base[rng.integers(0, 3)] + 0.3 * checker
    base += rng.normal(0, 0.02, base.shape)
    return np.clip(base, 0.0, 1.0).astype(np.float32)


def make_synthetic_images(out_dir, count: int, size: tuple[int, int] = (128, 128), seed: int = 0) -> list[Path]:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        p = root / f"synthetic_{i:03d}.png"
        save_image(p, synthetic_image(i, size, seed))
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# patch extraction


def extract_patches(
    image_dir,
    patch_size: int,
    count: int,
    seed: int = 0,
    mode: str = "random",
) -> np.ndarray:
    """Cut training patches from every usable image in a directory.

    "random" draws crop positions from a seeded generator; "tile" walks
    disjoint row-major tiles across the images. Images smaller than the
    patch on either side are skipped with a warning. Returns
    [count, 3, patch_size, patch_size] float32.
    """
    if mode not in ("random", "tile"):
        raise ValueError(f"unknown mode {mode!r}")
    if count < 1 or patch_size < 1:
        raise ValueError("count and patch_size must be positive")
    usable = []
    for path in list_images(image_dir):
        try:
            img = load_image(path)
        except Exception as exc:  # unreadable file: report, keep going
            warnings.warn(f"skipping unreadable image {path.name}: {exc}")
            continue
        if img.shape[1] < patch_size or img.shape[2] < patch_size:
            warnings.warn(
                f"skipping {path.name}: {img.shape[2]}x{img.shape[1]} is smaller than the {patch_size} patch"
            )
            continue
        usable.append(img)
    if not usable:
        raise ValueError(f"no usable images of at least {patch_size}px in {image_dir}")

    rng = np.random.default_rng(seed)
    out = np.empty((count, 3, patch_size, patch_size), dtype=np.float32)
    if mode == "tile":
        k = 0
        while k < count:
            for img in usable:
                for top in range(0, img.shape[1] - patch_size + 1, patch_size):
                    for left in range(0, img.shape[2] - patch_size + 1, patch_size):
                        out[k] = img[:, top : top + patch_size, left : left + patch_size]
                        k += 1
                        if k == count:
                            return out
        return out
    for k in range(count):
        img = usable[rng.integers(0, len(usable))]
        top = rng.integers(0, img.shape[1] - patch_size + 1)
        left = rng.integers(0, img.shape[2] - patch_size + 1)
        out[k] = img[:, top : top + patch_size, left : left + patch_size]
    return out
