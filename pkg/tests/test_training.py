"""Patch extraction and the two-stage protocol: freeze contracts,
divergence halts, config round trips, and log schemas."""

import csv

import numpy as np
import pytest
import torch

from plcodec.data import extract_patches, load_image, make_synthetic_images, save_image
from plcodec.losses import DistortionWeights, RateTargetConfig
from plcodec.model import load_checkpoint, tensors_digest
from plcodec.training import (
    STAGE1_LOG_FIELDS,
    STAGE2_LOG_FIELDS,
    TrainConfig,
    build_codebook,
    load_train_config,
    save_train_config,
    train_stage1,
    train_stage2,
)
from plcodec.transforms import TransformConfig


@pytest.fixture(scope="module")
def image_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("trainimgs")
    make_synthetic_images(root, 3, size=(128, 128), seed=0)
    return root


def toy_config(image_dir, out_dir, **kw) -> TrainConfig:
    base = dict(
        image_dir=str(image_dir),
        out_dir=str(out_dir),
        patch_size=64,
        batch_size=2,
        patch_count=8,
        stage1_steps=6,
        stage2_steps=4,
        learning_rate=1e-4,
        rate_target=RateTargetConfig(tau=0.3, lambda_a=0.05),
        transform=TransformConfig(latent_channels=8, hyper_channels=4, base_width=16),
        num_groups=2,
        entropy_hidden=16,
        num_codes=8,
    )
    base.update(kw)
    return TrainConfig(**base)


# patches ---------------------------------------------------------------------


def test_extract_patches_shapes_and_determinism(image_dir):
    a = extract_patches(image_dir, 64, 6, seed=3)
    b = extract_patches(image_dir, 64, 6, seed=3)
    c = extract_patches(image_dir, 64, 6, seed=4)
    assert a.shape == (6, 3, 64, 64) and a.dtype == np.float32
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.min() >= 0 and a.max() <= 1


def test_extract_patches_tile_mode_disjoint(tmp_path):
    img = np.zeros((3, 128, 128), dtype=np.float32)
    # give every 64px tile a distinct constant so overlap would be visible
    for i, (top, left) in enumerate([(0, 0), (0, 64), (64, 0), (64, 64)]):
        img[:, top : top + 64, left : left + 64] = (i + 1) / 8.0
    save_image(tmp_path / "tiles.png", img)
    patches = extract_patches(tmp_path, 64, 4, mode="tile")
    values = sorted(float(p.mean()) for p in patches)
    assert values == pytest.approx([1 / 8, 2 / 8, 3 / 8, 4 / 8], abs=1e-2)
    for p in patches:
        assert p.std() < 1e-2  # each patch is one flat tile, no straddling


def test_extract_patches_skips_small_images(tmp_path):
    save_image(tmp_path / "small.png", np.zeros((3, 40, 40), dtype=np.float32))
    save_image(tmp_path / "big.png", np.full((3, 80, 80), 0.5, dtype=np.float32))
    with pytest.warns(UserWarning, match="small.png"):
        patches = extract_patches(tmp_path, 64, 3, seed=0)
    assert patches.shape == (3, 3, 64, 64)
    assert np.allclose(patches, 128 / 255)  # 0.5 after the 8-bit PNG round trip


def test_extract_patches_no_usable_images(tmp_path):
    save_image(tmp_path / "small.png", np.zeros((3, 16, 16), dtype=np.float32))
    with pytest.warns(UserWarning):
        with pytest.raises(ValueError):
            extract_patches(tmp_path, 64, 2)
    with pytest.raises(ValueError):
        extract_patches(tmp_path, 64, 2, mode="bogus")


# config ----------------------------------------------------------------------


def test_train_config_validation(image_dir, tmp_path):
    with pytest.raises(ValueError):
        toy_config(image_dir, tmp_path, patch_size=60)
    with pytest.raises(ValueError):
        toy_config(image_dir, tmp_path, stage1_steps=-1)
    with pytest.raises(ValueError):
        toy_config(image_dir, tmp_path, batch_size=0)
    with pytest.raises(ValueError):
        toy_config(image_dir, tmp_path, learning_rate=0.0)


def test_train_config_json_round_trip(image_dir, tmp_path):
    cfg = toy_config(image_dir, tmp_path, weights=DistortionWeights(alpha=5.0, delta=0.004))
    path = tmp_path / "cfg.json"
    save_train_config(cfg, path)
    assert load_train_config(path) == cfg


# stage 1 ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def stage1_run(image_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("stage1")
    cfg = toy_config(image_dir, out)
    return cfg, train_stage1(cfg)


def test_stage1_trains_and_checkpoints(stage1_run):
    cfg, result = stage1_run
    assert result.steps_run == 6 and not result.halted
    assert np.isfinite(result.final_loss)
    model, payload = load_checkpoint(result.checkpoint_path)
    assert payload["stage"] == 1 and payload["step"] == 6


def test_stage1_log_schema_and_adversarial_forced_off(stage1_run):
    _, result = stage1_run
    with open(result.log_path) as f:
        rows = list(csv.DictReader(f))
    assert tuple(rows[0].keys()) == STAGE1_LOG_FIELDS
    assert len(rows) == 6
    assert all(float(r["adversarial"]) == 0.0 for r in rows)
    assert all(np.isfinite(float(r["loss"])) for r in rows)
    assert all(float(r["lambda_star"]) > 0 for r in rows)


def test_stage1_deterministic(image_dir, tmp_path):
    cfg_a = toy_config(image_dir, tmp_path / "a", stage1_steps=3)
    cfg_b = toy_config(image_dir, tmp_path / "b", stage1_steps=3)
    ra, rb = train_stage1(cfg_a), train_stage1(cfg_b)
    ma, _ = load_checkpoint(ra.checkpoint_path)
    mb, _ = load_checkpoint(rb.checkpoint_path)
    assert ma.weight_digest() == mb.weight_digest()
    assert ra.final_loss == rb.final_loss


def test_stage1_resume_continues_step_counter(image_dir, tmp_path):
    cfg = toy_config(image_dir, tmp_path, stage1_steps=3)
    first = train_stage1(cfg)
    second = train_stage1(cfg, resume_from=first.checkpoint_path)
    _, payload = load_checkpoint(second.checkpoint_path)
    assert payload["step"] == 6


def test_stage1_divergence_halts_with_last_good_params(image_dir, tmp_path):
    cfg = toy_config(image_dir, tmp_path, stage1_steps=5)
    clean = extract_patches(cfg.image_dir, cfg.patch_size, cfg.patch_count, cfg.seed)
    poisoned = clean.copy()
    poisoned[:] = np.nan  # first forward is non-finite
    result = train_stage1(cfg, patches=poisoned)
    assert result.halted and result.steps_run == 0
    model, payload = load_checkpoint(result.checkpoint_path)
    assert payload["extra"]["halted"] is True
    for p in model.parameters():
        assert torch.isfinite(p).all()


def test_stage1_zero_steps(image_dir, tmp_path):
    cfg = toy_config(image_dir, tmp_path, stage1_steps=0)
    result = train_stage1(cfg)
    assert result.steps_run == 0 and not result.halted
    _, payload = load_checkpoint(result.checkpoint_path)
    assert payload["step"] == 0


# stage 2 ---------------------------------------------------------------------


def test_stage2_requires_stage1_checkpoint(image_dir, tmp_path):
    cfg = toy_config(image_dir, tmp_path)
    with pytest.raises(FileNotFoundError):
        train_stage2(cfg, tmp_path / "missing.pt")


def test_stage2_freezes_encoder_and_entropy(stage1_run, tmp_path):
    cfg, stage1 = stage1_run
    cfg2 = toy_config(cfg.image_dir, tmp_path)
    result = train_stage2(cfg2, stage1.checkpoint_path)
    assert result.steps_run == 4 and not result.halted

    before, _ = load_checkpoint(stage1.checkpoint_path)
    after, payload = load_checkpoint(result.checkpoint_path)
    frozen_before = tensors_digest(before.encoder_parameters() + before.entropy_parameters())
    frozen_after = tensors_digest(after.encoder_parameters() + after.entropy_parameters())
    assert frozen_before == frozen_after  # bit-identical
    assert tensors_digest(before.decoder_parameters()) != tensors_digest(after.decoder_parameters())
    assert payload["stage"] == 2
    assert payload["discriminator"] is not None
    assert payload["codebook"].shape[0] == cfg2.num_codes
    assert payload["step"] == 6 + 4  # continues the stage-1 counter

    with open(result.log_path) as f:
        rows = list(csv.DictReader(f))
    assert tuple(rows[0].keys()) == STAGE2_LOG_FIELDS
    assert all(float(r["adversarial"]) != 0.0 for r in rows)
    assert all(np.isfinite(float(r["disc_loss"])) for r in rows)


def test_build_codebook_shape_and_determinism(image_dir):
    from plcodec.losses import ConvPyramidExtractor

    patches = extract_patches(image_dir, 64, 4, seed=0)
    ext = ConvPyramidExtractor(widths=(8, 8, 8, 8, 8), seed=0)
    a = build_codebook(patches, ext, num_codes=6, seed=1)
    b = build_codebook(patches, ext, num_codes=6, seed=1)
    assert a.shape == (6, 8)
    assert torch.equal(a, b)
