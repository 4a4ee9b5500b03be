"""Command-line surface: exit codes, printed contract, byte-level round trips."""

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import settings

import plcodec.codec as codec_mod
from plcodec.cli import build_parser, main
from plcodec.codec import CompressedObject, compress, decompress, pack, read_plc
from plcodec.data import load_image, make_synthetic_images, save_image, synthetic_image
from plcodec.losses import RateTargetConfig
from plcodec.metrics import RdCurve
from plcodec.model import CodecModel, save_checkpoint
from plcodec.training import TrainConfig, save_train_config
from plcodec.transforms import TransformConfig

settings.register_profile("det", derandomize=True, deadline=None, max_examples=25)
settings.load_profile("det")

TINY = TransformConfig(latent_channels=8, hyper_channels=4, base_width=16)


@pytest.fixture(autouse=True)
def _clear_checkpoint_env(monkeypatch):
    monkeypatch.delenv("PLCODEC_CHECKPOINT_DIR", raising=False)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    model = CodecModel(config=TINY, num_groups=2, entropy_hidden=16, seed=11)
    ckpt = root / "model.pt"
    save_checkpoint(ckpt, model, step=0, stage=1)
    other = CodecModel(config=TINY, num_groups=2, entropy_hidden=16, seed=99)
    other_ckpt = root / "other.pt"
    save_checkpoint(other_ckpt, other, step=0, stage=1)
    image_path = root / "input.png"
    save_image(image_path, synthetic_image(0, (48, 48)))
    return {"root": root, "model": model, "ckpt": ckpt, "other_ckpt": other_ckpt, "image": image_path}


def _subparser_help(name: str) -> str:
    parser = build_parser()
    import argparse

    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return sub.choices[name].format_help()


EXPECTED_FLAGS = {
    "train": ["config", "--stage"],
    "compress": [
        "input",
        "output",
        "--checkpoint",
        "--target-bpp",
        "--refine",
        "--refine-steps",
        "--roi-mask",
        "--fg-weight",
        "--bg-weight",
        "--coder",
    ],
    "decompress": ["input", "output", "--checkpoint"],
    "eval": ["image_dir", "--checkpoint", "--out-dir", "--refine", "--refine-steps", "--target-bpp", "--seed"],
    "bdrate": ["reference", "candidate", "--lower-is-better"],
}


def test_help_enumerates_every_flag():
    for command, flags in EXPECTED_FLAGS.items():
        text = _subparser_help(command)
        for flag in flags:
            assert flag in text, f"{command} help is missing {flag}"


def test_top_level_help_lists_commands(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for command in EXPECTED_FLAGS:
        assert command in out


def test_compress_prints_bpp_and_writes_container(workspace, tmp_path, capsys):
    out = tmp_path / "img.plc"
    code = main(["compress", str(workspace["image"]), str(out), "--checkpoint", str(workspace["ckpt"])])
    assert code == 0
    printed = capsys.readouterr().out
    line = next(l for l in printed.splitlines() if l.startswith("bpp: "))
    value = line.split(": ")[1]
    assert len(value.split(".")[1]) == 4  # four decimals
    obj = read_plc(out)
    assert float(value) == pytest.approx(obj.bpp, abs=5e-5)


def test_compress_is_idempotent(workspace, tmp_path):
    args = ["compress", str(workspace["image"]), None, "--checkpoint", str(workspace["ckpt"])]
    outs = []
    for name in ("a.plc", "b.plc"):
        args[2] = str(tmp_path / name)
        assert main(list(args)) == 0
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]


def test_cli_round_trip_matches_in_process(workspace, tmp_path, capsys):
    plc = tmp_path / "rt.plc"
    png = tmp_path / "rt.png"
    assert main(["compress", str(workspace["image"]), str(plc), "--checkpoint", str(workspace["ckpt"])]) == 0
    assert main(["decompress", str(plc), str(png), "--checkpoint", str(workspace["ckpt"])]) == 0
    capsys.readouterr()

    image = load_image(workspace["image"])
    obj = compress(image, workspace["model"])
    direct = decompress(obj, workspace["model"])
    direct_png = tmp_path / "direct.png"
    save_image(direct_png, direct)
    assert png.read_bytes() == direct_png.read_bytes()


def test_refine_prints_trace_path(workspace, tmp_path, capsys):
    out = tmp_path / "refined.plc"
    code = main(
        [
            "compress",
            str(workspace["image"]),
            str(out),
            "--checkpoint",
            str(workspace["ckpt"]),
            "--refine",
            "--refine-steps",
            "4",
            "--target-bpp",
            "0.2",
        ]
    )
    assert code == 0
    printed = capsys.readouterr().out
    trace_line = next(l for l in printed.splitlines() if l.startswith("trace: "))
    trace_path = Path(trace_line.split(": ", 1)[1])
    assert trace_path.exists()
    header = trace_path.read_text().splitlines()[0]
    assert "loss" in header and "rate_bpp" in header
    assert read_plc(out).step_table is not None


def test_roi_mask_requires_refine(workspace, tmp_path, capsys):
    mask = tmp_path / "mask.png"
    save_image(mask, np.ones((3, 48, 48), dtype=np.float32))
    code = main(
        [
            "compress",
            str(workspace["image"]),
            str(tmp_path / "o.plc"),
            "--checkpoint",
            str(workspace["ckpt"]),
            "--roi-mask",
            str(mask),
        ]
    )
    assert code == 2
    assert "--refine" in capsys.readouterr().err


def test_roi_mask_with_refine_runs(workspace, tmp_path):
    mask = tmp_path / "mask.png"
    arr = np.zeros((3, 48, 48), dtype=np.float32)
    arr[:, :24, :] = 1.0
    save_image(mask, arr)
    out = tmp_path / "roi.plc"
    code = main(
        [
            "compress",
            str(workspace["image"]),
            str(out),
            "--checkpoint",
            str(workspace["ckpt"]),
            "--refine",
            "--refine-steps",
            "3",
            "--roi-mask",
            str(mask),
            "--fg-weight",
            "1.0",
            "--bg-weight",
            "0.2",
        ]
    )
    assert code == 0 and out.exists()


def test_missing_checkpoint_exits_3(workspace, tmp_path, capsys):
    code = main(
        ["compress", str(workspace["image"]), str(tmp_path / "x.plc"), "--checkpoint", str(tmp_path / "no.pt")]
    )
    assert code == 3
    assert "checkpoint" in capsys.readouterr().err


def test_no_checkpoint_and_no_env_exits_2(workspace, tmp_path, capsys):
    code = main(["compress", str(workspace["image"]), str(tmp_path / "x.plc")])
    assert code == 2
    assert "PLCODEC_CHECKPOINT_DIR" in capsys.readouterr().err


def test_env_checkpoint_dir_is_searched(workspace, tmp_path, monkeypatch):
    ckpt_dir = tmp_path / "ckpts"
    ckpt_dir.mkdir()
    (ckpt_dir / "stage1.pt").write_bytes(workspace["ckpt"].read_bytes())
    monkeypatch.setenv("PLCODEC_CHECKPOINT_DIR", str(ckpt_dir))
    out = tmp_path / "env.plc"
    assert main(["compress", str(workspace["image"]), str(out)]) == 0
    explicit = tmp_path / "explicit.plc"
    assert main(["compress", str(workspace["image"]), str(explicit), "--checkpoint", str(workspace["ckpt"])]) == 0
    assert out.read_bytes() == explicit.read_bytes()


def test_env_checkpoint_dir_prefers_stage2(workspace, tmp_path, monkeypatch):
    ckpt_dir = tmp_path / "ckpts"
    ckpt_dir.mkdir()
    (ckpt_dir / "stage1.pt").write_bytes(workspace["other_ckpt"].read_bytes())
    (ckpt_dir / "stage2.pt").write_bytes(workspace["ckpt"].read_bytes())
    monkeypatch.setenv("PLCODEC_CHECKPOINT_DIR", str(ckpt_dir))
    out = tmp_path / "pref.plc"
    assert main(["compress", str(workspace["image"]), str(out)]) == 0
    assert read_plc(out).transform_config_hash == workspace["model"].weight_digest()


def test_missing_input_image_exits_3(workspace, tmp_path):
    code = main(
        ["compress", str(tmp_path / "ghost.png"), str(tmp_path / "x.plc"), "--checkpoint", str(workspace["ckpt"])]
    )
    assert code == 3


def test_coder_rans_unavailable_exits_4(workspace, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("PLCODEC_RANS_CLI", str(tmp_path / "missing-cli.js"))
    code = main(
        [
            "compress",
            str(workspace["image"]),
            str(tmp_path / "x.plc"),
            "--checkpoint",
            str(workspace["ckpt"]),
            "--coder",
            "rans",
        ]
    )
    assert code == 4
    err = capsys.readouterr().err
    assert "hint" in err and "--coder ref" in err


def test_decompress_unknown_coder_exits_4(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("PLCODEC_RANS_CLI", str(tmp_path / "missing-cli.js"))
    monkeypatch.setattr(codec_mod, "_BACKENDS", {1: codec_mod._BACKENDS[1]})
    obj = compress(load_image(workspace["image"]), workspace["model"])
    foreign = CompressedObject(
        coder_id=2,
        original_height=obj.original_height,
        original_width=obj.original_width,
        transform_config_hash=obj.transform_config_hash,
        step_table=obj.step_table,
        hyper_payload=obj.hyper_payload,
        group_payloads=obj.group_payloads,
    )
    plc = tmp_path / "foreign.plc"
    plc.write_bytes(pack(foreign))
    code = main(["decompress", str(plc), str(tmp_path / "o.png"), "--checkpoint", str(workspace["ckpt"])])
    assert code == 4


def test_decompress_corrupt_container_exits_5(workspace, tmp_path):
    plc = tmp_path / "ok.plc"
    assert main(["compress", str(workspace["image"]), str(plc), "--checkpoint", str(workspace["ckpt"])]) == 0
    raw = bytearray(plc.read_bytes())
    raw[-1] ^= 0xFF
    bad = tmp_path / "bad.plc"
    bad.write_bytes(bytes(raw))
    code = main(["decompress", str(bad), str(tmp_path / "o.png"), "--checkpoint", str(workspace["ckpt"])])
    assert code == 5


def test_decompress_wrong_checkpoint_exits_2(workspace, tmp_path, capsys):
    plc = tmp_path / "ok.plc"
    assert main(["compress", str(workspace["image"]), str(plc), "--checkpoint", str(workspace["ckpt"])]) == 0
    code = main(["decompress", str(plc), str(tmp_path / "o.png"), "--checkpoint", str(workspace["other_ckpt"])])
    assert code == 2


def test_decompress_missing_container_exits_3(workspace, tmp_path):
    code = main(
        ["decompress", str(tmp_path / "ghost.plc"), str(tmp_path / "o.png"), "--checkpoint", str(workspace["ckpt"])]
    )
    assert code == 3


def test_train_missing_config_exits_2(tmp_path, capsys):
    code = main(["train", str(tmp_path / "ghost.json")])
    assert code == 2
    assert "config" in capsys.readouterr().err


def test_train_stage2_without_stage1_exits_3(tmp_path):
    images = tmp_path / "imgs"
    make_synthetic_images(images, 2, (64, 64))
    config = TrainConfig(
        image_dir=str(images),
        out_dir=str(tmp_path / "out"),
        patch_size=64,
        batch_size=2,
        patch_count=4,
        stage1_steps=1,
        stage2_steps=1,
        transform=TINY,
        num_groups=2,
        entropy_hidden=16,
        num_codes=8,
    )
    cfg_path = tmp_path / "cfg.json"
    save_train_config(config, cfg_path)
    assert main(["train", str(cfg_path), "--stage", "2"]) == 3


def test_train_both_stages_creates_two_checkpoints(tmp_path, capsys):
    images = tmp_path / "imgs"
    make_synthetic_images(images, 2, (64, 64))
    out_dir = tmp_path / "out"
    config = TrainConfig(
        image_dir=str(images),
        out_dir=str(out_dir),
        patch_size=64,
        batch_size=2,
        patch_count=4,
        stage1_steps=2,
        stage2_steps=1,
        transform=TINY,
        num_groups=2,
        entropy_hidden=16,
        num_codes=8,
    )
    cfg_path = tmp_path / "cfg.json"
    save_train_config(config, cfg_path)
    assert main(["train", str(cfg_path), "--stage", "both"]) == 0
    printed = capsys.readouterr().out
    assert "stage1 checkpoint:" in printed and "stage2 checkpoint:" in printed
    assert (out_dir / "stage1.pt").exists() and (out_dir / "stage2.pt").exists()


def test_eval_emits_artifacts(workspace, tmp_path, capsys):
    images = tmp_path / "imgs"
    make_synthetic_images(images, 2, (48, 48))
    out_dir = tmp_path / "eval"
    code = main(
        [
            "eval",
            str(images),
            "--checkpoint",
            str(workspace["ckpt"]),
            "--out-dir",
            str(out_dir),
        ]
    )
    assert code == 0
    printed = capsys.readouterr().out
    assert "mean rd_objective" in printed
    assert (out_dir / "eval_amortized.csv").exists()
    assert (out_dir / "eval_amortized.json").exists()
    assert (out_dir / "rd_amortized.png").exists()
    payload = json.loads((out_dir / "eval_amortized.json").read_text())
    assert payload["num_images"] == 2


def _curve_csv(path: Path, rates, qualities):
    RdCurve(tuple(zip(rates, qualities)), metric_name="psnr").to_csv(path)


def test_bdrate_identical_curves_prints_zero(tmp_path, capsys):
    rates = [0.1, 0.2, 0.4, 0.8]
    quals = [30.0, 33.0, 36.0, 39.0]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    _curve_csv(a, rates, quals)
    _curve_csv(b, rates, quals)
    assert main(["bdrate", str(a), str(b)]) == 0
    out = capsys.readouterr().out
    assert "0.00%" in out and "BD-rate" in out


def test_bdrate_ten_percent_shift(tmp_path, capsys):
    rates = [0.1, 0.2, 0.4, 0.8]
    quals = [30.0, 33.0, 36.0, 39.0]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    _curve_csv(a, rates, quals)
    _curve_csv(b, [r * 0.9 for r in rates], quals)
    assert main(["bdrate", str(a), str(b)]) == 0
    out = capsys.readouterr().out
    assert "-10.00%" in out


def test_bdrate_missing_file_exits_3(tmp_path):
    a = tmp_path / "a.csv"
    _curve_csv(a, [0.1, 0.2, 0.4, 0.8], [30.0, 33.0, 36.0, 39.0])
    assert main(["bdrate", str(a), str(tmp_path / "ghost.csv")]) == 3


def test_bdrate_too_few_points_exits_2(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    _curve_csv(a, [0.1, 0.2, 0.4], [30.0, 33.0, 36.0])
    _curve_csv(b, [0.1, 0.2, 0.4], [30.0, 33.0, 36.0])
    assert main(["bdrate", str(a), str(b)]) == 2
    assert "4 points" in capsys.readouterr().err
