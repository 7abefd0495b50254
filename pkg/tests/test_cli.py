import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from hazeshift.checkpoint import Checkpoint, save_checkpoint
from hazeshift.cli import main, run_roundtrip
from hazeshift.config import ConfigError, RunConfig
from hazeshift.diffusion import DenoiserEstimate
from hazeshift.imageio import read_image, write_image


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def ckpt_path(tmp_path, tiny_model, tiny_config, linear15):
    path = tmp_path / "model.bin"
    save_checkpoint(path, Checkpoint(linear15, tiny_config, tiny_model))
    return path


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    assert main(["synth", "--n", "6", "--size", "32", "--seed", "7", "--out", str(out)]) == 0
    return out


# synth


def test_synth_creates_aligned_pairs(data_dir):
    clear = sorted(p.name for p in (data_dir / "clear").iterdir())
    assert len(clear) == 6 and clear == sorted(p.name for p in (data_dir / "hazy").iterdir())
    assert len((data_dir / "manifest.jsonl").read_text().splitlines()) == 6


def test_synth_is_byte_identical(tmp_path, data_dir):
    main(["synth", "--n", "6", "--size", "32", "--seed", "7", "--out", str(tmp_path / "again")])
    assert tree_bytes(data_dir) == tree_bytes(tmp_path / "again")


def test_synth_missing_out():
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--n", "2"])
    assert exc.value.code != 0


def test_synth_thirty_two_pairs(tmp_path):
    assert main(["synth", "--n", "32", "--size", "64", "--seed", "7", "--out", str(tmp_path / "d")]) == 0
    assert len(list((tmp_path / "d" / "clear").iterdir())) == 32


# config


def test_config_rejects_unknown_keys(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"T": 15, "colour": "blue"}))
    with pytest.raises(ConfigError, match="colour"):
        RunConfig.from_file(cfg)
    with pytest.raises(SystemExit):
        main(["synth", "--config", str(cfg), "--out", str(tmp_path / "x")])


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_pairs": 3, "size": 16, "seed": 1}))
    assert main(["synth", "--config", str(cfg), "--n", "2", "--out", str(tmp_path / "o")]) == 0
    assert len(list((tmp_path / "o" / "clear").iterdir())) == 2


def test_resolved_config_logged(tmp_path, caplog):
    with caplog.at_level(logging.INFO, logger="hazeshift"):
        main(["synth", "--n", "1", "--size", "16", "--seed", "5", "--out", str(tmp_path / "o")])
    msgs = [r.getMessage() for r in caplog.records]
    logged = json.loads(next(m for m in msgs if m.startswith("config "))[7:])
    assert logged["seed"] == 5 and logged["n_pairs"] == 1
    assert "seed 5" in msgs


# train


TRAIN_FLAGS = ["--patch", "16", "--seed", "2", "--deterministic"]


def _train_cfg(tmp_path):
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({
        "base_channels": 8, "channel_multipliers": [1, 2], "timestep_embed_dim": 16,
        "patches_per_image": 2, "images_per_batch": 2, "learning_rate": 1e-3,
    }))
    return str(cfg)


def test_train_writes_loss_and_checkpoints(tmp_path, data_dir):
    out = tmp_path / "run"
    rc = main(["train", "--config", _train_cfg(tmp_path), "--data", str(data_dir), "--out", str(out),
               "--iterations", "12", "--ckpt-every", "5", *TRAIN_FLAGS])
    assert rc == 0
    rows = (out / "loss.csv").read_text().splitlines()
    assert rows[0] == "iteration,loss" and len(rows) - 1 == 12
    assert {p.name for p in out.glob("*.bin")} == {"ckpt_0000005.bin", "ckpt_0000010.bin", "final.bin"}


def test_train_resume_equivalence(tmp_path, data_dir):
    cfg = _train_cfg(tmp_path)
    straight, part = tmp_path / "straight", tmp_path / "part"
    main(["train", "--config", cfg, "--data", str(data_dir), "--out", str(straight), "--iterations", "20", *TRAIN_FLAGS])
    main(["train", "--config", cfg, "--data", str(data_dir), "--out", str(part), "--iterations", "10", *TRAIN_FLAGS])
    main(["train", "--config", cfg, "--data", str(data_dir), "--out", str(part), "--iterations", "20",
          "--ckpt", str(part / "final.bin"), *TRAIN_FLAGS])
    assert (straight / "final.bin").read_bytes() == (part / "final.bin").read_bytes()
    assert (straight / "loss.csv").read_bytes() == (part / "loss.csv").read_bytes()


def test_train_misaligned_dataset(tmp_path, data_dir, caplog):
    (data_dir / "hazy" / "00000.png").rename(data_dir / "hazy" / "renamed.png")
    with caplog.at_level(logging.ERROR, logger="hazeshift"):
        rc = main(["train", "--data", str(data_dir), "--out", str(tmp_path / "r"), "--iterations", "1"])
    assert rc != 0
    assert any("00000.png" in r.getMessage() and "renamed.png" in r.getMessage() for r in caplog.records)


def test_corrupt_checkpoint_refused(tmp_path, data_dir, caplog):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"HZSHIFT1" + b"\xff\xff\x00\x00garbage")
    with caplog.at_level(logging.ERROR, logger="hazeshift"):
        rc = main(["dehaze", "--ckpt", str(bad), "--input", str(data_dir / "hazy"), "--output", str(tmp_path / "o")])
    assert rc != 0
    assert any("header" in r.getMessage() for r in caplog.records)


# sampling commands


def test_dehaze_preserves_odd_size(tmp_path, ckpt_path, rng):
    src = tmp_path / "in" / "odd.png"
    write_image(src, rng.uniform(-1, 1, (100, 76, 3)))
    assert main(["dehaze", "--ckpt", str(ckpt_path), "--input", str(src), "--output", str(tmp_path / "out"),
                 "--patch", "32", "--stride", "16"]) == 0
    assert read_image(tmp_path / "out" / "odd.png").shape == (100, 76, 3)


def test_small_input_shrinks_window(tmp_path, ckpt_path, rng):
    src = tmp_path / "tiny.png"
    write_image(src, rng.uniform(-1, 1, (20, 28, 3)))
    assert main(["hazify", "--ckpt", str(ckpt_path), "--input", str(src), "--output", str(tmp_path / "o.png")]) == 0
    assert read_image(tmp_path / "o.png").shape == (20, 28, 3)


def test_steps_logged(tmp_path, ckpt_path, rng, caplog):
    src = tmp_path / "a.png"
    write_image(src, rng.uniform(-1, 1, (32, 32, 3)))
    with caplog.at_level(logging.DEBUG, logger="hazeshift"):
        main(["dehaze", "-v", "--ckpt", str(ckpt_path), "--input", str(src), "--output", str(tmp_path / "o"),
              "--steps", "15", "--patch", "16"])
    msgs = [r.getMessage() for r in caplog.records]
    assert sum(m.startswith("reverse step") for m in msgs) == 15
    assert sum(m.startswith("fused denoise round") for m in msgs) == 15


def test_unreadable_inputs_skipped(tmp_path, ckpt_path, rng, caplog):
    d = tmp_path / "in"
    write_image(d / "good.png", rng.uniform(-1, 1, (16, 16, 3)))
    (d / "broken.png").write_bytes(b"not a png")
    with caplog.at_level(logging.WARNING, logger="hazeshift"):
        assert main(["dehaze", "--ckpt", str(ckpt_path), "--input", str(d), "--output", str(tmp_path / "o")]) == 0
    assert any("broken.png" in r.getMessage() for r in caplog.records)
    assert [p.name for p in (tmp_path / "o").iterdir()] == ["good.png"]
    (d / "good.png").unlink()
    assert main(["dehaze", "--ckpt", str(ckpt_path), "--input", str(d), "--output", str(tmp_path / "o2")]) != 0


def test_roundtrip_outputs_and_report(tmp_path, ckpt_path, data_dir):
    out = tmp_path / "rt"
    assert main(["roundtrip", "--ckpt", str(ckpt_path), "--input", str(data_dir / "clear"), "--output", str(out),
                 "--patch", "16"]) == 0
    names = sorted(p.name for p in (data_dir / "clear").iterdir())
    assert sorted(p.name for p in (out / "hazy").iterdir()) == names
    assert sorted(p.name for p in (out / "dehazed").iterdir()) == names
    rows = (out / "report.csv").read_text().splitlines()
    assert rows[0] == "filename,psnr,ssim" and len(rows) == len(names) + 2


def test_roundtrip_identity_stub(tmp_path, data_dir, linear15):
    class Identity:
        def __call__(self, x, y, tx, ty):
            return DenoiserEstimate(np.array(x), np.array(y))

    report = run_roundtrip(data_dir / "clear", tmp_path / "rt", linear15, Identity(), RunConfig(patch_size=16, stride=8))
    assert len(report.names) == 6
    assert all(np.isfinite(report.psnr)) and all(-1 <= s <= 1 for s in report.ssim)
    lines = (tmp_path / "rt" / "report.csv").read_text().splitlines()
    assert len(lines) == 8


# eval


def test_eval_identical_dirs(tmp_path, data_dir):
    out = tmp_path / "m.csv"
    assert main(["eval", "--input", str(data_dir / "clear"), "--gt", str(data_dir / "clear"), "--output", str(out)]) == 0
    rows = [ln.split(",") for ln in out.read_text().splitlines()[1:]]
    assert all(float(r[1]) == 100.0 and float(r[2]) == 1.0 for r in rows)


def test_eval_aggregate_is_mean(tmp_path, data_dir):
    out = tmp_path / "m.csv"
    main(["eval", "--input", str(data_dir / "hazy"), "--gt", str(data_dir / "clear"), "--output", str(out)])
    rows = [ln.split(",") for ln in out.read_text().splitlines()[1:]]
    body = np.array([[float(v) for v in r[1:]] for r in rows[:-1]])
    np.testing.assert_allclose(body.mean(axis=0), [float(v) for v in rows[-1][1:]], rtol=0, atol=1e-9)


def test_eval_no_overlap(tmp_path, data_dir, rng):
    other = tmp_path / "other"
    write_image(other / "zzz.png", rng.uniform(-1, 1, (32, 32, 3)))
    assert main(["eval", "--input", str(other), "--gt", str(data_dir / "clear")]) != 0


def test_eval_reports_unmatched(tmp_path, data_dir, rng, caplog):
    pred = tmp_path / "pred"
    for p in (data_dir / "clear").iterdir():
        (pred / p.name).parent.mkdir(exist_ok=True)
        (pred / p.name).write_bytes(p.read_bytes())
    write_image(pred / "extra.png", rng.uniform(-1, 1, (32, 32, 3)))
    with caplog.at_level(logging.WARNING, logger="hazeshift"):
        assert main(["eval", "--input", str(pred), "--gt", str(data_dir / "clear"), "--output", str(tmp_path / "m.csv")]) == 0
    assert any("extra.png" in r.getMessage() for r in caplog.records)
    assert len((tmp_path / "m.csv").read_text().splitlines()) == 6 + 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "hazeshift", "synth", "--n", "1", "--size", "16", "--out", str(tmp_path / "o")],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert "config" in res.stderr


def test_window_defaults_to_training_patch(tmp_path, tiny_model, tiny_config, linear15, rng, caplog):
    ck = save_checkpoint(tmp_path / "p16.bin", Checkpoint(linear15, tiny_config, tiny_model, extra={"train_config": {"patch_size": 16}}))
    src = tmp_path / "a.png"
    write_image(src, rng.uniform(-1, 1, (32, 32, 3)))
    with caplog.at_level(logging.DEBUG, logger="hazeshift"):
        main(["dehaze", "-v", "--ckpt", str(ck), "--input", str(src), "--output", str(tmp_path / "o")])
    # 16-pixel windows at the default stride of 8 on a 32x32 image
    assert any("(9 windows)" in r.getMessage() for r in caplog.records)
    caplog.clear()
    with caplog.at_level(logging.DEBUG, logger="hazeshift"):
        main(["dehaze", "-v", "--ckpt", str(ck), "--input", str(src), "--output", str(tmp_path / "o"), "--patch", "32"])
    assert any("(1 windows)" in r.getMessage() for r in caplog.records)
