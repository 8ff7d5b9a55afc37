from __future__ import annotations

import json
import os

import numpy as np
import pytest

from msga.cli import main
from msga.config import ConfigError, RunConfig, build_config, parse_config_file
from msga.model import init_model, load_checkpoint
from msga.train import model_config

FAST = [
    "--image-h", "16", "--image-w", "16", "--embed-dim", "8", "--blocks", "1",
    "--decoder-channels", "8", "--synthetic-count", "30", "--batch-size", "2",
    "--warmup-steps", "10", "--total-steps", "20",
]


def _read(path: str) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


# ---------------------------------------------------------------------------
# configuration plumbing


def test_config_file_parse_and_flag_override(tmp_path) -> None:
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# comment\nmode=v1\nseed=3\nrank=2   # inline comment\n")
    values = parse_config_file(str(cfg_file))
    assert values == {"mode": "v1", "seed": 3, "rank": 2}
    cfg = build_config(values, {"seed": 9})
    assert cfg.mode == "v1" and cfg.seed == 9 and cfg.rank == 2


def test_config_rejects_unknown_key(tmp_path) -> None:
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("learning_rate=1\n")
    with pytest.raises(ConfigError, match="learning_rate"):
        parse_config_file(str(cfg_file))


def test_config_validation_names_field() -> None:
    with pytest.raises(ConfigError, match="test_fraction"):
        RunConfig(test_fraction=1.5).validate()
    with pytest.raises(ConfigError, match="budgets"):
        RunConfig(budgets=(50, 25)).validate()


def test_cli_exit_code_2_on_bad_config(tmp_path) -> None:
    assert main(["train", "--mode", "medsaga", "--total-steps", "-4",
                 "--out", str(tmp_path)]) == 2


def test_cli_exit_code_2_on_unknown_config_key(tmp_path) -> None:
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense=1\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_cli_exit_code_3_on_unreadable_config(tmp_path) -> None:
    assert main(["train", "--config", str(tmp_path / "missing.cfg"),
                 "--out", str(tmp_path)]) == 3


# ---------------------------------------------------------------------------
# train


def test_train_zero_steps_checkpoint_equals_init(tmp_path) -> None:
    out = str(tmp_path / "run")
    assert main(["train", *FAST, "--total-steps", "0", "--out", out]) == 0
    stored = dict(load_checkpoint(os.path.join(out, "model.msga")))
    cfg = RunConfig(image_h=16, image_w=16, embed_dim=8, blocks=1, decoder_channels=8)
    reference = init_model(model_config(cfg), cfg.seed)
    for g in reference.groups:
        assert np.array_equal(stored[g.name], g.values), g.name


def test_train_log_is_deterministic_and_consistent(tmp_path) -> None:
    out_a = str(tmp_path / "a")
    out_b = str(tmp_path / "b")
    assert main(["train", *FAST, "--out", out_a]) == 0
    assert main(["train", *FAST, "--out", out_b]) == 0
    log_a = _read(os.path.join(out_a, "train_log.csv"))
    assert log_a == _read(os.path.join(out_b, "train_log.csv"))
    # logged combined loss equals 0.2*CE + 0.8*Dice at every step
    lines = log_a.strip().splitlines()
    assert lines[0] == "step,lr_full,lr_galore,ce,dice,loss"
    assert len(lines) == 21
    for line in lines[1:]:
        _, _, _, ce, dice, loss = line.split(",")
        assert abs(float(loss) - (0.2 * float(ce) + 0.8 * float(dice))) < 1e-12


def test_train_writes_resumable_config_echo(tmp_path) -> None:
    out = str(tmp_path / "run")
    assert main(["train", *FAST, "--sided", "two", "--budgets", "5,10", "--out", out]) == 0
    echo = parse_config_file(os.path.join(out, "config_echo.cfg"))
    restored = build_config(echo, {})
    expected = build_config({}, {
        "image_h": 16, "image_w": 16, "embed_dim": 8, "blocks": 1,
        "decoder_channels": 8, "synthetic_count": 30, "batch_size": 2,
        "warmup_steps": 10, "total_steps": 20, "sided": "two",
        "budgets": (5, 10), "out": out,
    })
    assert restored == expected  # every field round-trips through the echo


# ---------------------------------------------------------------------------
# eval


def test_eval_oracle_mode_is_perfect(tmp_path) -> None:
    out = str(tmp_path / "run")
    assert main(["eval", *FAST, "--oracle", "--out", out]) == 0
    lines = _read(os.path.join(out, "metrics.csv")).strip().splitlines()
    assert lines[0] == "class,dice,hd95"
    assert lines[-1].startswith("mean,")
    for line in lines[1:]:
        _, dice, hd = line.split(",")
        assert float(dice) == 1.0 and float(hd) == 0.0


def test_eval_untrained_model_far_below_trained(tmp_path) -> None:
    # at the default 32x32 geometry every foreground class survives the
    # majority pooling, so the zero head's all-background prediction scores
    # exactly zero foreground dice (recorded smoke behaviour at seed 7)
    geo = ["--embed-dim", "8", "--blocks", "1", "--decoder-channels", "8",
           "--synthetic-count", "30", "--total-steps", "0"]
    out = str(tmp_path / "run")
    assert main(["train", *geo, "--out", out]) == 0
    assert main(["eval", *geo, "--checkpoint", os.path.join(out, "model.msga"),
                 "--out", out]) == 0
    rows = _read(os.path.join(out, "metrics.csv")).strip().splitlines()[1:]
    mean_dice = float(rows[-1].split(",")[1])
    assert mean_dice == 0.0


def test_eval_requires_checkpoint_or_oracle(tmp_path) -> None:
    assert main(["eval", *FAST, "--out", str(tmp_path)]) == 2


def test_eval_rejects_class_mismatch(tmp_path) -> None:
    out = str(tmp_path / "run")
    assert main(["train", *FAST, "--total-steps", "0", "--out", out]) == 0
    code = main(["eval", *FAST, "--classes", "4",
                 "--checkpoint", os.path.join(out, "model.msga"), "--out", out])
    assert code == 2


def test_train_from_manifest_and_eval_via_echo(tmp_path) -> None:
    from msga.data import generate_synthetic, save_dataset

    ds = generate_synthetic(3, 30, 16, 16, 3)
    manifest = save_dataset(ds, str(tmp_path / "data"))
    out = str(tmp_path / "run")
    assert main(["train", *FAST, "--manifest", manifest, "--out", out]) == 0
    # the echo records the manifest source, so eval needs nothing beyond it
    assert main(["eval", "--config", os.path.join(out, "config_echo.cfg"),
                 "--checkpoint", os.path.join(out, "model.msga"), "--out", out]) == 0
    lines = _read(os.path.join(out, "metrics.csv")).strip().splitlines()
    assert lines[0] == "class,dice,hd95" and lines[-1].startswith("mean,")


# ---------------------------------------------------------------------------
# memreport


def test_memreport_outputs_and_totals(tmp_path) -> None:
    out = str(tmp_path / "mem")
    assert main(["memreport", "--out", out]) == 0
    doc = json.loads(_read(os.path.join(out, "memory.json")))
    modes = {rep["mode"]: rep for rep in doc["reports"]}
    assert set(modes) == {"medsaga", "v1", "v2", "full-adamw"}
    med = modes["medsaga"]["totals"]["encoder"]["state_bytes"]
    full = modes["full-adamw"]["totals"]["encoder"]["state_bytes"]
    assert med < full
    for rep in doc["reports"]:
        assert rep["grand_total_bytes"] == sum(
            g["weight_bytes"] + g["grad_bytes"] + g["state_bytes"] for g in rep["groups"]
        )
    assert "8 bytes per element" in _read(os.path.join(out, "memory.txt"))


# ---------------------------------------------------------------------------
# sweep


def test_sweep_single_budget_matches_eval(tmp_path) -> None:
    out = str(tmp_path / "sweep")
    assert main(["sweep", *FAST, "--budgets", "10", "--out", out]) == 0
    lines = _read(os.path.join(out, "sweep.csv")).strip().splitlines()
    assert lines[0] == "n_images,mean_dice,mean_hd95"
    assert len(lines) == 2
    n, dice, hd = lines[1].split(",")
    assert n == "10"
    # re-run the same budget through train+eval and compare
    out2 = str(tmp_path / "single")
    assert main(["train", *FAST, "--budget", "10", "--out", out2]) == 0
    assert main(["eval", *FAST, "--checkpoint", os.path.join(out2, "model.msga"),
                 "--out", out2]) == 0
    metrics = _read(os.path.join(out2, "metrics.csv")).strip().splitlines()
    mean_row = metrics[-1].split(",")
    assert float(mean_row[1]) == float(dice)
    assert float(mean_row[2]) == float(hd)


def test_sweep_rejects_oversized_budget(tmp_path) -> None:
    assert main(["sweep", *FAST, "--budgets", "10,4000", "--out", str(tmp_path)]) == 2


def test_sweep_rejects_unordered_budgets(tmp_path) -> None:
    assert main(["sweep", *FAST, "--budgets", "20,10", "--out", str(tmp_path)]) == 2


def test_sweep_dice_non_decreasing_on_default_task(tmp_path) -> None:
    # tolerance 0.03 frozen after three seeded calibration runs (seeds 7/11/23,
    # worst observed adjacent drop -0.0025)
    out = str(tmp_path / "sweep")
    assert main(["sweep", "--synthetic-count", "260", "--budgets", "25,50,100,200",
                 "--out", out]) == 0
    lines = _read(os.path.join(out, "sweep.csv")).strip().splitlines()[1:]
    dices = [float(line.split(",")[1]) for line in lines]
    assert len(dices) == 4
    for small, large in zip(dices, dices[1:]):
        assert large >= small - 0.03


# ---------------------------------------------------------------------------
# ablate


def test_ablate_outputs_and_mode_properties(tmp_path) -> None:
    out = str(tmp_path / "ablate")
    assert main(["ablate", *FAST, "--total-steps", "40", "--out", out]) == 0
    lines = _read(os.path.join(out, "ablation.csv")).strip().splitlines()
    assert lines[0] == "mode,mean_dice,mean_hd95,state_bytes,grand_total_bytes"
    rows = {line.split(",")[0]: line.split(",") for line in lines[1:]}
    assert set(rows) == {"medsaga", "v1", "v2"}
    assert float(rows["medsaga"][1]) >= float(rows["v2"][1])
    # v2 keeps its init checkpoint for the frozen groups
    init_ck = dict(load_checkpoint(os.path.join(out, "v2", "model.msga")))
    cfg = RunConfig(image_h=16, image_w=16, embed_dim=8, blocks=1, decoder_channels=8)
    reference = init_model(model_config(cfg), cfg.seed)
    for g in reference.groups:
        if g.role in ("prompt", "decoder"):
            assert np.array_equal(init_ck[g.name], g.values), g.name
