import csv
import json

import pytest

from semstack.harness import cli, commands
from semstack.harness.config import ConfigError, ExperimentConfig, load_config
from semstack.harness.manifest import read_manifest, sha256_file

TINY = {
    "dataset": {"height": 16, "width": 16, "n_train": 4, "n_test_source": 3, "n_test_target": 3,
                "stack_size": 3, "seed": 2},
    "train": {"base_channels": 2, "epochs": 1, "batch_size": 2},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_verify_contract(tmp_path):
    assert cli.main(["verify", "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "verify.csv")
    assert list(rows[0]) == list(commands.VERIFY_COLUMNS)
    assert [r["check"] for r in rows] == ["stacking_law"] * 4 + ["bayes_sequential", "bound_l1"]
    assert [r["n"] for r in rows[:4]] == ["1", "4", "16", "64"]
    assert all(r["passed"] == "1" for r in rows)
    m = read_manifest(tmp_path / "manifest.json")
    assert m["status"] == "complete" and m["outputs"]["verify.csv"] == sha256_file(tmp_path / "verify.csv")
    assert "PCG64" in m["rng_algorithm"]


def test_verify_fault_is_caught(tmp_path):
    assert cli.main(["verify", "--out", str(tmp_path), "--fault", "skip-sqrt-n"]) == 1
    rows = read_rows(tmp_path / "verify.csv")
    assert [r["passed"] for r in rows[:4]] == ["1", "0", "0", "0"]
    assert "n=4" in read_manifest(tmp_path / "manifest.json")["error"]


def test_gen_layout_and_digests(tmp_path, tiny_config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["gen", "--config", str(tiny_config), "--out", str(a)]) == 0
    assert cli.main(["gen", "--config", str(tiny_config), "--out", str(b)]) == 0
    stacks = sorted((a / "stacks").iterdir())
    assert len(stacks) == 4 and all(len(list(s.iterdir())) == 3 for s in stacks)
    assert len(list((a / "masks").iterdir())) == 10
    ma, mb = read_manifest(a / "manifest.json"), read_manifest(b / "manifest.json")
    assert ma["outputs"] == mb["outputs"] and ma["run_id"] == mb["run_id"]


def test_gen_io_error(tmp_path, tiny_config):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["gen", "--config", str(tiny_config), "--out", str(blocker / "sub")]) == commands.IO_ERROR


@pytest.mark.parametrize("bad", [
    {"datset": {}},
    {"train": {"mode": "sideways"}},
    {"dataset": {"n_train": 0}},
    {"seeds": [1, 1, 2]},
    {"modes": ["baseline", "nope"]},
])
def test_config_errors_exit_2(tmp_path, bad, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    assert cli.main(["gen", "--config", str(path), "--out", str(tmp_path / "o")]) == commands.CONFIG_ERROR
    assert "config error" in capsys.readouterr().err


def test_config_roundtrip():
    cfg = ExperimentConfig()
    assert ExperimentConfig.from_dict(json.loads(cfg.to_json())).to_dict() == cfg.to_dict()
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_dict({"bogus": 1})
    assert info.value.field == "bogus"
    assert load_config(None).seeds == [1, 2, 3]


def test_train_eval_and_oracle(tmp_path, tiny_config):
    data, run = tmp_path / "data", tmp_path / "run"
    assert cli.main(["gen", "--config", str(tiny_config), "--out", str(data)]) == 0
    assert cli.main(["train", "--config", str(tiny_config), "--data", str(data), "--out", str(run)]) == 0
    assert (run / "model.ckpt").exists() and (run / "loss.csv").exists()
    assert cli.main(["eval", "--config", str(tiny_config), "--data", str(data), "--checkpoint",
                     str(run / "model.ckpt"), "--split", "test_target", "--out", str(run)]) == 0
    rows = read_rows(run / "metrics_test_target.csv")
    assert [r["class"] for r in rows] == ["1", "2", "3", "mean"]

    oracle = tmp_path / "oracle"
    assert cli.main(["eval", "--config", str(tiny_config), "--data", str(data), "--oracle",
                     "--split", "test_source", "--out", str(oracle)]) == 0
    mean = read_rows(oracle / "metrics_test_source.csv")[-1]
    assert float(mean["dice"]) == 1.0 and float(mean["hausdorff"]) == 0.0


def test_train_is_reproducible(tmp_path, tiny_config):
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(tiny_config), "--out", str(tmp_path / name)]) == 0
    ma, mb = (read_manifest(tmp_path / n / "manifest.json") for n in ("a", "b"))
    assert ma["outputs"] == mb["outputs"]


def test_eval_corrupt_checkpoint(tmp_path, tiny_config):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + bytes(40))
    assert cli.main(["eval", "--config", str(tiny_config), "--checkpoint", str(bad),
                     "--out", str(tmp_path)]) == commands.CORRUPT
    assert cli.main(["eval", "--config", str(tiny_config), "--out", str(tmp_path)]) == commands.CONFIG_ERROR
    assert cli.main(["eval", "--config", str(tiny_config), "--checkpoint", str(tmp_path / "missing"),
                     "--out", str(tmp_path)]) == commands.IO_ERROR


def test_compare_tables(tmp_path):
    cfg = ExperimentConfig.from_dict({**TINY, "modes": ["baseline", "synth_only", "synth_enc", "synth_enc_dec"],
                                      "seeds": [1, 2, 3]})
    code, report = commands.cmd_compare(cfg, tmp_path)
    assert code == 0
    rows = read_rows(tmp_path / "compare.csv")
    assert len(rows) == 24
    summary = read_rows(tmp_path / "compare_summary.csv")
    by = {(r["mode"], r["split"]): r for r in summary}
    for (mode, split), r in by.items():
        dice = [float(x["mean_dice"]) for x in rows if x["mode"] == mode and x["split"] == split]
        assert float(r["mean_dice_mean"]) == pytest.approx(sum(dice) / 3)
        delta = float(r["mean_dice_mean"]) - float(by[("baseline", split)]["mean_dice_mean"])
        assert float(r["mean_dice_delta_vs_baseline"]) == pytest.approx(delta)
    assert (tmp_path / "ladder.txt").read_text().splitlines() == report
    for mode in cfg.modes:
        assert (tmp_path / "cells" / f"{mode}_s1" / "model.ckpt").exists()


def test_compare_needs_three_seeds(tmp_path):
    cfg = ExperimentConfig.from_dict({**TINY, "seeds": [1, 2]})
    assert commands.cmd_compare(cfg, tmp_path)[0] == commands.CONFIG_ERROR


def test_ladder_report_flags_regressions():
    rows = [{"mode": m, "seed": s, "split": sp, "mean_dice": d}
            for m, s, sp, d in [("baseline", 1, "test_target", "0.5"), ("synth_only", 1, "test_target", "0.4"),
                                ("baseline", 1, "test_source", "0.9"), ("synth_only", 1, "test_source", "0.9")]]
    report = commands.ladder_report(rows, ["baseline", "synth_only"], [1])
    assert any(line.startswith("note: synth_only below baseline") and "seed 1" in line for line in report)
