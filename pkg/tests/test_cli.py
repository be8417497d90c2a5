"""End-to-end CLI pipelines: schema validation, artifacts, determinism,
exit codes."""

import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from attribens.cli import main


BASE_CONFIG = {
    "experiment": "clitest",
    "seed": 5,
    "dataset": {"kind": "synthetic_classification", "n_train": 40, "n_test": 8,
                "dim": 6, "classes": 2, "separation": 2.0, "label_noise": 0.0,
                "seed": 3},
    "model": {"arch": "mlp", "hidden": [10], "dropout_rate": 0.1},
    "training": {"optimizer": "sgd_momentum", "lr": 0.01, "momentum": 0.9,
                 "batch_size": 16, "epochs": 6, "subset_fraction": 0.5},
    "ensemble": {"strategy": "dropout", "method": "trak", "I": 2, "D": 2,
                 "proj_dim": 16},
    "evaluation": {"m": 4, "alpha": 0.5},
}


def write_config(tmp_path, overrides=None, name="cfg.json"):
    config = json.loads(json.dumps(BASE_CONFIG))
    config["out_dir"] = str(tmp_path / "out")
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(config.get(key), dict):
            config[key].update(value)
        else:
            config[key] = value
    path = tmp_path / name
    path.write_text(json.dumps(config))
    return path


def test_full_pipeline(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    assert (out / "manifest.json").exists()
    assert (out / "members" / "member_0001.bin").exists()
    assert main(["attribute", "--config", str(cfg)]) == 0
    assert (out / "attribution.bin").exists()
    assert (out / "summary.txt").exists()
    check = json.loads((out / "ledger_check.json").read_text())
    assert check["ok"]
    assert main(["lds", "--config", str(cfg)]) == 0
    report = json.loads((out / "lds.json").read_text())
    assert len(report["per_test_lds"]) == 8
    csv_lines = (out / "lds.csv").read_text().strip().splitlines()
    assert len(csv_lines) == 1 + 8
    mean_from_csv = np.mean([float(line.split(",")[1]) for line in csv_lines[1:]])
    assert abs(mean_from_csv - report["mean_lds"]) < 1e-12


def test_rerun_byte_identical(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["attribute", "--config", str(cfg)]) == 0
    first = (tmp_path / "out" / "attribution.bin").read_bytes()
    manifest_first = (tmp_path / "out" / "manifest.json").read_bytes()
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["attribute", "--config", str(cfg)]) == 0
    assert (tmp_path / "out" / "attribution.bin").read_bytes() == first
    assert (tmp_path / "out" / "manifest.json").read_bytes() == manifest_first


def test_jobs_invariance(tmp_path):
    cfg1 = write_config(tmp_path, {"out_dir": str(tmp_path / "o1")}, name="c1.json")
    cfg2 = write_config(tmp_path, {"out_dir": str(tmp_path / "o2")}, name="c2.json")
    for cfg, jobs in ((cfg1, "1"), (cfg2, "2")):
        assert main(["train", "--config", str(cfg), "--jobs", jobs]) == 0
        assert main(["attribute", "--config", str(cfg), "--jobs", jobs]) == 0
        assert main(["lds", "--config", str(cfg), "--jobs", jobs]) == 0
    for name in ("attribution.bin", "train_ledger.json", "attribute_ledger.json",
                 "lds.json", "lds.csv", "ground_truth.bin"):
        assert (tmp_path / "o1" / name).read_bytes() == \
            (tmp_path / "o2" / name).read_bytes(), name


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path, {"bogus": 1})
    assert main(["train", "--config", str(cfg)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 2


def test_incompatible_strategy_method_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path, {"ensemble": {"strategy": "dropout_forward_only",
                                               "method": "grad_cos"}})
    assert main(["attribute", "--config", str(cfg)]) == 2
    assert "forward-only" in capsys.readouterr().err


def test_attribute_without_train_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["attribute", "--config", str(cfg)]) == 2
    assert "train" in capsys.readouterr().err


def test_training_divergence_exits_3(tmp_path):
    cfg = write_config(tmp_path, {
        "model": {"arch": "mlp", "hidden": [8, 8], "dropout_rate": 0.0},
        "dataset": {"kind": "synthetic_classification", "n_train": 16, "n_test": 4,
                    "dim": 4, "classes": 2, "separation": 200.0, "label_noise": 0.0,
                    "seed": 1},
        "training": {"lr": 1e200, "epochs": 3, "batch_size": 8,
                     "subset_fraction": 1.0},
    })
    assert main(["train", "--config", str(cfg)]) == 3


def test_lds_digest_mismatch_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["attribute", "--config", str(cfg)]) == 0
    assert main(["lds", "--config", str(cfg)]) == 0
    other = write_config(tmp_path, {
        "dataset": {"kind": "synthetic_classification", "n_train": 40, "n_test": 8,
                    "dim": 6, "classes": 2, "separation": 2.0, "label_noise": 0.0,
                    "seed": 4}}, name="other.json")
    # same out dir, different dataset: attribution artifact no longer matches
    assert main(["lds", "--config", str(other)]) == 2


def test_ground_truth_reuse(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["attribute", "--config", str(cfg)]) == 0
    assert main(["lds", "--config", str(cfg)]) == 0
    gt_bytes = (tmp_path / "out" / "ground_truth.bin").read_bytes()
    # switch strategy: ground truth is reused, not rebuilt
    cfg2 = write_config(tmp_path, {"ensemble": {"strategy": "naive", "method": "trak",
                                                "I": 2, "proj_dim": 16}},
                        name="cfg2.json")
    assert main(["attribute", "--config", str(cfg2)]) == 0
    assert main(["lds", "--config", str(cfg2)]) == 0
    assert (tmp_path / "out" / "ground_truth.bin").read_bytes() == gt_bytes


def test_costs_command(tmp_path, capsys):
    cfg = write_config(tmp_path, {
        "ensemble": {"strategy": "lora", "method": "trak", "I": 1, "L": 3},
        "model": {"arch": "tiny_transformer", "d_model": 16, "n_heads": 2,
                  "n_layers": 1, "d_ff": 32, "dropout_rate": 0.1},
        "dataset": {"kind": "synthetic_sequences", "n_train": 10, "n_test": 4,
                    "vocab": 8, "context_len": 6, "seed": 2},
        "unit_costs": {"t_train_base": 2.0, "t_train_lora": 0.5,
                       "t_serving_lora": 1.0}})
    assert main(["costs", "--config", str(cfg)]) == 0
    payload = json.loads((tmp_path / "out" / "costs.json").read_text())
    assert payload["predicted"]["training"] == 2.0 + 3 * 0.5
    assert payload["predicted"]["serving"] == 3 * 1.0


def test_sweep_command(tmp_path):
    cfg = write_config(tmp_path, {"sweep": {"axis": "D", "values": [1, 2]}})
    assert main(["sweep", "--config", str(cfg)]) == 0
    lines = (tmp_path / "out" / "sweep.csv").read_text().strip().splitlines()
    assert len(lines) == 3
    header = lines[0].split(",")
    assert "mean_lds" in header and "serve_backward" in header
    d1 = dict(zip(header, lines[1].split(",")))
    d2 = dict(zip(header, lines[2].split(",")))
    assert d1["parameter_count"] == d2["parameter_count"]
    assert int(d2["serve_backward"]) == 2 * int(d1["serve_backward"])


def test_sweep_rerun_identical_bytes(tmp_path):
    cfg = write_config(tmp_path, {"sweep": {"axis": "I", "values": [1, 2]}})
    assert main(["sweep", "--config", str(cfg)]) == 0
    first = (tmp_path / "out" / "sweep.csv").read_bytes()
    assert main(["sweep", "--config", str(cfg)]) == 0
    assert (tmp_path / "out" / "sweep.csv").read_bytes() == first


def test_oracle_command(tmp_path):
    cfg = write_config(tmp_path, {
        "model": {"arch": "linear"},
        "training": {"optimizer": "adam", "lr": 0.05, "epochs": 40,
                     "batch_size": 40, "subset_fraction": 1.0}})
    assert main(["oracle", "--config", str(cfg)]) == 0
    from attribens.data import load_artifact

    art = load_artifact(tmp_path / "out" / "loo_oracle.bin", expect_kind="attribution")
    assert tuple(art.header["shape"]) == (40, 8)


def test_console_entrypoint_runs():
    proc = subprocess.run([sys.executable, "-m", "attribens.cli", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
