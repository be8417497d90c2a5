"""Config schema validation and section coherence."""

import json

import pytest

from attribens.config import CONFIG_SCHEMA, load_run_config
from attribens.errors import ConfigError


def write(tmp_path, payload):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(payload))
    return path


MINIMAL = {
    "experiment": "t",
    "dataset": {"kind": "synthetic_classification", "n_train": 10, "n_test": 2,
                "dim": 3, "classes": 2, "separation": 1.0, "seed": 0},
    "model": {"arch": "mlp", "hidden": [4], "dropout_rate": 0.1},
}


def test_minimal_config_loads(tmp_path):
    run = load_run_config(write(tmp_path, MINIMAL))
    assert run.dataset.n == 10
    assert run.model.n_params() > 0
    assert run.ensemble.strategy == "naive"


def test_unknown_key_rejected_with_path(tmp_path):
    payload = dict(MINIMAL)
    payload["training"] = {"lr": 0.1, "warmup": 5}
    with pytest.raises(ConfigError, match="warmup"):
        load_run_config(write(tmp_path, payload))


def test_bad_enum_rejected(tmp_path):
    payload = json.loads(json.dumps(MINIMAL))
    payload["ensemble"] = {"method": "shapley"}
    with pytest.raises(ConfigError, match="shapley"):
        load_run_config(write(tmp_path, payload))


def test_model_dataset_mismatch(tmp_path):
    payload = json.loads(json.dumps(MINIMAL))
    payload["model"] = {"arch": "tiny_transformer", "d_model": 8, "n_heads": 2,
                        "n_layers": 1, "d_ff": 16}
    with pytest.raises(ConfigError, match="arch"):
        load_run_config(write(tmp_path, payload))


def test_seed_override_wins(tmp_path):
    payload = dict(MINIMAL, seed=7)
    run = load_run_config(write(tmp_path, payload), seed_override=99)
    assert run.seed == 99
    assert run.ensemble.seed == 99


def test_out_dir_does_not_change_digest(tmp_path):
    a = load_run_config(write(tmp_path, dict(MINIMAL, out_dir="x")))
    b_path = tmp_path / "b.json"
    b_path.write_text(json.dumps(dict(MINIMAL, out_dir="y")))
    b = load_run_config(b_path)
    assert a.digest() == b.digest()


def test_member_digest_ignores_ensemble(tmp_path):
    with_naive = json.loads(json.dumps(MINIMAL))
    with_naive["ensemble"] = {"strategy": "naive", "method": "trak"}
    with_drop = json.loads(json.dumps(MINIMAL))
    with_drop["ensemble"] = {"strategy": "dropout", "method": "grad_dot", "D": 5}
    a = load_run_config(write(tmp_path, with_naive))
    b_path = tmp_path / "b.json"
    b_path.write_text(json.dumps(with_drop))
    b = load_run_config(b_path)
    assert a.member_digest() == b.member_digest()
    assert a.digest() != b.digest()


def test_schema_is_strict_everywhere():
    def walk(node):
        if isinstance(node, dict):
            if node.get("type") == "object":
                assert node.get("additionalProperties") is False
            for value in node.values():
                walk(value)

    walk(CONFIG_SCHEMA)


def test_forward_only_with_non_trak_rejected(tmp_path):
    payload = json.loads(json.dumps(MINIMAL))
    payload["ensemble"] = {"strategy": "dropout_forward_only", "method": "grad_dot"}
    with pytest.raises(ConfigError):
        load_run_config(write(tmp_path, payload))
