"""Run configuration: JSON schema validation, section parsing, digests.

Configs are plain JSON; the published schema (config_schema.json, also
exposed as CONFIG_SCHEMA) rejects unknown keys so typos fail fast, before
any compute. CLI flags override file values, which override defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema

from .data import Dataset, config_digest, gen_synthetic_classification, \
    gen_synthetic_sequences, load_mnist_idx
from .ensembles import EnsembleConfig
from .errors import ConfigError
from .grads import OutputFn
from .models import ModelSpec, build_linear_classifier, build_mlp, build_tiny_transformer
from .training import TrainConfig

__all__ = ["RunConfig", "load_run_config", "CONFIG_SCHEMA"]

with resources.files("attribens").joinpath("config_schema.json").open("rb") as _fh:
    CONFIG_SCHEMA = json.load(_fh)


@dataclass
class RunConfig:
    experiment: str
    seed: int
    out_dir: Path
    raw: dict
    dataset: Dataset
    test_dataset: Dataset
    model: ModelSpec
    training: TrainConfig
    ensemble: EnsembleConfig
    eval_m: int
    eval_alpha: float
    eval_seed: int
    sweep_axis: Optional[str] = None
    sweep_values: Optional[list[int]] = None
    unit_costs: Optional[dict] = None

    def digest(self) -> str:
        """Digest of everything semantic; where outputs land is excluded."""
        semantic = {k: v for k, v in self.raw.items() if k != "out_dir"}
        return config_digest(semantic)

    def member_digest(self) -> str:
        """Digest of the sections that determine trained members, so member
        artifacts survive ensemble-strategy changes (and sweeps)."""
        return config_digest({k: self.raw.get(k)
                              for k in ("dataset", "model", "training", "seed")})

    def dataset_pair_digest(self) -> str:
        return config_digest([self.dataset.digest(), self.test_dataset.digest()])


def _validate(config: dict, path: str) -> None:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(config), key=lambda e: e.json_path)
    if errors:
        first = errors[0]
        raise ConfigError(f"{path}: {first.json_path}: {first.message}")


def _build_datasets(section: dict) -> tuple[Dataset, Dataset]:
    kind = section["kind"]
    if kind == "synthetic_classification":
        common = dict(dim=section["dim"], classes=section["classes"],
                      separation=section["separation"],
                      label_noise=section.get("label_noise", 0.0),
                      center_seed=section.get("seed", 0))
        train = gen_synthetic_classification(n=section["n_train"],
                                             seed=section.get("seed", 0), **common)
        test = gen_synthetic_classification(n=section["n_test"],
                                            seed=section.get("seed", 0) + 100_000, **common)
        return train, test
    if kind == "synthetic_sequences":
        common = dict(vocab=section["vocab"], context_len=section["context_len"],
                      generator=section.get("generator", "markov"),
                      order=section.get("order", 1),
                      chain_seed=section.get("seed", 0))
        train = gen_synthetic_sequences(n=section["n_train"],
                                        seed=section.get("seed", 0), **common)
        test = gen_synthetic_sequences(n=section["n_test"],
                                       seed=section.get("seed", 0) + 100_000, **common)
        return train, test
    if kind == "mnist_idx":
        train = load_mnist_idx(section["train_images"], section["train_labels"],
                               limit=section.get("n_train"))
        test = load_mnist_idx(section["test_images"], section["test_labels"],
                              limit=section.get("n_test"))
        return train, test
    raise ConfigError(f"unknown dataset kind {kind!r}")


def _build_model(section: dict, dataset: Dataset) -> ModelSpec:
    arch = section["arch"]
    if arch == "mlp":
        return build_mlp(dataset.inputs.shape[1], list(section["hidden"]),
                         dataset.n_classes, section.get("dropout_rate", 0.0))
    if arch == "linear":
        out_dim = section.get("output_dim")
        if out_dim is None:
            out_dim = 1 if dataset.n_classes == 2 else dataset.n_classes
        return build_linear_classifier(dataset.inputs.shape[1], out_dim)
    if arch == "tiny_transformer":
        return build_tiny_transformer(
            vocab_size=dataset.n_classes,
            context_len=dataset.inputs.shape[1],
            d_model=section["d_model"], n_heads=section["n_heads"],
            n_layers=section["n_layers"], d_ff=section["d_ff"],
            dropout_rate=section.get("dropout_rate", 0.0))
    raise ConfigError(f"unknown arch {arch!r}")


def _build_training(section: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        optimizer=section.get("optimizer", "sgd_momentum"),
        lr=section.get("lr", 0.01),
        momentum=section.get("momentum", 0.9),
        beta1=section.get("beta1", 0.9),
        beta2=section.get("beta2", 0.98),
        batch_size=section.get("batch_size", 64),
        epochs=section.get("epochs", 20),
        seed=section.get("seed", seed),
        subset_fraction=section.get("subset_fraction", 1.0),
        checkpoint_epochs=tuple(section.get("checkpoint_epochs", [])),
    )


def _build_ensemble(section: dict, seed: int) -> EnsembleConfig:
    lora = section.get("lora", {})
    try:
        return EnsembleConfig(
            strategy=section.get("strategy", "naive"),
            method=section.get("method", "trak"),
            I=section.get("I", 1),
            D=section.get("D", 1),
            L=section.get("L", 1),
            checkpoint_epochs=tuple(section.get("checkpoint_epochs", [])),
            seed=section.get("seed", seed),
            output_fn=OutputFn(section.get("output_fn", "margin")),
            proj_dim=section.get("proj_dim", 512),
            projection=section.get("projection", "gaussian"),
            lam=section.get("lambda", "auto"),
            mask_rate=section.get("mask_rate"),
            dropout_disabled=section.get("dropout_disabled", False),
            damping=section.get("damping", 1e-3),
            cg_max_iters=section.get("cg_max_iters", 100),
            cg_tol=section.get("cg_tol", 1e-6),
            lora_rank=lora.get("rank", 8),
            lora_alpha=lora.get("alpha", 8.0),
            lora_targets=tuple(lora["targets"]) if "targets" in lora else None,
            lora_epochs=lora.get("epochs", 10),
            lora_lr=lora.get("lr", 1e-4),
            lora_batch_size=lora.get("batch_size", 64),
            lora_fraction=lora.get("fraction", 0.5),
            lora_full_gradients=lora.get("full_gradients", False),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_run_config(path: str | Path, seed_override: Optional[int] = None,
                    out_override: Optional[str] = None) -> RunConfig:
    """Parse and fully validate a config file; any schema violation or
    incoherent section raises ConfigError naming the offending field."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    _validate(raw, str(path))

    seed = seed_override if seed_override is not None else raw.get("seed", 0)
    effective = dict(raw)
    effective["seed"] = seed
    train_data, test_data = _build_datasets(raw["dataset"])
    model = _build_model(raw["model"], train_data)
    training = _build_training(raw.get("training", {}), seed)
    ensemble = _build_ensemble(raw.get("ensemble", {}), seed)
    if model.is_sequence_model() != (train_data.kind == "sequence"):
        raise ConfigError("model.arch does not match dataset.kind")
    evaluation = raw.get("evaluation", {})
    sweep = raw.get("sweep", {})
    out_dir = Path(out_override if out_override is not None
                   else raw.get("out_dir", f"runs/{raw['experiment']}"))
    return RunConfig(
        experiment=raw["experiment"],
        seed=seed,
        out_dir=out_dir,
        raw=effective,
        dataset=train_data,
        test_dataset=test_data,
        model=model,
        training=training,
        ensemble=ensemble,
        eval_m=evaluation.get("m", 20),
        eval_alpha=evaluation.get("alpha", 0.5),
        eval_seed=evaluation.get("seed", seed + 1),
        sweep_axis=sweep.get("axis"),
        sweep_values=list(sweep["values"]) if "values" in sweep else None,
        unit_costs=raw.get("unit_costs"),
    )
