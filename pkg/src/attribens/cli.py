"""Command-line orchestration: reproducible experiment pipelines from JSON
configs, emitting attribution matrices, LDS reports, cost reports, and
plot-ready CSV.

Exit codes: 0 success, 2 configuration/usage problems, 3 numeric or
training failures. Outputs never embed timestamps, so reruns of the same
config are byte-identical at any worker count.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import RunConfig, load_run_config
from .costs import CostLedger, UnitCosts, predict_costs, verify_ledger
from .data import load_artifact, save_artifact
from .ensembles import EnsembleConfig, run_strategy
from .errors import ConfigError, FormatError, NumericError, TrainingDivergence
from .evaluation import LdsGroundTruth, LdsReport, build_lds_ground_truth, lds
from .grads import OutputFn
from .methods import AttributionMatrix
from .models import ModelSpec, ParamVector, param_count
from .training import TrainedMember, train_member
from .evaluation import loo_oracle

log = logging.getLogger("attribens.cli")

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level = _LOG_LEVELS.get(os.environ.get("ATTRIB_ENS_LOG", "warn").lower(),
                            logging.WARNING)
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(message)s")


def _json_dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# artifact encode/decode


def _member_path(out_dir: Path, index: int) -> Path:
    return out_dir / "members" / f"member_{index:04d}.bin"


def _ckpt_path(out_dir: Path, index: int, epoch: int) -> Path:
    return out_dir / "members" / f"member_{index:04d}_ckpt_{epoch:04d}.bin"


def _save_member(path: Path, member: TrainedMember, digest: str) -> None:
    header = {
        "layout": member.params.header_layout(),
        "member_index": member.member_index,
        "seed": member.seed,
        "subset": [int(i) for i in member.subset_indices],
        "config_digest": digest,
    }
    save_artifact(path, "param_vector", header, member.params.data)


def _load_member(path: Path, spec: ModelSpec, digest: str,
                 checkpoints: Optional[dict[int, Path]] = None) -> TrainedMember:
    art = load_artifact(path, expect_kind="param_vector", expect_digest=digest)
    params = ParamVector.zeros(spec)
    params.data[:] = art.payload
    ckpts = {}
    for epoch, cpath in (checkpoints or {}).items():
        cart = load_artifact(cpath, expect_kind="param_vector", expect_digest=digest)
        cp = ParamVector.zeros(spec)
        cp.data[:] = cart.payload
        ckpts[epoch] = cp
    return TrainedMember(
        member_index=int(art.header["member_index"]), spec=spec, params=params,
        subset_indices=np.asarray(art.header["subset"], dtype=np.int64),
        seed=int(art.header["seed"]), checkpoints=ckpts)


def _save_attribution(path: Path, att: AttributionMatrix, run: RunConfig,
                      strategy_digest: str) -> None:
    header = {
        "method": att.method,
        "shape": list(att.scores.shape),
        "metadata": att.metadata,
        "config_digest": strategy_digest,
        "dataset_digest": run.dataset_pair_digest(),
    }
    save_artifact(path, "attribution", header, att.scores.reshape(-1))


def _load_attribution(path: Path) -> tuple[AttributionMatrix, dict]:
    art = load_artifact(path, expect_kind="attribution")
    shape = tuple(art.header["shape"])
    att = AttributionMatrix(scores=art.payload.reshape(shape),
                            method=art.header["method"],
                            metadata=art.header.get("metadata", {}))
    return att, art.header


def _save_ground_truth(path: Path, gt: LdsGroundTruth) -> None:
    header = {
        "subsets": [[int(i) for i in s] for s in gt.subsets],
        "alpha": gt.alpha,
        "m": gt.m,
        "seed": gt.seed,
        "output_fn": gt.output_fn.value,
        "shape": list(gt.outputs.shape),
        "dataset_digest": gt.dataset_digest,
        "retrain_digest": gt.retrain_digest,
    }
    save_artifact(path, "lds_ground_truth", header, gt.outputs.reshape(-1))


def _load_ground_truth(path: Path) -> LdsGroundTruth:
    art = load_artifact(path, expect_kind="lds_ground_truth")
    h = art.header
    return LdsGroundTruth(
        subsets=[np.asarray(s, dtype=np.int64) for s in h["subsets"]],
        outputs=art.payload.reshape(tuple(h["shape"])),
        alpha=float(h["alpha"]), m=int(h["m"]), seed=int(h["seed"]),
        output_fn=OutputFn(h["output_fn"]), dataset_digest=h["dataset_digest"],
        retrain_digest=h["retrain_digest"])


# ---------------------------------------------------------------------------
# commands


@dataclass
class _TrainJob:
    run_path: str
    seed: Optional[int]
    out: Optional[str]
    member_index: int


def _train_one(job: _TrainJob) -> TrainedMember:
    run = load_run_config(job.run_path, seed_override=job.seed, out_override=job.out)
    return train_member(run.model, run.dataset, run.training, job.member_index)


def cmd_train(run: RunConfig, jobs: int, args) -> int:
    out = run.out_dir
    (out / "members").mkdir(parents=True, exist_ok=True)
    digest = run.member_digest()
    ledger = CostLedger(timers_enabled=args.timers)
    indices = list(range(1, run.ensemble.I + 1))
    if jobs > 1 and len(indices) > 1:
        work = [_TrainJob(run_path=args.config, seed=args.seed, out=args.out, member_index=i)
                for i in indices]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            members = list(pool.map(_train_one, work))
        ledger.training_runs += len(members)
        for m in members:
            ledger.record("train", "forward", run.training.epochs * m.subset_indices.size)
            ledger.record("train", "backward", run.training.epochs * m.subset_indices.size)
    else:
        members = [train_member(run.model, run.dataset, run.training, i, ledger=ledger)
                   for i in indices]
    manifest = {"experiment": run.experiment, "config_digest": digest,
                "members": [], "n_train": run.dataset.n, "n_test": run.test_dataset.n}
    for member in members:
        path = _member_path(out, member.member_index)
        _save_member(path, member, digest)
        entry = {"index": member.member_index, "file": str(path.relative_to(out)),
                 "seed": member.seed, "subset_size": int(member.subset_indices.size),
                 "checkpoints": {}}
        for epoch, params in sorted(member.checkpoints.items()):
            cpath = _ckpt_path(out, member.member_index, epoch)
            ckpt_member = TrainedMember(member_index=member.member_index,
                                        spec=member.spec, params=params,
                                        subset_indices=member.subset_indices,
                                        seed=member.seed)
            _save_member(cpath, ckpt_member, digest)
            entry["checkpoints"][str(epoch)] = str(cpath.relative_to(out))
        manifest["members"].append(entry)
    _json_dump(out / "manifest.json", manifest)
    _json_dump(out / "train_ledger.json", ledger.as_dict())
    if args.timers:
        _json_dump(out / "train_timings.json",
                   {"wall_clock_seconds": dict(sorted(ledger.wall_clock.items()))})
    print(f"trained {len(members)} members -> {out / 'manifest.json'}")
    return 0


def _load_members(run: RunConfig) -> list[TrainedMember]:
    manifest_path = run.out_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no manifest at {manifest_path}; run `train` first")
    manifest = json.loads(manifest_path.read_text())
    if manifest["config_digest"] != run.member_digest():
        raise ConfigError("manifest was produced by a different config")
    members = []
    for entry in manifest["members"]:
        ckpts = {int(e): run.out_dir / p for e, p in entry.get("checkpoints", {}).items()}
        members.append(_load_member(run.out_dir / entry["file"], run.model,
                                    manifest["config_digest"], ckpts))
    return members


def _strategy_digest(run: RunConfig) -> str:
    from .data import config_digest

    e = run.ensemble
    return config_digest({
        "config": run.digest(), "strategy": e.strategy, "method": e.method,
        "I": e.I, "D": e.D, "L": e.L, "seed": e.seed,
        "proj_dim": e.proj_dim, "projection": e.projection,
        "output_fn": e.output_fn.value,
    })


def _write_summary(path: Path, att: AttributionMatrix, top_k: int = 5,
                   max_tests: int = 10) -> None:
    lines = [f"method: {att.method}",
             f"scores: {att.scores.shape[0]} train x {att.scores.shape[1]} test", ""]
    for t in range(min(max_tests, att.scores.shape[1])):
        order = np.argsort(att.scores[:, t])[::-1][:top_k]
        ranked = ", ".join(f"{j} ({att.scores[j, t]:+.4g})" for j in order)
        lines.append(f"test {t}: top {top_k} influential train indices: {ranked}")
    path.write_text("\n".join(lines) + "\n")


def cmd_attribute(run: RunConfig, jobs: int, args) -> int:
    members = _load_members(run)
    if len(members) < run.ensemble.I:
        raise ConfigError(f"manifest has {len(members)} members, config wants I={run.ensemble.I}")
    members = members[: run.ensemble.I]
    ledger = CostLedger(timers_enabled=args.timers)
    att = run_strategy(members, run.dataset, run.test_dataset, run.ensemble,
                       ledger=ledger, jobs=jobs)
    out = run.out_dir
    _save_attribution(out / "attribution.bin", att, run, _strategy_digest(run))
    _json_dump(out / "attribute_ledger.json", ledger.as_dict())
    if args.timers:
        _json_dump(out / "attribute_timings.json",
                   {"wall_clock_seconds": dict(sorted(ledger.wall_clock.items()))})
    report = verify_ledger(run.ensemble.strategy, run.ensemble.method,
                           run.ensemble.I, run.ensemble.D, run.ensemble.L,
                           run.dataset.n, run.test_dataset.n, ledger,
                           n_checkpoints=max(len(run.ensemble.checkpoint_epochs), 1))
    _json_dump(out / "ledger_check.json", report.as_dict())
    _write_summary(out / "summary.txt", att)
    print(f"attribution -> {out / 'attribution.bin'} (pass counts "
          f"{'verified' if report.ok else 'MISMATCHED'})")
    return 0


def _ground_truth_for(run: RunConfig, jobs: int, gt_path: Optional[Path]) -> LdsGroundTruth:
    path = gt_path if gt_path is not None else run.out_dir / "ground_truth.bin"
    if path.exists():
        gt = _load_ground_truth(path)
        if gt.dataset_digest != run.dataset.digest():
            raise ConfigError(f"{path}: ground truth was built on a different dataset")
        return gt
    gt = build_lds_ground_truth(run.model, run.dataset, run.test_dataset,
                                m=run.eval_m, alpha=run.eval_alpha,
                                retrain_config=run.training, seed=run.eval_seed,
                                output_fn=run.ensemble.output_fn, jobs=jobs)
    _save_ground_truth(path, gt)
    return gt


def _write_lds_outputs(out: Path, report: LdsReport, stem: str = "lds") -> None:
    _json_dump(out / f"{stem}.json", report.as_dict())
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["test_index", "lds", "constant_flag"])
        for t, (value, flag) in enumerate(zip(report.per_test, report.constant_flags)):
            writer.writerow([t, repr(float(value)), int(flag)])


def cmd_lds(run: RunConfig, jobs: int, args) -> int:
    att_path = run.out_dir / "attribution.bin"
    if not att_path.exists():
        raise ConfigError(f"no attribution at {att_path}; run `attribute` first")
    att, header = _load_attribution(att_path)
    if header["dataset_digest"] != run.dataset_pair_digest():
        raise ConfigError("attribution artifact was produced on different data")
    gt = _ground_truth_for(run, jobs, Path(args.ground_truth) if args.ground_truth else None)
    report = lds(att, gt)
    _write_lds_outputs(run.out_dir, report)
    print(f"mean LDS = {report.mean:.6f} over {report.per_test.size} test points "
          f"-> {run.out_dir / 'lds.json'}")
    return 0


def cmd_oracle(run: RunConfig, jobs: int, args) -> int:
    att = loo_oracle(run.model, run.dataset, run.test_dataset, run.training,
                     output_fn=run.ensemble.output_fn, jobs=jobs)
    out = run.out_dir
    out.mkdir(parents=True, exist_ok=True)
    _save_attribution(out / "loo_oracle.bin", att, run, _strategy_digest(run))
    _write_summary(out / "loo_summary.txt", att)
    print(f"leave-one-out oracle -> {out / 'loo_oracle.bin'}")
    return 0


def _unit_costs_from(run: RunConfig) -> UnitCosts:
    section = run.unit_costs or {}
    return UnitCosts(
        t_train=section.get("t_train", 1.0),
        t_train_base=section.get("t_train_base", 1.0),
        t_train_lora=section.get("t_train_lora", 0.1),
        t_serving=section.get("t_serving", 1.0),
        t_serving_forward_only=section.get("t_serving_forward_only", 0.5),
        t_serving_lora=section.get("t_serving_lora", 0.5),
    )


def cmd_costs(run: RunConfig, jobs: int, args) -> int:
    e = run.ensemble
    units = _unit_costs_from(run)
    predicted = predict_costs(e.strategy, e.I, e.D, e.L, units,
                              n_checkpoints=max(len(e.checkpoint_epochs), 1))
    counts = param_count(run.model, members=e.I, dropout_passes=e.D,
                         lora_sets=e.L if e.strategy == "lora" else 0,
                         rank=e.lora_rank,
                         targets=list(e.lora_targets) if e.lora_targets else None)
    payload = {
        "strategy": e.strategy, "I": e.I, "D": e.D, "L": e.L,
        "predicted": predicted,
        "parameter_count": {
            "base": counts.base_params,
            "adapters_total": counts.adapter_params_total,
            "total": counts.total,
        },
    }
    run.out_dir.mkdir(parents=True, exist_ok=True)
    _json_dump(run.out_dir / "costs.json", payload)
    rows = [("training", predicted["training"]), ("serving", predicted["serving"]),
            ("total", predicted["total"]),
            ("parameters", counts.total)]
    width = max(len(r[0]) for r in rows)
    table = "\n".join(f"{name:<{width}}  {value:g}" for name, value in rows)
    print(table)
    return 0


def cmd_sweep(run: RunConfig, jobs: int, args) -> int:
    if run.sweep_axis is None or not run.sweep_values:
        raise ConfigError("config has no sweep section (axis + values)")
    axis, values = run.sweep_axis, run.sweep_values
    out = run.out_dir
    out.mkdir(parents=True, exist_ok=True)
    max_i = max(values) if axis == "I" else run.ensemble.I
    base_members = [train_member(run.model, run.dataset, run.training, i)
                    for i in range(1, max_i + 1)]
    gt = _ground_truth_for(run, jobs, Path(args.ground_truth) if args.ground_truth else None)
    units = _unit_costs_from(run)
    rows = []
    for value in values:
        e = run.ensemble
        if axis == "I":
            e = replace(e, I=value)
        elif axis == "D":
            e = replace(e, D=value)
        else:
            e = replace(e, L=value)
        ledger = CostLedger()
        status = "ok"
        mean_lds = ""
        measured_fwd = measured_bwd = 0
        predicted = {"training": "", "serving": ""}
        counts_total = ""
        try:
            att = run_strategy(base_members[: e.I], run.dataset, run.test_dataset, e,
                               ledger=ledger, jobs=jobs)
            report = lds(att, gt)
            mean_lds = repr(report.mean)
            predicted = predict_costs(e.strategy, e.I, e.D, e.L, units,
                                      n_checkpoints=max(len(e.checkpoint_epochs), 1))
            counts = param_count(run.model, members=e.I, dropout_passes=e.D,
                                 lora_sets=e.L if e.strategy == "lora" else 0,
                                 rank=e.lora_rank,
                                 targets=list(e.lora_targets) if e.lora_targets else None)
            counts_total = counts.total
            measured_fwd, measured_bwd = ledger.serve_forward, ledger.serve_backward
        except (NumericError, TrainingDivergence, ConfigError) as exc:
            status = f"failed: {exc}"
        rows.append([e.strategy, e.method, e.I, e.D, e.L, mean_lds,
                     predicted["training"], predicted["serving"], counts_total,
                     measured_fwd, measured_bwd, status])
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "method", "I", "D", "L", "mean_lds",
                         "predicted_training", "predicted_serving",
                         "parameter_count", "serve_forward", "serve_backward",
                         "status"])
        writer.writerows(rows)
    print(f"swept {axis} over {values} -> {out / 'sweep.csv'}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attribens",
        description="Training data attribution with efficient ensembling.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("train", cmd_train), ("attribute", cmd_attribute),
                     ("lds", cmd_lds), ("sweep", cmd_sweep),
                     ("costs", cmd_costs), ("oracle", cmd_oracle)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--ground-truth", default=None,
                       help="path to a saved LDS ground-truth artifact")
        p.add_argument("--timers", action="store_true",
                       help="also record wall-clock timings (separate file)")
        p.set_defaults(fn=fn)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    _setup_logging()
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        run = load_run_config(args.config, seed_override=args.seed,
                              out_override=args.out)
        run.out_dir.mkdir(parents=True, exist_ok=True)
        return args.fn(run, max(1, args.jobs), args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, TrainingDivergence) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
