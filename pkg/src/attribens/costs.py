"""Deterministic cost model: per-sample pass counters, optional wall-clock
timers, closed-form cost prediction, and ledger verification.

Counters, not seconds, are the machine-checkable form of the efficiency
claims: a "pass" is one sample (or one sequence) through the network.
Timers are purely informational and never feed back into results.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

from .errors import ConfigError

__all__ = [
    "CostLedger",
    "record_pass",
    "UnitCosts",
    "predict_costs",
    "expected_counters",
    "verify_ledger",
    "VerifyReport",
]

_COUNTER_KEYS = ("train_forward", "train_backward", "serve_forward", "serve_backward")


@dataclass
class CostLedger:
    train_forward: int = 0
    train_backward: int = 0
    serve_forward: int = 0
    serve_backward: int = 0
    training_runs: int = 0
    lora_finetune_runs: int = 0
    cg_iterations: int = 0
    timers_enabled: bool = False
    wall_clock: dict[str, float] = field(default_factory=dict)

    def record(self, phase: str, kind: str, n_samples: int) -> None:
        if n_samples < 0:
            raise ValueError("pass counts are non-negative")
        key = f"{phase}_{kind}"
        if key not in _COUNTER_KEYS:
            raise ValueError(f"unknown counter {key!r}")
        setattr(self, key, getattr(self, key) + int(n_samples))

    def merge(self, other: "CostLedger") -> "CostLedger":
        """Associative, commutative accumulation of another ledger."""
        for key in _COUNTER_KEYS + ("training_runs", "lora_finetune_runs", "cg_iterations"):
            setattr(self, key, getattr(self, key) + getattr(other, key))
        for phase, seconds in other.wall_clock.items():
            self.wall_clock[phase] = self.wall_clock.get(phase, 0.0) + seconds
        return self

    @contextmanager
    def timer(self, phase: str):
        if not self.timers_enabled:
            yield
            return
        start = time.perf_counter()
        try:
            yield
        finally:
            self.wall_clock[phase] = (
                self.wall_clock.get(phase, 0.0) + time.perf_counter() - start
            )

    def counters(self) -> dict[str, int]:
        return {
            key: getattr(self, key)
            for key in _COUNTER_KEYS + ("training_runs", "lora_finetune_runs", "cg_iterations")
        }

    def as_dict(self, include_timers: bool = False) -> dict:
        out: dict = dict(self.counters())
        if include_timers and self.wall_clock:
            out["wall_clock_seconds"] = dict(sorted(self.wall_clock.items()))
        return out


def record_pass(ledger: CostLedger, phase: str, kind: str, n_samples: int) -> None:
    ledger.record(phase, kind, n_samples)


@dataclass(frozen=True)
class UnitCosts:
    """Abstract per-run costs, in whatever unit the caller measures."""

    t_train: float = 0.0
    t_train_base: float = 0.0
    t_train_lora: float = 0.0
    t_serving: float = 0.0
    t_serving_forward_only: float = 0.0
    t_serving_lora: float = 0.0

    def __post_init__(self):
        for name in ("t_train", "t_train_base", "t_train_lora", "t_serving",
                     "t_serving_forward_only", "t_serving_lora"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def predict_costs(strategy: str, I: int, D: int, L: int, units: UnitCosts,
                  n_checkpoints: int = 1) -> dict[str, float]:
    """Closed-form training and serving cost totals per strategy.

    naive / dropout / dropout_forward_only train I models; lora trains
    I bases plus I*L adapter fine-tunes. Serving: naive I, dropout I*D,
    forward-only I + I*(D-1) cheaper passes, lora I*L adapter passes.
    Checkpoint reuse serves like naive over I*n_checkpoints units with a
    single training run per member.
    """
    if I < 1 or D < 1 or L < 0 or n_checkpoints < 1:
        raise ConfigError("ensemble shape out of range")
    if strategy in ("naive", "dropout", "dropout_forward_only"):
        training = I * units.t_train
    elif strategy == "lora":
        if L < 1:
            raise ConfigError("lora strategy requires L >= 1")
        training = I * units.t_train_base + I * L * units.t_train_lora
    elif strategy == "checkpoints":
        training = I * units.t_train
    else:
        raise ConfigError(f"unknown strategy {strategy!r}")

    if strategy == "naive":
        serving = I * units.t_serving
    elif strategy == "dropout":
        serving = I * D * units.t_serving
    elif strategy == "dropout_forward_only":
        serving = I * units.t_serving + I * (D - 1) * units.t_serving_forward_only
    elif strategy == "lora":
        serving = I * L * units.t_serving_lora
    else:  # checkpoints
        serving = I * n_checkpoints * D * units.t_serving

    return {"training": training, "serving": serving, "total": training + serving}


def expected_counters(strategy: str, method: str, I: int, D: int, L: int,
                      n_train: int, n_test: int,
                      n_checkpoints: int = 1,
                      cg_iterations: int = 0) -> dict[str, int]:
    """Exact serving-pass counts implied by a strategy/method pair.

    Feature construction takes one forward and one backward per sample
    per unit; the reweighting diagonal adds one forward per training
    sample per (possibly masked) pass. Influence solves add tangent
    forwards and backwards per conjugate-gradient iteration, which are
    data dependent and therefore taken from the measured ledger.
    """
    if strategy == "naive":
        units = I
        q_passes = I
    elif strategy == "dropout":
        units = I * D
        q_passes = I * D
    elif strategy == "dropout_forward_only":
        if method != "trak":
            raise ConfigError("forward-only variant is specific to trak")
        units = I
        q_passes = I * D
    elif strategy == "lora":
        units = I * L
        q_passes = I * L
    elif strategy == "checkpoints":
        units = I * n_checkpoints * D
        q_passes = I * n_checkpoints * D
    else:
        raise ConfigError(f"unknown strategy {strategy!r}")

    both = n_train + n_test
    if method == "trak":
        return {
            "serve_forward": units * both + q_passes * n_train,
            "serve_backward": units * both,
        }
    if method in ("grad_dot", "grad_cos"):
        return {"serve_forward": units * both, "serve_backward": units * both}
    if method == "influence_cg":
        return {
            "serve_forward": units * both + cg_iterations * n_train,
            "serve_backward": units * both + cg_iterations * n_train,
        }
    raise ConfigError(f"unknown method {method!r}")


@dataclass(frozen=True)
class VerifyReport:
    ok: bool
    expected: dict[str, int]
    measured: dict[str, int]
    mismatches: list[str]

    def as_dict(self) -> dict:
        return {
            "ok": self.ok,
            "expected": dict(self.expected),
            "measured": dict(self.measured),
            "mismatches": list(self.mismatches),
        }


def verify_ledger(strategy: str, method: str, I: int, D: int, L: int,
                  n_train: int, n_test: int, measured: CostLedger,
                  n_checkpoints: int = 1) -> VerifyReport:
    """Exact integer comparison of measured serving counters against the
    closed-form expectations."""
    expected = expected_counters(strategy, method, I, D, L, n_train, n_test,
                                 n_checkpoints=n_checkpoints,
                                 cg_iterations=measured.cg_iterations)
    got = {key: getattr(measured, key) for key in expected}
    mismatches = [
        f"{key}: expected {expected[key]}, measured {got[key]}"
        for key in expected if expected[key] != got[key]
    ]
    return VerifyReport(ok=not mismatches, expected=expected, measured=got,
                        mismatches=mismatches)
