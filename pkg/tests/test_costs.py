"""Pass-counter ledger semantics and the closed-form cost model."""

import pytest

from attribens.costs import (
    CostLedger,
    UnitCosts,
    expected_counters,
    predict_costs,
    record_pass,
    verify_ledger,
)
from attribens.errors import ConfigError


def test_record_zero_is_noop():
    ledger = CostLedger()
    record_pass(ledger, "train", "forward", 0)
    assert ledger.counters() == CostLedger().counters()


def test_record_accumulates():
    ledger = CostLedger()
    record_pass(ledger, "train", "forward", 64)
    record_pass(ledger, "train", "backward", 64)
    assert ledger.train_forward == 64
    assert ledger.train_backward == 64


def test_merge_commutative():
    a1, a2 = CostLedger(), CostLedger()
    b1, b2 = CostLedger(), CostLedger()
    a1.record("serve", "forward", 3)
    b1.record("serve", "backward", 5)
    a2.record("serve", "forward", 3)
    b2.record("serve", "backward", 5)
    left = CostLedger().merge(a1).merge(b1)
    right = CostLedger().merge(b2).merge(a2)
    assert left.counters() == right.counters()


def test_negative_count_rejected():
    with pytest.raises(ValueError):
        CostLedger().record("serve", "forward", -1)


def test_timers_do_not_touch_counters():
    ledger = CostLedger(timers_enabled=True)
    with ledger.timer("serve"):
        ledger.record("serve", "forward", 2)
    assert ledger.serve_forward == 2
    assert "serve" in ledger.wall_clock
    silent = CostLedger(timers_enabled=False)
    with silent.timer("serve"):
        silent.record("serve", "forward", 2)
    assert silent.wall_clock == {}
    assert silent.counters() == ledger.counters()


# --- predict_costs: the six closed-form totals


def test_predict_naive_serving():
    units = UnitCosts(t_serving=2.0)
    assert predict_costs("naive", 5, 1, 1, units)["serving"] == 10.0


def test_predict_dropout_serving():
    units = UnitCosts(t_serving=2.0)
    assert predict_costs("dropout", 3, 4, 1, units)["serving"] == 24.0


def test_predict_forward_only_serving():
    units = UnitCosts(t_serving=4.0, t_serving_forward_only=1.0)
    out = predict_costs("dropout_forward_only", 2, 3, 1, units)
    assert out["serving"] == 2 * 4.0 + 2 * 2 * 1.0  # 12


def test_predict_lora_costs():
    units = UnitCosts(t_train_base=1.0, t_train_lora=0.25, t_serving_lora=0.5)
    out = predict_costs("lora", 1, 1, 3, units)
    assert out["training"] == 1.0 + 3 * 0.25
    assert out["serving"] == 3 * 0.5


def test_predict_training_linear_in_members():
    units = UnitCosts(t_train=7.0)
    assert predict_costs("naive", 4, 1, 1, units)["training"] == 28.0
    assert predict_costs("dropout", 4, 25, 1, units)["training"] == 28.0


def test_predict_rejects_bad_shapes():
    with pytest.raises(ConfigError):
        predict_costs("naive", 0, 1, 1, UnitCosts())
    with pytest.raises(ConfigError):
        predict_costs("warp", 1, 1, 1, UnitCosts())


# --- expected counters


def test_expected_naive_trak_backward():
    exp = expected_counters("naive", "trak", 1, 1, 1, 100, 10)
    assert exp["serve_backward"] == 110
    assert exp["serve_forward"] == 110 + 100


def test_expected_forward_only_independent_of_d():
    for d in (1, 5, 25):
        exp = expected_counters("dropout_forward_only", "trak", 2, d, 1, 50, 5)
        assert exp["serve_backward"] == 2 * 55
        assert exp["serve_forward"] == 2 * 55 + 2 * d * 50


def test_expected_dropout_scales_with_d():
    one = expected_counters("dropout", "trak", 2, 1, 1, 50, 5)
    two = expected_counters("dropout", "trak", 2, 2, 1, 50, 5)
    assert two["serve_backward"] == 2 * one["serve_backward"]


def test_verify_ledger_reports_mismatch():
    ledger = CostLedger()
    ledger.record("serve", "forward", 1)
    report = verify_ledger("naive", "grad_dot", 1, 1, 1, 10, 2, ledger)
    assert not report.ok
    assert any("serve_forward" in m for m in report.mismatches)


def test_verify_ledger_passes_exact():
    ledger = CostLedger()
    ledger.record("serve", "forward", 12)
    ledger.record("serve", "backward", 12)
    report = verify_ledger("naive", "grad_cos", 1, 1, 1, 10, 2, ledger)
    assert report.ok
