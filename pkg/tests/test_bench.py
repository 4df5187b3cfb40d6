import numpy as np
import pytest

from atp.bench import ScalingReport, loglog_slope, measured_run, memory_budget, predicted_ops, scaling_sweep
from atp.errors import InvalidInputError, MemoryBudgetError


def test_table_example():
    std = predicted_ops(512, 128, 128, 64, "standard")["attention"].multiplies
    low = predicted_ops(512, 128, 128, 64, "lowrank")["attention"].multiplies
    assert std == 2 * 512**2 * 64 == 33_554_432
    assert low == 2 * 128 * 512 * 64 == 8_388_608
    assert std // low == 4


def test_full_rank_attention_counts_coincide():
    L = 64
    std = predicted_ops(L, L, L, 16, "standard")["attention"]
    low = predicted_ops(L, L, L, 16, "lowrank")["attention"]
    assert std.multiplies == low.multiplies
    assert std.peak_values_held == low.peak_values_held == L * L


def test_doubling_length():
    for mode, factor in (("standard", 4), ("lowrank", 2)):
        a = predicted_ops(256, 32, 64, 32, mode)["attention"].multiplies
        b = predicted_ops(512, 32, 64, 32, mode)["attention"].multiplies
        assert b == factor * a


def test_memory_model_ratio():
    L, r = 1024, 128
    std = predicted_ops(L, r, 128, 64, "standard")["attention"].peak_values_held
    low = predicted_ops(L, r, 128, 64, "lowrank")["attention"].peak_values_held
    assert std == L * L and low == r * L and std // low == L // r


def test_predicted_ops_validation():
    with pytest.raises(InvalidInputError):
        predicted_ops(8, 9, 8, 4, "lowrank")
    with pytest.raises(InvalidInputError):
        predicted_ops(8, 2, 8, 4, "fast")
    with pytest.raises(InvalidInputError):
        predicted_ops(8, 2, 8, 5, "standard", heads=2)


@pytest.mark.parametrize("mode", ["standard", "lowrank"])
@pytest.mark.parametrize("heads", [1, 2])
def test_measured_equals_predicted(mode, heads):
    rec = measured_run(48, 6, 20, 8, mode, seed=1, repeats=1, inner_iters=3, heads=heads)
    pred = predicted_ops(48, 6, 20, 8, mode, 3, heads)
    for stage, c in rec.stages.items():
        assert c == pred[stage].to_dict(), stage
    assert rec.multiplies == pred["total"].multiplies
    assert rec.adds == pred["total"].adds
    assert rec.peak_values_held == pred["total"].peak_values_held
    assert rec.wall_ns > 0


def test_repeats_change_only_timing():
    a = measured_run(32, 4, 16, 8, "lowrank", repeats=1)
    b = measured_run(32, 4, 16, 8, "lowrank", repeats=5)
    assert {**a.counts_dict(), "repeats": 0} == {**b.counts_dict(), "repeats": 0}


def test_budget_refusal(monkeypatch):
    with pytest.raises(MemoryBudgetError) as info:
        measured_run(64, 4, 16, 8, "standard", budget_bytes=1000)
    assert info.value.predicted_bytes == 64 * 64 * 8
    monkeypatch.setenv("ATP_MEMORY_BUDGET_BYTES", "100")
    assert memory_budget() == 100
    with pytest.raises(MemoryBudgetError):
        measured_run(64, 4, 16, 8, "lowrank")
    monkeypatch.setenv("ATP_MEMORY_BUDGET_BYTES", "lots")
    with pytest.raises(InvalidInputError):
        memory_budget()


def test_sweep_report_layout():
    rep = scaling_sweep([32, 64, 128], 4, 16, 8, repeats=1)
    d = rep.to_dict()
    assert set(d) == {"config", "runs", "count_slopes", "timing"}
    assert d["count_slopes"]["standard"] == pytest.approx(2.0, abs=1e-12)
    assert d["count_slopes"]["lowrank"] == pytest.approx(1.0, abs=1e-12)
    assert "wall_ns" not in str(d["runs"])
    assert set(d["timing"]) == {"runs", "slopes"}
    assert len(rep.csv_rows()) == 1 + 6


def test_single_length_omits_slopes():
    d = scaling_sweep([32], 4, 16, 8, repeats=1).to_dict()
    assert "count_slopes" not in d and "slopes" not in d["timing"]
    assert len(d["runs"]) == 2


def test_sweep_validation():
    with pytest.raises(InvalidInputError):
        scaling_sweep([], 4, 16, 8)
    with pytest.raises(InvalidInputError):
        scaling_sweep([64, 32], 4, 16, 8)
    with pytest.raises(InvalidInputError):
        scaling_sweep([32], 4, 16, 8, seeds=[])


def test_parallel_sweep_counts_match_serial():
    a = scaling_sweep([32, 64], 4, 16, 8, seeds=(0, 1), repeats=1)
    b = scaling_sweep([32, 64], 4, 16, 8, seeds=(0, 1), repeats=1, parallel=True)
    assert a.to_dict()["runs"] == b.to_dict()["runs"]


def test_loglog_slope():
    xs = np.array([1, 2, 4, 8])
    assert loglog_slope(xs, 3 * xs**1.5) == pytest.approx(1.5)
    assert ScalingReport({}).wall_slopes() is None
