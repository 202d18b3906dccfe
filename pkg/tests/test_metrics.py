import math

import pytest

from specdraft.engine import Cycle, EngineConfig, GenerationTrace, generate
from specdraft.metrics import (
    CostModel,
    average_acceptance_length,
    build_report,
    calibration_bins,
    positional_acceptance,
    speedup_estimate,
)
from specdraft.models import DerivedDraftModel, Distortion, InvalidInputError, random_model
from specdraft.tree import empty_draft
from specdraft.verify import VerificationOutcome


def fake_trace(lengths):
    cycles = [Cycle(empty_draft(), VerificationOutcome([0] * (n - 1), 0, [], [])) for n in lengths]
    return GenerationTrace((), [], cycles, EngineConfig())


def test_tau_mean():
    assert average_acceptance_length([fake_trace([3, 5, 4])]) == 4.0
    with pytest.raises(InvalidInputError):
        average_acceptance_length([])


def test_vanilla_tau_is_one():
    m = random_model(4, 1, 0)
    trace = generate(m, m, (0,), EngineConfig(mode="vanilla", temperature=1.0, max_tokens=30))
    assert average_acceptance_length([trace]) == 1.0


def test_speedup_examples():
    cfg = EngineConfig(depth=6)
    assert speedup_estimate(4.65, cfg, CostModel(0.05)) == pytest.approx(4.65 / 1.30)
    assert speedup_estimate(4.65, cfg, CostModel(0.0)) == pytest.approx(4.65)
    assert speedup_estimate(1.0, EngineConfig(mode="vanilla"), CostModel()) == 1.0
    assert speedup_estimate(3.0, cfg, CostModel(0.0, per_token_overhead=0.5)) == pytest.approx(2.0)


def test_cost_model_validation():
    with pytest.raises(InvalidInputError):
        CostModel(-0.1)


def test_perfect_draft_top_position():
    m = random_model(5, 1, 0, 0.5)
    traces = [generate(m, m, (t,), EngineConfig(max_tokens=30)) for t in range(5)]
    pa = positional_acceptance(traces)
    assert pa[(1, 1)].rate == 1.0


def mix_traces(n=120, temperature=1.0):
    out = []
    for i in range(n):
        target = random_model(6, 2, 100 + i, 0.5)
        draft = DerivedDraftModel(target, Distortion.parse("mix:0.3"))
        out.append(generate(target, draft, (0, 1), EngineConfig(temperature=temperature, max_tokens=48, seed=i)))
    return out


def test_positional_upper_left_beats_lower_right():
    pa = positional_acceptance(mix_traces())
    assert pa[(1, 1)].rate >= pa[(2, 1)].rate >= pa[(4, 1)].rate
    assert pa[(1, 1)].rate > pa[(1, 2)].rate
    assert all(st.reached <= st.trials and st.accepted <= st.reached for st in pa.values())


def test_positional_variance_across_prompts():
    rates = [positional_acceptance([t])[(1, 1)].rate for t in mix_traces()]
    mean = sum(rates) / len(rates)
    assert sum((r - mean) ** 2 for r in rates) > 0


def test_calibration_perfect_draft_greedy():
    m = random_model(5, 2, 1, 0.5)
    traces = [generate(m, m, (t, t), EngineConfig(max_tokens=40)) for t in range(5)]
    bins = calibration_bins(traces, 10)
    filled = [b for b in bins if b.count]
    assert filled and all(b.acceptance_rate == 1.0 for b in filled)


def test_calibration_mix_trend():
    bins = [b for b in calibration_bins(mix_traces(), 10) if b.count >= 50]
    rates = [b.acceptance_rate for b in bins]
    assert rates == sorted(rates)


def test_empty_bins_marked():
    bins = calibration_bins([fake_trace([1])], 4)
    assert all(b.count == 0 and math.isnan(b.acceptance_rate) for b in bins)
    d = bins[0].to_dict()
    assert d["acc_rate"] is None and d["count"] == 0
    with pytest.raises(InvalidInputError):
        calibration_bins([], 1)


def test_report_dict():
    traces = mix_traces(5)
    rep = build_report(traces, traces[0].config).to_dict()
    assert rep["n_prompts"] == 5 and rep["tau"] >= 1
    assert {"bin_lo", "bin_hi", "mean_conf", "acc_rate", "count"} == set(rep["calibration_bins"][0])
