"""Acceptance length, positional acceptance, calibration and cost-model speedup."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

from .engine import EngineConfig, GenerationTrace
from .models import InvalidInputError
from .tree import ROOT


@dataclass(frozen=True)
class CostModel:
    """Relative cost of one cycle; a target forward pass is the unit."""

    draft_step_cost: float = 0.05
    target_step_cost: float = 1.0
    per_token_overhead: float = 0.0

    def __post_init__(self):
        for name in ("draft_step_cost", "target_step_cost", "per_token_overhead"):
            x = getattr(self, name)
            if not math.isfinite(x) or x < 0:
                raise InvalidInputError(f"{name} must be finite and non-negative")
        if self.target_step_cost <= 0:
            raise InvalidInputError("target_step_cost must be positive")


def _cycles(traces: Sequence[GenerationTrace]):
    for tr in traces:
        yield from tr.cycles


def average_acceptance_length(traces: Sequence[GenerationTrace]) -> float:
    lengths = [c.cycle_length for c in _cycles(traces)]
    if not lengths:
        raise InvalidInputError("no cycles to average over")
    return sum(lengths) / len(lengths)


def speedup_estimate(tau: float, cfg: EngineConfig, cost: CostModel) -> float:
    """Tokens per cycle over cycle cost, relative to one token per target step."""
    if tau < 1:
        raise InvalidInputError("tau must be at least 1")
    depth = 0 if cfg.mode == "vanilla" else cfg.depth
    cycle_cost = cost.target_step_cost + depth * cost.draft_step_cost + cost.per_token_overhead
    return tau * cost.target_step_cost / cycle_cost


@dataclass
class PositionStats:
    accepted: int = 0
    trials: int = 0
    reached: int = 0

    @property
    def rate(self) -> float:
        return self.accepted / self.trials if self.trials else math.nan

    @property
    def not_reached(self) -> int:
        return self.trials - self.reached


def positional_acceptance(traces: Sequence[GenerationTrace]) -> dict[tuple[int, int], PositionStats]:
    """Acceptance per (depth, value rank within depth) draft position.

    Every time a position is present in a draft counts as a trial.  A trial
    is "reached" when the position's parent was on the accepted path, i.e.
    when the token was actually eligible for acceptance.
    """
    out: dict[tuple[int, int], PositionStats] = defaultdict(PositionStats)
    for cyc in _cycles(traces):
        d = cyc.draft
        on_path = set(cyc.outcome.accepted_positions)
        for i in range(len(d)):
            st = out[(d.depths[i], d.ranks[i])]
            st.trials += 1
            par = d.parents[i]
            if par == ROOT or par in on_path:
                st.reached += 1
            if i in on_path:
                st.accepted += 1
    return dict(sorted(out.items()))


@dataclass
class CalibrationBin:
    lo: float
    hi: float
    mean_confidence: float
    acceptance_rate: float
    count: int

    def to_dict(self) -> dict:
        return {
            "bin_lo": self.lo,
            "bin_hi": self.hi,
            "mean_conf": None if self.count == 0 else self.mean_confidence,
            "acc_rate": None if self.count == 0 else self.acceptance_rate,
            "count": self.count,
        }


def first_attempts(traces: Sequence[GenerationTrace]):
    """(confidence, accepted) for the first child tried at every node the verifier reached.

    Later siblings are judged against a residual target, so their outcomes
    do not measure the draft's calibration.
    """
    for cyc in _cycles(traces):
        conf = cyc.draft.confidences
        for pos, ok, attempt in cyc.outcome.tested:
            if attempt == 0:
                yield conf[pos], ok


def calibration_bins(traces: Sequence[GenerationTrace], n_bins: int = 10) -> list[CalibrationBin]:
    """Empirical acceptance rate per equal-width confidence bin; empty bins carry NaN."""
    if n_bins < 2:
        raise InvalidInputError("need at least two bins")
    sums = [0.0] * n_bins
    hits = [0] * n_bins
    counts = [0] * n_bins
    for conf, ok in first_attempts(traces):
        b = min(int(conf * n_bins), n_bins - 1)
        sums[b] += conf
        hits[b] += ok
        counts[b] += 1
    return [
        CalibrationBin(
            b / n_bins,
            (b + 1) / n_bins,
            sums[b] / counts[b] if counts[b] else math.nan,
            hits[b] / counts[b] if counts[b] else math.nan,
            counts[b],
        )
        for b in range(n_bins)
    ]


@dataclass
class RunReport:
    tau: float
    speedup_estimate: float
    positional_acceptance: dict[tuple[int, int], PositionStats]
    calibration_bins: list[CalibrationBin]
    config: EngineConfig
    n_prompts: int = 0
    n_cycles: int = 0
    cost: CostModel = field(default_factory=CostModel)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "speedup_estimate": self.speedup_estimate,
            "n_prompts": self.n_prompts,
            "n_cycles": self.n_cycles,
            "cost_model": {
                "draft_step_cost": self.cost.draft_step_cost,
                "target_step_cost": self.cost.target_step_cost,
                "per_token_overhead": self.cost.per_token_overhead,
            },
            "positional_acceptance": [
                {
                    "depth": d,
                    "rank": r,
                    "accepted": st.accepted,
                    "trials": st.trials,
                    "not_reached": st.not_reached,
                    "rate": None if st.trials == 0 else st.rate,
                }
                for (d, r), st in self.positional_acceptance.items()
            ],
            "calibration_bins": [b.to_dict() for b in self.calibration_bins],
            "config": self.config.to_dict(),
        }


def build_report(traces: Sequence[GenerationTrace], cfg: EngineConfig, cost: CostModel | None = None,
                 n_bins: int = 10) -> RunReport:
    cost = cost or CostModel()
    tau = average_acceptance_length(traces)
    return RunReport(
        tau=tau,
        speedup_estimate=speedup_estimate(tau, cfg, cost),
        positional_acceptance=positional_acceptance(traces),
        calibration_bins=calibration_bins(traces, n_bins),
        config=cfg,
        n_prompts=len(traces),
        n_cycles=sum(len(t.cycles) for t in traces),
        cost=cost,
    )
