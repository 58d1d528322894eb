"""End-to-end cascade evaluation on logged outputs.

Every number here is computed from the outputs the routed model actually
produced for each record; nothing is simulated from global accuracies.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .datamodel import CostModel, InferenceRecord, Outcomes
from .exceptions import DiagnosticUndefinedError
from .routing import (
    Direction,
    RoutingPolicy,
    ThresholdSweep,
    mean_cost,
    micro_f1_from_totals,
)

STATISTICS = ("cost", "micro_f1", "cost_saving_vs_large", "escalation_fraction")


def micro_f1(counts) -> float:
    """Pooled F1 = TP / (TP + (FP + FN) / 2); 0 when there is nothing to score."""
    counts = np.asarray(counts, dtype=np.int64).reshape(-1, 3)
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    tp, fp, fn = counts.sum(axis=0)
    return float(micro_f1_from_totals(tp, fp, fn))


@dataclass(frozen=True)
class CascadeReport:
    policy: dict
    total_cost: float
    micro_f1: float
    escalation_fraction: float
    per_entity_f1: dict
    n: int
    tp: int
    fp: int
    fn: int
    ci: dict = field(default_factory=dict)

    def metrics(self) -> dict:
        """Everything except the policy descriptor and CIs."""
        out = asdict(self)
        out.pop("policy")
        out.pop("ci")
        return out

    def to_json(self) -> dict:
        out = asdict(self)
        if not self.ci:
            out.pop("ci")
        return out


def per_entity_f1(by_entity_counts: np.ndarray, schema: Sequence[str]) -> dict:
    """Micro-F1 per entity type; types with no support at all are omitted."""
    totals = np.asarray(by_entity_counts).sum(axis=0)
    out = {}
    for name, (tp, fp, fn) in zip(schema, totals):
        if tp + fp + fn > 0:
            out[name] = float(micro_f1_from_totals(tp, fp, fn))
    return out


def evaluate_decisions(
    outcomes: Outcomes, escalate, cost_model: CostModel, descriptor: dict | None = None
) -> CascadeReport:
    escalate = np.asarray(escalate, dtype=bool)
    if escalate.shape != (len(outcomes),):
        raise ValueError("one decision per record is required")
    n = len(outcomes)
    k = int(escalate.sum())
    phi = k / n if n else 0.0
    tp, fp, fn = (int(x) for x in outcomes.routed(escalate).sum(axis=0))
    return CascadeReport(
        policy=dict(descriptor or {}),
        total_cost=float(mean_cost(phi, cost_model)),
        micro_f1=float(micro_f1_from_totals(tp, fp, fn)),
        escalation_fraction=phi,
        per_entity_f1=per_entity_f1(outcomes.routed_by_entity(escalate), outcomes.schema),
        n=n,
        tp=tp,
        fp=fp,
        fn=fn,
    )


def evaluate_cascade(
    policy: RoutingPolicy,
    records: Sequence[InferenceRecord],
    cost_model: CostModel,
    *,
    outcomes: Outcomes | None = None,
) -> CascadeReport:
    outcomes = outcomes if outcomes is not None else Outcomes.from_records(records)
    return evaluate_decisions(outcomes, policy.decide(records), cost_model, policy.to_json())


def single_model_report(outcomes: Outcomes, model: str, cost_model: CostModel) -> CascadeReport:
    escalate = np.full(len(outcomes), model == "large")
    return evaluate_decisions(outcomes, escalate, cost_model, {"name": f"{model}-only"})


# -- Pareto sweep -----------------------------------------------------------


@dataclass(frozen=True)
class ParetoCurve:
    """(threshold, cost, micro_f1, escalation_fraction) points sorted by cost."""

    points: tuple[tuple[float, float, float, float], ...]

    def frontier(self) -> list[tuple[float, float, float, float]]:
        """Points not dominated in (lower cost, higher F1)."""
        best = -math.inf
        out = []
        for p in self.points:
            if p[2] > best:
                out.append(p)
                best = p[2]
        return out

    def to_csv(self) -> str:
        rows = ["threshold,cost,micro_f1,escalation_fraction"]
        rows += [f"{t!r},{c!r},{f!r},{e!r}" for t, c, f, e in self.points]
        return "\n".join(rows) + "\n"


def pareto_sweep(
    scores, outcomes: Outcomes, cost_model: CostModel, direction: Direction = Direction.ABOVE
) -> ParetoCurve:
    sweep = ThresholdSweep(scores, outcomes.small, outcomes.large, direction)
    thresholds = sweep.candidates()
    phi, cost, f1 = sweep.evaluate(thresholds, cost_model)
    order = np.lexsort((np.arange(len(thresholds)), cost))
    return ParetoCurve(
        tuple(
            (float(thresholds[i]), float(cost[i]), float(f1[i]), float(phi[i])) for i in order
        )
    )


# -- bootstrap --------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapCI:
    point: float
    lower: float
    upper: float
    level: float = 0.95
    resamples: int = 1000
    seed: int = 0
    statistic: str = "micro_f1"

    def to_json(self) -> dict:
        return asdict(self)


def _statistic(totals: np.ndarray, k: np.ndarray, n: int, name: str, cost_model: CostModel):
    phi = k / n
    if name == "micro_f1":
        return micro_f1_from_totals(totals[..., 0], totals[..., 1], totals[..., 2])
    if name == "escalation_fraction":
        return phi
    cost = mean_cost(phi, cost_model)
    if name == "cost":
        return cost
    if name == "cost_saving_vs_large":
        return 1 - np.asarray(cost) / cost_model.large_cost
    raise ValueError(f"unknown statistic {name!r}; expected one of {STATISTICS}")


def bootstrap_ci(
    routed_counts,
    escalate,
    statistic: str,
    cost_model: CostModel,
    resamples: int = 1000,
    seed: int = 0,
    level: float = 0.95,
    chunk: int = 64,
) -> BootstrapCI:
    """Percentile bootstrap over records for a fixed set of routing decisions.

    Each resample draws records with replacement and recomputes the statistic
    from their routed counts.
    """
    routed_counts = np.asarray(routed_counts, dtype=np.int64)
    escalate = np.asarray(escalate, dtype=np.int64)
    n = routed_counts.shape[0]
    if n == 0:
        raise ValueError("cannot bootstrap an empty test set")
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    if statistic not in STATISTICS:
        raise ValueError(f"unknown statistic {statistic!r}; expected one of {STATISTICS}")
    point = float(
        _statistic(routed_counts.sum(axis=0), np.int64(escalate.sum()), n, statistic, cost_model)
    )
    rng = np.random.default_rng(seed)
    values = np.empty(resamples)
    for start in range(0, resamples, chunk):
        m = min(chunk, resamples - start)
        idx = rng.integers(0, n, size=(m, n))
        totals = routed_counts[idx].sum(axis=1)
        k = escalate[idx].sum(axis=1)
        values[start : start + m] = _statistic(totals, k, n, statistic, cost_model)
    tail = (1 - level) / 2 * 100
    lower, upper = np.percentile(values, [tail, 100 - tail])
    return BootstrapCI(point, float(lower), float(upper), level, resamples, seed, statistic)


def bootstrap_policy_ci(
    policy: RoutingPolicy,
    records: Sequence[InferenceRecord],
    statistic: str,
    cost_model: CostModel,
    resamples: int = 1000,
    seed: int = 0,
    level: float = 0.95,
    *,
    outcomes: Outcomes | None = None,
) -> BootstrapCI:
    outcomes = outcomes if outcomes is not None else Outcomes.from_records(records)
    escalate = policy.decide(records)
    return bootstrap_ci(
        outcomes.routed(escalate), escalate, statistic, cost_model, resamples, seed, level
    )


# -- re-pricing and diagnostics ----------------------------------------------


def cost_sensitivity(escalate_or_fraction, ratios: Sequence[float]) -> list[dict]:
    """Re-price fixed routing decisions under other large/small cost ratios (c_s = 1)."""
    if np.ndim(escalate_or_fraction) == 0:
        phi = float(escalate_or_fraction)
    else:
        phi = float(np.mean(np.asarray(escalate_or_fraction, dtype=bool)))
    rows = []
    for r in ratios:
        if r <= 1:
            raise ValueError(f"cost ratio must exceed 1, got {r}")
        cost = (1 - phi) + phi * r
        rows.append({"ratio": float(r), "cost": cost, "saving_vs_large": 1 - cost / r})
    return rows


@dataclass(frozen=True)
class AssumptionDiagnostic:
    f1_large_on_escalated: float
    f1_large_on_all: float
    gap: float
    n_escalated: int

    def to_json(self) -> dict:
        return asdict(self)


def assumption_ii_diagnostic(outcomes: Outcomes, escalate) -> AssumptionDiagnostic:
    """Large-model micro-F1 on the escalated subset versus the whole split."""
    escalate = np.asarray(escalate, dtype=bool)
    if not escalate.any():
        raise DiagnosticUndefinedError("policy escalates no records")
    on_esc = micro_f1(outcomes.large[escalate])
    on_all = micro_f1(outcomes.large)
    return AssumptionDiagnostic(on_esc, on_all, on_all - on_esc, int(escalate.sum()))


def per_entity_report(outcomes: Outcomes, escalate) -> dict:
    return per_entity_f1(outcomes.routed_by_entity(escalate), outcomes.schema)
