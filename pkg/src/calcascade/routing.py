"""Threshold routing policies and constrained threshold selection.

A policy scores a record, compares the score to a threshold, and sends it to
the small or the large model. Selection sweeps every threshold that changes
the routed set on a validation split and keeps the cheapest one whose
end-to-end micro-F1 meets the accuracy target.

Boundary convention: with ``direction="above"`` a score equal to the
threshold stays on the small model; with ``direction="below"`` it escalates.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .calibration import IsotonicModel, TemperatureModel, model_from_json
from .datamodel import CostModel, InferenceRecord, Outcomes, TokenStats, derive_correctness
from .exceptions import SelectionError, ValidationError
from .uncertainty import (
    SignalKind,
    margin_uncertainty,
    mean_entropy,
    mean_max_prob_confidence,
    record_signal,
)


class ScoreSource(str, enum.Enum):
    CALIBRATED_P = "calibrated_p"
    RAW_MARGIN = "raw_margin"
    MEAN_ENTROPY = "mean_entropy"
    MEAN_MAX_PROB = "mean_max_prob"

    @property
    def is_confidence(self) -> bool:
        return self is ScoreSource.MEAN_MAX_PROB

    @property
    def signal(self) -> SignalKind:
        return {
            ScoreSource.CALIBRATED_P: SignalKind.MARGIN,
            ScoreSource.RAW_MARGIN: SignalKind.MARGIN,
            ScoreSource.MEAN_ENTROPY: SignalKind.MEAN_ENTROPY,
            ScoreSource.MEAN_MAX_PROB: SignalKind.MEAN_MAX_PROB,
        }[self]


class Direction(str, enum.Enum):
    ABOVE = "above"  # escalate if score > threshold
    BELOW = "below"  # escalate if score <= threshold


def direction_for(source: ScoreSource) -> Direction:
    return Direction.BELOW if ScoreSource(source).is_confidence else Direction.ABOVE


def escalates(scores, threshold: float, direction: Direction) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    if Direction(direction) is Direction.ABOVE:
        return scores > threshold
    return scores <= threshold


_TOKEN_SIGNALS = {
    SignalKind.MARGIN: margin_uncertainty,
    SignalKind.MEAN_ENTROPY: mean_entropy,
    SignalKind.MEAN_MAX_PROB: mean_max_prob_confidence,
}


@dataclass(frozen=True)
class RoutingPolicy:
    score_source: ScoreSource
    threshold: float
    direction: Direction
    calibration_model: IsotonicModel | TemperatureModel | None = None

    def __post_init__(self):
        object.__setattr__(self, "score_source", ScoreSource(self.score_source))
        object.__setattr__(self, "direction", Direction(self.direction))
        object.__setattr__(self, "threshold", float(self.threshold))
        if self.direction is not direction_for(self.score_source):
            raise ValidationError(
                f"{self.score_source.value} scores require direction "
                f"{direction_for(self.score_source).value!r}"
            )
        if math.isnan(self.threshold):
            raise ValidationError("threshold must not be NaN")
        if self.score_source is ScoreSource.CALIBRATED_P and self.calibration_model is None:
            raise ValidationError("calibrated_p policies need a calibration model")

    def _from_signal(self, raw):
        if self.score_source is ScoreSource.CALIBRATED_P:
            return self.calibration_model.predict(raw)
        return raw

    def score_tokens(self, tokens: Sequence[TokenStats]) -> float:
        return float(self._from_signal(_TOKEN_SIGNALS[self.score_source.signal](tokens)))

    def score(self, record: InferenceRecord) -> float:
        return float(self._from_signal(record_signal(record, self.score_source.signal)))

    def scores(self, records: Sequence[InferenceRecord]) -> np.ndarray:
        raw = np.fromiter(
            (record_signal(r, self.score_source.signal) for r in records),
            dtype=float,
            count=len(records),
        )
        return np.asarray(self._from_signal(raw), dtype=float)

    def decide(self, records: Sequence[InferenceRecord]) -> np.ndarray:
        """Boolean escalation mask for ``records``."""
        return escalates(self.scores(records), self.threshold, self.direction)

    def to_json(self) -> dict:
        out = {
            "score": self.score_source.value,
            "direction": self.direction.value,
            "threshold": self.threshold,
        }
        if self.calibration_model is not None:
            out["calibration_model"] = self.calibration_model.to_json()
        return out

    @classmethod
    def from_json(cls, obj) -> RoutingPolicy:
        if not isinstance(obj, dict):
            raise ValidationError("policy must be a JSON object")
        unknown = set(obj) - {"score", "direction", "threshold", "calibration_model"}
        if unknown:
            raise ValidationError(f"unknown policy keys {sorted(unknown)}")
        try:
            model = obj.get("calibration_model")
            return cls(
                ScoreSource(obj["score"]),
                float(obj["threshold"]),
                Direction(obj["direction"]),
                None if model is None else model_from_json(model),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed policy: {exc}") from exc


def route(policy: RoutingPolicy, record: InferenceRecord) -> str:
    """Return ``"small"`` or ``"large"`` for one record."""
    esc = escalates(policy.score(record), policy.threshold, policy.direction)
    return "large" if bool(esc) else "small"


def save_policy(path: str | Path, policy: RoutingPolicy) -> None:
    Path(path).write_text(json.dumps(policy.to_json()) + "\n", encoding="utf-8")


def load_policy(path: str | Path) -> RoutingPolicy:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"policy file is not valid JSON: {exc}") from exc
    return RoutingPolicy.from_json(obj)


# -- threshold sweep --------------------------------------------------------


def micro_f1_from_totals(tp, fp, fn):
    """Micro-F1 from pooled counts; 0 where the denominator vanishes. Vectorized."""
    tp = np.asarray(tp, dtype=float)
    denom = 2 * tp + np.asarray(fp, dtype=float) + np.asarray(fn, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 0.0)
    return f1 if f1.ndim else float(f1)


def mean_cost(escalation_fraction, cost_model: CostModel):
    phi = np.asarray(escalation_fraction, dtype=float)
    out = (1 - phi) * cost_model.small_cost + phi * cost_model.large_cost
    return out if out.ndim else float(out)


class ThresholdSweep:
    """Exact tallies for every threshold on one scored record set.

    Escalated sets are suffixes (``above``) or prefixes (``below``) of the
    records sorted by score, so totals for any threshold come from cumulative
    sums over the sorted order; ties never straddle a threshold.
    """

    def __init__(self, scores, small_counts, large_counts, direction: Direction):
        self.scores = np.asarray(scores, dtype=float)
        if self.scores.ndim != 1 or self.scores.size == 0:
            raise SelectionError("need a non-empty 1-D score array")
        if not np.all(np.isfinite(self.scores)):
            raise SelectionError("scores must be finite")
        self.direction = Direction(direction)
        small_counts = np.asarray(small_counts, dtype=np.int64)
        large_counts = np.asarray(large_counts, dtype=np.int64)
        self.n = self.scores.size
        order = np.argsort(self.scores, kind="stable")
        self.sorted_scores = self.scores[order]
        self.base = small_counts.sum(axis=0)
        delta = (large_counts - small_counts)[order]
        # gain[k] = change in totals when the first k sorted records escalate
        self._prefix = np.vstack([np.zeros((1, 3), dtype=np.int64), np.cumsum(delta, axis=0)])
        self._total_delta = self._prefix[-1]

    def escalated_count(self, thresholds) -> np.ndarray:
        t = np.asarray(thresholds, dtype=float)
        below_or_equal = np.searchsorted(self.sorted_scores, t, side="right")
        if self.direction is Direction.ABOVE:
            return self.n - below_or_equal
        return below_or_equal

    def totals(self, thresholds) -> tuple[np.ndarray, np.ndarray]:
        """Escalated counts and (m, 3) pooled (tp, fp, fn) at each threshold."""
        k = np.atleast_1d(self.escalated_count(thresholds))
        if self.direction is Direction.ABOVE:
            gain = self._total_delta - self._prefix[self.n - k]
        else:
            gain = self._prefix[k]
        return k, self.base + gain

    def evaluate(self, thresholds, cost_model: CostModel):
        k, tot = self.totals(thresholds)
        phi = k / self.n
        return phi, mean_cost(phi, cost_model), micro_f1_from_totals(*tot.T)

    def candidates(self) -> np.ndarray:
        """Distinct scores plus the two sentinels, ordered by escalation count.

        Where a sentinel and an observed score give the same routed set the
        sentinel comes first so it wins ties.
        """
        distinct = np.unique(self.sorted_scores)
        if self.direction is Direction.ABOVE:
            # +inf keeps everything; thresholds descending escalate more and more
            return np.concatenate([[math.inf], distinct[::-1], [-math.inf]])
        return np.concatenate([[-math.inf], distinct[:-1], [math.inf], distinct[-1:]])


@dataclass(frozen=True)
class SelectionResult:
    policy: RoutingPolicy
    validation_cost: float
    validation_accuracy: float
    feasible: bool
    escalation_fraction: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.feasible and not self.validation_accuracy >= self.extra.get("tau", -math.inf):
            raise ValueError("feasible selection below target")

    def to_json(self) -> dict:
        out = {
            "feasible": self.feasible,
            "threshold": self.policy.threshold,
            "score": self.policy.score_source.value,
            "direction": self.policy.direction.value,
            "validation_cost": self.validation_cost,
            "validation_accuracy": self.validation_accuracy,
            "escalation_fraction": self.escalation_fraction,
        }
        out.update(self.extra)
        return out


def _pick(thresholds, phi, cost, acc, tau):
    """Index of the cheapest feasible candidate (ties: higher accuracy, then order).

    Falls back to the most accurate candidate when none is feasible; ties
    there go to the costlier candidate, so an unreachable target at large-only
    accuracy yields escalate-everything.
    """
    order = np.arange(len(thresholds))
    feasible = acc >= tau
    if feasible.any():
        idx = order[feasible]
        best = np.lexsort((idx, -acc[idx], cost[idx]))[0]
        return int(idx[best]), True
    best = np.lexsort((order, -cost, -acc))[0]
    return int(best), False


def select_from_scores(
    scores,
    outcomes: Outcomes,
    direction: Direction,
    cost_model: CostModel,
    tau: float,
):
    """Array-level selection. Returns (threshold, phi, cost, accuracy, feasible)."""
    if len(outcomes) == 0:
        raise SelectionError("validation set is empty")
    sweep = ThresholdSweep(scores, outcomes.small, outcomes.large, direction)
    thresholds = sweep.candidates()
    phi, cost, acc = sweep.evaluate(thresholds, cost_model)
    i, feasible = _pick(thresholds, phi, cost, acc, tau)
    return float(thresholds[i]), float(phi[i]), float(cost[i]), float(acc[i]), feasible


def select_threshold(
    records: Sequence[InferenceRecord],
    scores,
    source: ScoreSource,
    cost_model: CostModel,
    tau: float,
    *,
    calibration_model=None,
    outcomes: Outcomes | None = None,
) -> SelectionResult:
    """Cheapest threshold on ``scores`` whose validation micro-F1 reaches ``tau``."""
    if len(records) == 0:
        raise SelectionError("validation set is empty")
    source = ScoreSource(source)
    direction = direction_for(source)
    outcomes = outcomes if outcomes is not None else Outcomes.from_records(records)
    theta, phi, cost, acc, feasible = select_from_scores(
        scores, outcomes, direction, cost_model, tau
    )
    policy = RoutingPolicy(source, theta, direction, calibration_model)
    return SelectionResult(policy, cost, acc, feasible, phi, {"tau": tau})


def select_calibrated(model, records, cost_model, tau, *, outcomes=None) -> SelectionResult:
    """Threshold on calibrated error probability ``model.predict(u)``."""
    u = np.array([margin_uncertainty(r.small_tokens) for r in records], dtype=float)
    return select_threshold(
        records,
        model.predict(u),
        ScoreSource.CALIBRATED_P,
        cost_model,
        tau,
        calibration_model=model,
        outcomes=outcomes,
    )


def build_frugal_baseline(records, cost_model, tau, *, outcomes=None) -> SelectionResult:
    """Confidence-threshold baseline on mean top-1 token probability."""
    policy_scores = RoutingPolicy(ScoreSource.MEAN_MAX_PROB, 0.0, Direction.BELOW).scores(records)
    return select_threshold(
        records, policy_scores, ScoreSource.MEAN_MAX_PROB, cost_model, tau, outcomes=outcomes
    )


def build_entropy_baseline(records, cost_model, tau, *, outcomes=None) -> SelectionResult:
    policy_scores = RoutingPolicy(ScoreSource.MEAN_ENTROPY, 0.0, Direction.ABOVE).scores(records)
    return select_threshold(
        records, policy_scores, ScoreSource.MEAN_ENTROPY, cost_model, tau, outcomes=outcomes
    )


def select_within_budget(
    records, scores, source, cost_model, budget, *, calibration_model=None, outcomes=None
) -> SelectionResult:
    """Most accurate threshold whose validation cost stays within ``budget``."""
    source = ScoreSource(source)
    direction = direction_for(source)
    outcomes = outcomes if outcomes is not None else Outcomes.from_records(records)
    sweep = ThresholdSweep(scores, outcomes.small, outcomes.large, direction)
    thresholds = sweep.candidates()
    phi, cost, acc = sweep.evaluate(thresholds, cost_model)
    within = cost <= budget + 1e-12
    if not within.any():
        raise SelectionError(f"no threshold costs at most {budget}")
    idx = np.flatnonzero(within)
    best = idx[np.lexsort((idx, cost[idx], -acc[idx]))[0]]
    policy = RoutingPolicy(source, float(thresholds[best]), direction, calibration_model)
    return SelectionResult(
        policy, float(cost[best]), float(acc[best]), True, float(phi[best]), {"budget": budget}
    )


# -- split conformal --------------------------------------------------------

DEFAULT_DELTA_GRID = tuple(round(0.005 * i, 3) for i in range(1, 200))


def conformal_quantile(u_correct, delta: float) -> float:
    """Split-conformal threshold on nonconformity ``u`` of correct records.

    Returns the ceil((k + 1)(1 - delta))-th smallest value, capped at the
    maximum when the corrected rank exceeds k.
    """
    u_correct = np.sort(np.asarray(u_correct, dtype=float))
    k = u_correct.size
    if k == 0:
        raise SelectionError("no correct calibration records")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    rank = math.ceil((k + 1) * (1 - delta) - 1e-12)
    rank = min(max(rank, 1), k)
    return float(u_correct[rank - 1])


def select_conformal(
    calibration: Sequence[InferenceRecord],
    validation: Sequence[InferenceRecord],
    cost_model: CostModel,
    tau: float,
    deltas: Sequence[float] = DEFAULT_DELTA_GRID,
    *,
    outcomes: Outcomes | None = None,
) -> SelectionResult:
    """Conformal routing: escalate ``u > alpha(delta)``, delta chosen on validation."""
    if len(deltas) == 0:
        raise SelectionError("empty miscoverage grid")
    if len(validation) == 0:
        raise SelectionError("validation set is empty")
    u_cal = np.array([margin_uncertainty(r.small_tokens) for r in calibration])
    correct = np.array([derive_correctness(r, "small") == 0 for r in calibration], dtype=bool)
    if not correct.any():
        raise SelectionError("no calibration record has a correct small-model output")
    u_correct = u_cal[correct]
    alphas = np.array([conformal_quantile(u_correct, d) for d in deltas])
    outcomes = outcomes if outcomes is not None else Outcomes.from_records(validation)
    u_val = np.array([margin_uncertainty(r.small_tokens) for r in validation])
    sweep = ThresholdSweep(u_val, outcomes.small, outcomes.large, Direction.ABOVE)
    phi, cost, acc = sweep.evaluate(alphas, cost_model)
    i, feasible = _pick(alphas, phi, cost, acc, tau)
    policy = RoutingPolicy(ScoreSource.RAW_MARGIN, float(alphas[i]), Direction.ABOVE)
    return SelectionResult(
        policy,
        float(cost[i]),
        float(acc[i]),
        feasible,
        float(phi[i]),
        {"tau": tau, "delta": float(deltas[i])},
    )
