"""Synthetic two-model workloads with known ground truth, plus exhaustive oracles.

Each record draws an uncertainty ``u`` from a Beta distribution and a true
small-model error rate from a monotone curve in ``u`` (optionally
contaminated: a fraction of records keeps a body-of-distribution ``u`` but
gets a high error rate). All tokens of a record share the margin ``1 - u``, so
the margin signal recovers ``u`` exactly; the second-best probability and the
leftover vocabulary mass are random per token, which makes mean max-prob and
mean entropy noisier views of the same record.

Entity outputs: when a model is wrong, every gold entity it returns gets a
wrong value; with no gold entity it hallucinates one, taking entity types in
schema order. Gold presence can depend on the small-model error event, which
is how per-entity F1 targets are met.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import integrate, stats
from scipy.special import expit, xlogy

from .calibration import expected_calibration_error, fit_isotonic
from .datamodel import (
    DEFAULT_ENTITY_SCHEMA,
    MAX_TOKENS,
    CostModel,
    InferenceRecord,
    Outcomes,
    TokenStats,
)
from .exceptions import SpecError
from .routing import conformal_quantile, mean_cost, micro_f1_from_totals

# Small-model per-entity F1 and the mean-entity-count-balanced presence rates
# used by the matched workload (overall micro-F1 ~ exact-match accuracy).
MATCHED_SMALL_F1 = (0.71, 0.68, 0.93, 0.91, 0.92, 0.96)
MATCHED_PRESENCE = (0.303, 0.303, 0.374, 0.374, 0.374, 0.374)
MATCHED_CURVE = (3.2, -2.5854)  # slope, offset: mean error 0.153 under Beta(2, 6)

ORACLE_MAX_N = 20
VOCAB_TAIL_MAX = 262_144
SPREAD_SHAPE = 0.3


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 10_000
    u_alpha: float = 2.0
    u_beta: float = 6.0
    curve: str = "logistic"  # or "constant"
    curve_slope: float = MATCHED_CURVE[0]
    curve_offset: float = MATCHED_CURVE[1]
    curve_value: float = 0.0
    large_accuracy: float = 0.932
    large_mode: str = "independent"  # or "correlated"
    correlation: float = 0.0
    tail_mode: str = "none"  # or "heavy"
    contamination: float = 0.0
    contaminant_rate: float = 0.9
    tokens_per_record: int = 6
    entity_schema: tuple[str, ...] = DEFAULT_ENTITY_SCHEMA
    entity_presence: tuple[float, ...] = MATCHED_PRESENCE
    small_entity_f1: tuple[float, ...] | None = None
    seed: int = 0
    id_prefix: str = "q"

    def __post_init__(self):
        object.__setattr__(self, "entity_schema", tuple(self.entity_schema))
        object.__setattr__(self, "entity_presence", tuple(self.entity_presence))
        if self.small_entity_f1 is not None:
            object.__setattr__(self, "small_entity_f1", tuple(self.small_entity_f1))
        if self.n < 0:
            raise SpecError("n must be nonnegative")
        if self.u_alpha <= 0 or self.u_beta <= 0:
            raise SpecError("Beta parameters must be positive")
        if self.curve not in ("logistic", "constant"):
            raise SpecError(f"unknown error curve {self.curve!r}")
        if self.curve == "logistic" and not self.curve_slope > 0:
            raise SpecError("logistic error curve needs a positive slope")
        for name in ("curve_value", "large_accuracy", "correlation", "contamination",
                     "contaminant_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SpecError(f"{name} must lie in [0, 1], got {v}")
        if self.large_mode not in ("independent", "correlated"):
            raise SpecError(f"unknown large_mode {self.large_mode!r}")
        if self.tail_mode not in ("none", "heavy"):
            raise SpecError(f"unknown tail_mode {self.tail_mode!r}")
        if self.tail_mode == "none" and self.contamination > 0:
            raise SpecError("contamination requires tail_mode='heavy'")
        if not 1 <= self.tokens_per_record <= MAX_TOKENS:
            raise SpecError(f"tokens_per_record must lie in [1, {MAX_TOKENS}]")
        if len(self.entity_presence) != len(self.entity_schema):
            raise SpecError("entity_presence needs one rate per entity type")
        if any(not 0 <= q <= 1 for q in self.entity_presence):
            raise SpecError("entity presence rates must lie in [0, 1]")
        if self.small_entity_f1 is not None:
            if len(self.small_entity_f1) != len(self.entity_schema):
                raise SpecError("small_entity_f1 needs one target per entity type")
            if any(not 0 < f <= 1 for f in self.small_entity_f1):
                raise SpecError("per-entity F1 targets must lie in (0, 1]")

    def replace(self, **changes) -> SyntheticSpec:
        return dataclasses.replace(self, **changes)

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["entity_schema"] = list(self.entity_schema)
        out["entity_presence"] = list(self.entity_presence)
        if self.small_entity_f1 is not None:
            out["small_entity_f1"] = list(self.small_entity_f1)
        return out

    @classmethod
    def from_json(cls, obj) -> SyntheticSpec:
        if not isinstance(obj, dict):
            raise SpecError("synthetic spec must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise SpecError(f"unknown spec keys {sorted(unknown)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise SpecError(str(exc)) from exc


def matched_workload_spec(n: int = 75_000, seed: int = 0, **overrides) -> SyntheticSpec:
    """Workload tuned to target single-model and per-entity marginals.

    Small exact-match accuracy ~0.847, large ~0.932, and small per-entity F1
    near (0.71, 0.68, 0.93, 0.91, 0.92, 0.96).
    """
    base = dict(n=n, seed=seed, small_entity_f1=MATCHED_SMALL_F1)
    base.update(overrides)
    return SyntheticSpec(**base)


# -- ground truth -----------------------------------------------------------


def error_curve(spec: SyntheticSpec, u):
    u = np.asarray(u, dtype=float)
    if spec.curve == "constant":
        return np.full_like(u, spec.curve_value)
    return expit(spec.curve_slope * u + spec.curve_offset)


def mean_body_rate(spec: SyntheticSpec) -> float:
    if spec.curve == "constant":
        return spec.curve_value
    dist = stats.beta(spec.u_alpha, spec.u_beta)
    value, _ = integrate.quad(lambda u: float(error_curve(spec, u)) * dist.pdf(u), 0.0, 1.0,
                              limit=200)
    return value


def mean_error_rate(spec: SyntheticSpec) -> float:
    """Expected small-model error probability, contamination included."""
    eps = spec.contamination if spec.tail_mode == "heavy" else 0.0
    return (1 - eps) * mean_body_rate(spec) + eps * spec.contaminant_rate


def _max_rate(spec: SyntheticSpec) -> float:
    top = float(error_curve(spec, 1.0))
    if spec.tail_mode == "heavy" and spec.contamination > 0:
        top = max(top, spec.contaminant_rate)
    return top


def large_error_probability(spec: SyntheticSpec, rate, mean_rate: float | None = None):
    """Per-record large-model error probability.

    Independent mode: constant ``1 - large_accuracy``. Correlated mode blends
    that constant with a term proportional to the small model's true error
    rate, scaled so the marginal stays ``1 - large_accuracy``.
    """
    rate = np.asarray(rate, dtype=float)
    base = 1.0 - spec.large_accuracy
    if spec.large_mode == "independent" or spec.correlation == 0:
        return np.full_like(rate, base)
    mean_rate = mean_error_rate(spec) if mean_rate is None else mean_rate
    if mean_rate <= 0:
        raise SpecError("difficulty correlation needs a nonzero small-model error rate")
    worst = base * ((1 - spec.correlation) + spec.correlation * _max_rate(spec) / mean_rate)
    if worst > 1 + 1e-12:
        raise SpecError(
            f"large_accuracy={spec.large_accuracy} with correlation={spec.correlation} "
            f"needs error probability {worst:.3f} > 1 on the hardest records"
        )
    p = base * ((1 - spec.correlation) + spec.correlation * rate / mean_rate)
    return np.clip(p, 0.0, 1.0)


def presence_rates(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Gold entity presence rates for records the small model gets right / wrong.

    With per-entity F1 targets, wrong records over-represent the hard types so
    that P(small wrong | type present) = 1 - target.
    """
    q_right = np.asarray(spec.entity_presence, dtype=float)
    if spec.small_entity_f1 is None:
        return q_right, q_right.copy()
    alpha = mean_error_rate(spec)
    if not 0 < alpha < 1:
        raise SpecError("per-entity targets need a small-model error rate strictly in (0, 1)")
    miss = 1 - np.asarray(spec.small_entity_f1, dtype=float)
    q_wrong = q_right * miss * (1 - alpha) / (alpha * (1 - miss))
    if np.any(q_wrong > 1):
        bad = [spec.entity_schema[j] for j in np.flatnonzero(q_wrong > 1)]
        raise SpecError(f"per-entity F1 targets infeasible at error rate {alpha:.3f} for {bad}")
    return q_right, q_wrong


@dataclass(frozen=True)
class Latents:
    """Per-record ground truth behind a generated workload."""

    u: np.ndarray
    rate: np.ndarray
    contaminated: np.ndarray
    large_error_prob: np.ndarray
    e_small: np.ndarray
    e_large: np.ndarray

    def __len__(self) -> int:
        return self.u.size


def draw_latents(spec: SyntheticSpec, rng: np.random.Generator | None = None) -> Latents:
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    n = spec.n
    u = rng.beta(spec.u_alpha, spec.u_beta, size=n)
    rate = error_curve(spec, u)
    contaminated = np.zeros(n, dtype=bool)
    if spec.tail_mode == "heavy" and spec.contamination > 0:
        contaminated = rng.random(n) < spec.contamination
        rate = np.where(contaminated, spec.contaminant_rate, rate)
    else:
        rng.random(n)  # keep the stream aligned across tail modes
    lerr = large_error_probability(spec, rate)
    e_small = (rng.random(n) < rate).astype(np.int8)
    e_large = (rng.random(n) < lerr).astype(np.int8)
    return Latents(u, rate, contaminated, lerr, e_small, e_large)


# -- record construction ----------------------------------------------------


def _tokens(u: np.ndarray, spec: SyntheticSpec, rng: np.random.Generator):
    n, t = u.size, spec.tokens_per_record
    m = np.repeat((1.0 - u)[:, None], t, axis=1)
    # record-level draws with per-token jitter: how much of the non-margin mass
    # sits on the runner-up token, and how many tokens share the rest
    share = rng.beta(SPREAD_SHAPE, SPREAD_SHAPE, size=(n, 1))
    share = np.clip(share + 0.05 * rng.standard_normal((n, t)), 0.0, 1.0)
    lo, hi = math.log(2.0), math.log(VOCAB_TAIL_MAX)
    log_tail = lo + (hi - lo) * rng.beta(SPREAD_SHAPE, SPREAD_SHAPE, size=(n, 1))
    others = np.exp(np.clip(log_tail + 0.25 * rng.standard_normal((n, t)), lo, hi))
    p2 = share * (1.0 - m) / 2.0
    p1 = p2 + m
    rest = np.clip(1.0 - p1 - p2, 0.0, None)
    entropy = -(xlogy(p1, p1) + xlogy(p2, p2) + xlogy(rest, rest / others))
    entropy = np.clip(entropy, 0.0, None)
    return p1, p2, entropy


def _corrupt(gold: dict, schema: Sequence[str], tag: str) -> dict:
    if gold:
        return {k: f"{v}{tag}" for k, v in gold.items()}
    return {schema[0]: f"{schema[0]}{tag}"}


def generate_with_truth(spec: SyntheticSpec) -> tuple[list[InferenceRecord], Latents]:
    rng = np.random.default_rng(spec.seed)
    lat = draw_latents(spec, rng)
    n, schema = spec.n, spec.entity_schema
    q_right, q_wrong = presence_rates(spec)
    presence_draw = rng.random((n, len(schema)))
    value_draw = rng.integers(0, 50, size=(n, len(schema)))
    p1, p2, entropy = _tokens(lat.u, spec, rng)
    width = len(str(max(n - 1, 0)))
    records = []
    for i in range(n):
        q = q_wrong if lat.e_small[i] else q_right
        gold = {
            name: f"{name}-{value_draw[i, j]}"
            for j, name in enumerate(schema)
            if presence_draw[i, j] < q[j]
        }
        small = _corrupt(gold, schema, "~s") if lat.e_small[i] else dict(gold)
        large = _corrupt(gold, schema, "~l") if lat.e_large[i] else dict(gold)
        tokens = tuple(
            TokenStats(float(a), float(b), float(h))
            for a, b, h in zip(p1[i], p2[i], entropy[i])
        )
        records.append(
            InferenceRecord(f"{spec.id_prefix}{i:0{width}d}", tokens, small, large, gold)
        )
    return records, lat


def generate(spec: SyntheticSpec) -> list[InferenceRecord]:
    """Deterministic record set for ``spec`` (same seed, same records)."""
    return generate_with_truth(spec)[0]


# -- exhaustive policy oracle -------------------------------------------------


@dataclass(frozen=True)
class OracleResult:
    min_cost: float
    subset: tuple[int, ...] | None
    accuracy: float

    @property
    def feasible(self) -> bool:
        return self.subset is not None


def brute_force_optimal_policy(
    outcomes: Outcomes,
    cost_model: CostModel,
    tau: float,
    *,
    scores=None,
    chunk: int = 1 << 15,
) -> OracleResult:
    """Cheapest escalation subset with cascade micro-F1 >= tau, by enumeration.

    With ``scores`` given, only upper sets of the scores are considered
    (subsets of the form {score > theta}). Infeasible instances return
    ``min_cost = inf`` and ``subset = None``.
    """
    n = len(outcomes)
    if n > ORACLE_MAX_N:
        raise ValueError(f"subset oracle is capped at n = {ORACLE_MAX_N}, got {n}")
    base = outcomes.small.sum(axis=0)
    delta = outcomes.large - outcomes.small
    s = None if scores is None else np.asarray(scores, dtype=float)
    bit = np.arange(n)
    best_k, best_f1, best_mask = n + 1, -math.inf, None
    for start in range(0, 1 << n, chunk):
        masks = np.arange(start, min(start + chunk, 1 << n), dtype=np.int64)
        bits = ((masks[:, None] >> bit) & 1).astype(np.int64)
        totals = base + bits @ delta
        f1 = micro_f1_from_totals(totals[:, 0], totals[:, 1], totals[:, 2])
        ok = f1 >= tau
        if s is not None and n > 0:
            chosen = bits.astype(bool)
            lo = np.where(chosen, s, np.inf).min(axis=1)
            hi = np.where(chosen, -np.inf, s).max(axis=1)
            ok &= lo > hi
        if not ok.any():
            continue
        k = bits.sum(axis=1)
        cand = np.flatnonzero(ok)
        order = np.lexsort((masks[cand], -f1[cand], k[cand]))
        j = cand[order[0]]
        if (k[j], -f1[j]) < (best_k, -best_f1):
            best_k, best_f1, best_mask = int(k[j]), float(f1[j]), int(masks[j])
    if best_mask is None:
        return OracleResult(math.inf, None, -math.inf)
    subset = tuple(i for i in range(n) if best_mask >> i & 1)
    return OracleResult(float(mean_cost(best_k / n, cost_model)), subset, best_f1)


# -- experiments --------------------------------------------------------------


@dataclass(frozen=True)
class RateResult:
    rows: tuple[dict, ...]
    slope: float
    l1_slope: float

    def to_json(self) -> dict:
        return {"rows": list(self.rows), "slope": self.slope, "l1_slope": self.l1_slope}


def rate_experiment(
    spec: SyntheticSpec,
    n_grid: Sequence[int] = (100, 1_000, 10_000, 100_000),
    trials: int = 10,
    *,
    fresh_n: int = 200_000,
    bins: int = 10,
    seed: int = 0,
) -> RateResult:
    """Mean ECE of an isotonic fit versus calibration-set size.

    ECE is measured with equal-mass bins on a fresh labeled sample from the
    same spec; the mean absolute distance to the true curve is reported
    alongside. Slopes are least-squares fits in log-log space.
    """
    if trials < 5:
        raise ValueError("rate experiment needs at least 5 trials per size")
    rng = np.random.default_rng(seed)
    rows = []
    for n in n_grid:
        eces, l1s = [], []
        for _ in range(trials):
            cal = draw_latents(spec.replace(n=n), rng)
            model = fit_isotonic(cal.u, cal.e_small)
            fresh = draw_latents(spec.replace(n=fresh_n), rng)
            p_hat = model.predict(fresh.u)
            eces.append(expected_calibration_error(p_hat, fresh.e_small, bins).ece)
            l1s.append(float(np.mean(np.abs(p_hat - fresh.rate))))
        rows.append(
            {
                "n": int(n),
                "mean_ece": float(np.mean(eces)),
                "std_ece": float(np.std(eces, ddof=1)),
                "mean_l1": float(np.mean(l1s)),
            }
        )
    ns = [r["n"] for r in rows]
    slope = _loglog_slope(ns, [r["mean_ece"] for r in rows])
    l1_slope = _loglog_slope(ns, [r["mean_l1"] for r in rows])
    return RateResult(tuple(rows), slope, l1_slope)


def _loglog_slope(x, y) -> float:
    """Least-squares slope of log y on log x; NaN when some y is zero."""
    y = np.asarray(y, dtype=float)
    if len(y) < 2 or np.any(y <= 0):
        return math.nan
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def _min_prefix(gains: np.ndarray, need: float, group_ends: np.ndarray | None = None) -> int:
    """Smallest prefix length (restricted to group ends) whose gain reaches ``need``."""
    cum = np.concatenate([[0.0], np.cumsum(gains)])
    ends = np.arange(gains.size + 1) if group_ends is None else group_ends
    ok = cum[ends] >= need - 1e-12
    if not ok.any():
        return -1
    return int(ends[np.argmax(ok)])


def expected_policy_costs(p_hat, rate, large_err, tau: float, cost_model: CostModel):
    """Expected-accuracy costs of the calibrated-threshold family and of the oracle.

    The calibrated family escalates whole level sets of ``p_hat`` from the top;
    the oracle knows ``rate`` and escalates records in decreasing order of
    expected accuracy gain, which is optimal among all subsets.
    Returns (calibrated_cost, oracle_cost); inf when infeasible.
    """
    p_hat = np.asarray(p_hat, dtype=float)
    gain = np.asarray(rate, dtype=float) - np.asarray(large_err, dtype=float)
    n = p_hat.size
    need = n * tau - float(np.sum(1.0 - np.asarray(rate)))
    order = np.argsort(-p_hat, kind="stable")
    sorted_p = p_hat[order]
    ends = np.concatenate([[0], np.flatnonzero(np.diff(sorted_p) != 0) + 1, [n]])
    k_cal = _min_prefix(gain[order], need, ends)
    k_orc = _min_prefix(np.sort(gain)[::-1], need)
    to_cost = lambda k: math.inf if k < 0 else float(mean_cost(k / n, cost_model))
    return to_cost(k_cal), to_cost(k_orc)


@dataclass(frozen=True)
class FalsificationResult:
    rows: tuple[dict, ...]
    gaps: dict

    @property
    def strictly_increasing(self) -> bool:
        means = [r["mean_gap"] for r in self.rows]
        return all(a < b for a, b in zip(means, means[1:]))

    @property
    def oracle_never_worse(self) -> bool:
        return all(r["oracle_le_calibrated"] for r in self.rows)

    def to_json(self) -> dict:
        return {
            "rows": list(self.rows),
            "strictly_increasing": self.strictly_increasing,
            "oracle_never_worse": self.oracle_never_worse,
        }


def falsification_experiment(
    spec: SyntheticSpec,
    tau: float = 0.91,
    contaminations: Sequence[float] = (0.0, 0.05, 0.15),
    trials: int = 20,
    *,
    n_calibration: int = 5_000,
    n_test: int = 20_000,
    cost_model: CostModel = CostModel(),
    seed: int = 0,
) -> FalsificationResult:
    """Cost gap between calibrated thresholding and a rate-aware oracle.

    Per trial: fit the isotonic map on a calibration draw, then on a test draw
    compare the cheapest calibrated threshold meeting ``tau`` in expected
    exact-match accuracy against the oracle's cheapest subset.
    """
    rng = np.random.default_rng(seed)
    rows, gaps = [], {}
    for eps in contaminations:
        s = spec.replace(tail_mode="heavy" if eps > 0 else spec.tail_mode, contamination=eps)
        if eps == 0:
            s = s.replace(tail_mode="none")
        trial_gaps, never_worse = [], True
        cal_costs, orc_costs = [], []
        for _ in range(trials):
            cal = draw_latents(s.replace(n=n_calibration), rng)
            model = fit_isotonic(cal.u, cal.e_small)
            test = draw_latents(s.replace(n=n_test), rng)
            c_cal, c_orc = expected_policy_costs(
                model.predict(test.u), test.rate, test.large_error_prob, tau, cost_model
            )
            never_worse &= c_orc <= c_cal + 1e-12
            trial_gaps.append(c_cal - c_orc)
            cal_costs.append(c_cal)
            orc_costs.append(c_orc)
        gaps[eps] = trial_gaps
        rows.append(
            {
                "contamination": float(eps),
                "mean_gap": float(np.mean(trial_gaps)),
                "std_gap": float(np.std(trial_gaps, ddof=1)) if trials > 1 else 0.0,
                "mean_calibrated_cost": float(np.mean(cal_costs)),
                "mean_oracle_cost": float(np.mean(orc_costs)),
                "oracle_le_calibrated": bool(never_worse),
            }
        )
    return FalsificationResult(tuple(rows), gaps)


def conformal_coverage_experiment(
    spec: SyntheticSpec,
    deltas: Sequence[float] = (0.05, 0.1, 0.2),
    n_calibration: int = 10_000,
    trials: int = 20,
    *,
    n_fresh: int = 20_000,
    seed: int = 0,
) -> list[dict]:
    """Empirical coverage of {u <= alpha(delta)} on fresh correct records."""
    rng = np.random.default_rng(seed)
    cover = {d: [] for d in deltas}
    for _ in range(trials):
        cal = draw_latents(spec.replace(n=n_calibration), rng)
        fresh = draw_latents(spec.replace(n=n_fresh), rng)
        u_ok = cal.u[cal.e_small == 0]
        fresh_ok = fresh.u[fresh.e_small == 0]
        for d in deltas:
            cover[d].append(float(np.mean(fresh_ok <= conformal_quantile(u_ok, d))))
    return [
        {"delta": float(d), "mean_coverage": float(np.mean(c)), "target": 1 - d}
        for d, c in cover.items()
    ]
