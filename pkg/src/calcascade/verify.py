"""Self-checking property suite.

Each property is its own oracle: exhaustive search for isotonic fits and
routing subsets, known ground-truth curves for the rate and coverage
experiments. ``run_properties`` returns one result per property.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .calibration import IsotonicModel, fit_isotonic
from .datamodel import CostModel, InferenceRecord, Outcomes, TokenStats
from .evaluation import assumption_ii_diagnostic, cost_sensitivity
from .routing import ScoreSource, escalates, Direction, select_threshold
from .synthetic import (
    SyntheticSpec,
    brute_force_optimal_policy,
    conformal_coverage_experiment,
    falsification_experiment,
    generate,
    rate_experiment,
)

Predictor = Callable[[IsotonicModel, np.ndarray], np.ndarray]


def step_predictor(model: IsotonicModel, u) -> np.ndarray:
    return np.asarray(model.predict(np.asarray(u, dtype=float)))


def interpolating_predictor(model: IsotonicModel, u) -> np.ndarray:
    """Linear interpolation between breakpoints. Deliberately wrong; used for fault injection."""
    return np.interp(np.asarray(u, dtype=float), model.breakpoints, model.block_values)


PREDICTORS = {"step": step_predictor, "interpolating": interpolating_predictor}


# -- oracles ----------------------------------------------------------------


def brute_force_isotonic(u, e) -> np.ndarray:
    """Monotone least-squares fit by enumerating every contiguous block partition.

    Tied ``u`` values share one fitted value. Returns fitted values at the
    training points, in input order. Only practical for a dozen distinct u.
    """
    u = np.asarray(u, dtype=float)
    e = np.asarray(e, dtype=float)
    uniq, inverse, w = np.unique(u, return_inverse=True, return_counts=True)
    y = np.bincount(inverse, weights=e) / w
    m = uniq.size
    if m == 1:
        return np.full(u.size, y[0])
    masks = np.arange(1 << (m - 1))
    cuts = (masks[:, None] >> np.arange(m - 1)) & 1
    block = np.concatenate([np.zeros((masks.size, 1), dtype=np.int64), np.cumsum(cuts, axis=1)], axis=1)
    flat = (block + m * np.arange(masks.size)[:, None]).ravel()
    size = masks.size * m
    wsum = np.bincount(flat, weights=np.tile(w, masks.size), minlength=size)
    ysum = np.bincount(flat, weights=np.tile(w * y, masks.size), minlength=size)
    means = (ysum / np.where(wsum > 0, wsum, 1)).reshape(masks.size, m)
    fitted = np.take_along_axis(means, block, axis=1)
    ok = np.all(np.diff(fitted, axis=1) >= -1e-12, axis=1)
    sse = np.where(ok, ((fitted - y) ** 2 * w).sum(axis=1), np.inf)
    return fitted[int(np.argmin(sse))][inverse]


def _record(i: int, score: float, small_ok: bool, large_ok: bool) -> InferenceRecord:
    m = 1.0 - score
    tok = TokenStats((1.0 + m) / 2.0, (1.0 - m) / 2.0)
    return InferenceRecord(
        f"t{i:02d}",
        (tok,),
        {"camera": "x" if small_ok else "x~s"},
        {"camera": "x" if large_ok else "x~l"},
        {"camera": "x"},
    )


def toy_instance(rng: np.random.Generator, n: int, *, ordered: bool):
    """Tiny single-entity cascade instance and an uncertainty score per record.

    With ``ordered`` the scores are strictly decreasing in realized escalation
    gain, so the score orders the records' true error; otherwise scores are
    noisy error rates with occasional ties.
    """
    rate = rng.uniform(0.0, 0.6, size=n)
    small_ok = rng.random(n) >= rate
    large_ok = rng.random(n) >= 0.07
    if ordered:
        gain = large_ok.astype(int) - small_ok.astype(int)
        order = np.lexsort((rng.random(n), -gain))
        scores = np.empty(n)
        scores[order] = np.linspace(0.9, 0.05, n)
    else:
        scores = np.round(np.clip(rate + 0.15 * rng.standard_normal(n), 0.0, 1.0), 1)
    records = [_record(i, float(scores[i]), small_ok[i], large_ok[i]) for i in range(n)]
    return records, scores


# -- properties -------------------------------------------------------------


@dataclass
class PropertyResult:
    name: str
    passed: bool
    seconds: float = 0.0
    details: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "property": self.name,
            "passed": self.passed,
            "seconds": round(self.seconds, 3),
            **self.details,
        }


def check_pava_oracle(instances: int = 500, max_n: int = 12, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    failures = 0
    for _ in range(instances):
        n = int(rng.integers(2, max_n + 1))
        if rng.random() < 0.3:
            u = rng.integers(0, 5, size=n) / 4.0
        else:
            u = rng.random(n)
        e = (rng.random(n) < 0.4).astype(float) if rng.random() < 0.7 else rng.random(n)
        got = fit_isotonic(u, e).predict(u)
        err = float(np.max(np.abs(got - brute_force_isotonic(u, e))))
        worst = max(worst, err)
        failures += err > 1e-9
    return {"passed": failures == 0, "instances": instances, "failures": failures, "max_abs_error": worst}


def check_level_set_ties(
    predictor: Predictor = step_predictor, instances: int = 50, seed: int = 0
) -> dict:
    """Records inside one fitted block get one score and so one routing decision."""
    rng = np.random.default_rng(seed)
    violations = 0
    checked = 0
    for _ in range(instances):
        u = rng.beta(2, 6, size=400)
        e = (rng.random(400) < u).astype(float)
        model = fit_isotonic(u, e)
        bp, vals = model.breakpoints, model.block_values
        for i in range(bp.size - 1):
            inside = rng.uniform(bp[i], bp[i + 1], size=8)
            p = np.asarray(predictor(model, inside), dtype=float)
            theta = vals[i]
            checked += 1
            same_score = np.all(p == vals[i])
            same_route = np.unique(escalates(p, theta, Direction.ABOVE)).size == 1
            violations += not (same_score and same_route)
    return {"passed": violations == 0, "blocks_checked": checked, "violations": violations}


def check_subset_oracle(
    instances: int = 200, max_n: int = 12, tau: float = 0.8, seed: int = 0
) -> dict:
    """Threshold selection against exhaustive search over escalation subsets."""
    rng = np.random.default_rng(seed)
    cm = CostModel()
    upper_miss = 0
    ordered_miss = 0
    ordered_count = 0
    for k in range(instances):
        n = int(rng.integers(2, max_n + 1))
        ordered = k % 2 == 0
        records, scores = toy_instance(rng, n, ordered=ordered)
        outcomes = Outcomes.from_records(records)
        sel = select_threshold(records, scores, ScoreSource.RAW_MARGIN, cm, tau, outcomes=outcomes)
        upper = brute_force_optimal_policy(outcomes, cm, tau, scores=scores)
        got = sel.validation_cost if sel.feasible else math.inf
        upper_miss += not _same_cost(got, upper.min_cost)
        if ordered:
            ordered_count += 1
            free = brute_force_optimal_policy(outcomes, cm, tau)
            ordered_miss += not _same_cost(got, free.min_cost)
    return {
        "passed": upper_miss == 0 and ordered_miss == 0,
        "instances": instances,
        "upper_set_mismatches": upper_miss,
        "ordered_instances": ordered_count,
        "unrestricted_mismatches": ordered_miss,
    }


def _same_cost(a: float, b: float) -> bool:
    if math.isinf(a) or math.isinf(b):
        return a == b
    return abs(a - b) <= 1e-9


def check_rate(trials: int = 10, fresh_n: int = 200_000, seed: int = 0, bounds=(-0.5, -0.2)) -> dict:
    res = rate_experiment(SyntheticSpec(n=100), trials=trials, fresh_n=fresh_n, seed=seed)
    lo, hi = bounds
    return {"passed": lo <= res.slope <= hi, "bounds": list(bounds), **res.to_json()}


def check_conformal_coverage(
    n_calibration: int = 10_000, trials: int = 20, seed: int = 0, slack: float = 0.02
) -> dict:
    rows = conformal_coverage_experiment(
        SyntheticSpec(n=n_calibration), n_calibration=n_calibration, trials=trials, seed=seed
    )
    ok = all(r["mean_coverage"] >= r["target"] - slack for r in rows)
    return {"passed": ok, "slack": slack, "rows": rows}


def check_falsification(trials: int = 20, seed: int = 0) -> dict:
    res = falsification_experiment(SyntheticSpec(n=1000), trials=trials, seed=seed)
    return {"passed": res.strictly_increasing and res.oracle_never_worse, **res.to_json()}


def check_assumption_ii(n: int = 20_000, seed: int = 0, bound: float = 0.01) -> dict:
    """Under independent large-model errors, escalated and overall large F1 agree."""
    spec = SyntheticSpec(n=n, large_mode="independent", seed=seed)
    records = generate(spec)
    outcomes = Outcomes.from_records(records, spec.entity_schema)
    u = np.array([1.0 - r.small_tokens[0].margin for r in records])
    escalate = u > np.quantile(u, 0.5)
    diag = assumption_ii_diagnostic(outcomes, escalate).to_json()
    return {"passed": abs(diag["gap"]) < bound, "bound": bound, **diag}


def check_cost_sensitivity() -> dict:
    phi = 1.08 / 2.02
    rows = cost_sensitivity(phi, (3.02, 5.0, 10.0))
    want = [(2.08, 0.31), (3.14, 0.37), (5.81, 0.42)]
    ok = all(
        round(r["cost"], 2) == c and round(r["saving_vs_large"], 2) == s
        for r, (c, s) in zip(rows, want)
    )
    return {"passed": ok, "rows": rows}


def property_suite(*, quick: bool = False, predictor: str = "step", seed: int = 0):
    """(name, thunk) pairs; ``quick`` shrinks instance counts for smoke runs."""
    pred = PREDICTORS[predictor]
    scale = dict(
        pava=100 if quick else 500,
        subset=50 if quick else 200,
        trials=5 if quick else 10,
        fresh=50_000 if quick else 200_000,
        conf_n=2_000 if quick else 10_000,
        conf_trials=5 if quick else 20,
        fals_trials=5 if quick else 20,
        diag_n=5_000 if quick else 20_000,
    )
    return [
        ("pava_oracle", lambda: check_pava_oracle(scale["pava"], seed=seed)),
        ("level_set_ties", lambda: check_level_set_ties(pred, seed=seed)),
        ("subset_oracle", lambda: check_subset_oracle(scale["subset"], seed=seed)),
        ("rate_slope", lambda: check_rate(scale["trials"], scale["fresh"], seed=seed)),
        (
            "conformal_coverage",
            lambda: check_conformal_coverage(scale["conf_n"], scale["conf_trials"], seed=seed),
        ),
        ("falsification_ordering", lambda: check_falsification(scale["fals_trials"], seed=seed)),
        ("assumption_ii_independence", lambda: check_assumption_ii(scale["diag_n"], seed=seed)),
        ("cost_sensitivity", check_cost_sensitivity),
    ]


def run_properties(
    names: Sequence[str] | None = None, *, quick: bool = False, predictor: str = "step", seed: int = 0
):
    """Run the suite (or the named subset) and yield a PropertyResult per property."""
    suite = property_suite(quick=quick, predictor=predictor, seed=seed)
    known = {name for name, _ in suite}
    for name in names or ():
        if name not in known:
            raise ValueError(f"unknown property {name!r}; expected one of {sorted(known)}")
    for name, thunk in suite:
        if names and name not in names:
            continue
        start = time.perf_counter()
        out = thunk()
        passed = bool(out.pop("passed"))
        yield PropertyResult(name, passed, time.perf_counter() - start, out)
