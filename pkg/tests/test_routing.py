import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calcascade.calibration import fit_isotonic
from calcascade.datamodel import CostModel, Outcomes
from calcascade.exceptions import SelectionError, SignalUnavailableError, ValidationError
from calcascade.routing import (
    Direction,
    RoutingPolicy,
    ScoreSource,
    ThresholdSweep,
    build_entropy_baseline,
    build_frugal_baseline,
    conformal_quantile,
    load_policy,
    route,
    save_policy,
    select_conformal,
    select_threshold,
    select_calibrated,
    select_within_budget,
)
from calcascade.synthetic import brute_force_optimal_policy

from conftest import make_record, toy

CM = CostModel()


def raw(theta, source=ScoreSource.RAW_MARGIN):
    d = Direction.BELOW if source.is_confidence else Direction.ABOVE
    return RoutingPolicy(source, theta, d)


def test_route_boundaries():
    r = toy("a", 0.3, True, True)
    assert route(raw(1.0), r) == "small"
    assert route(raw(-1.0), r) == "large"
    u = raw(0.0).score(r)
    assert route(raw(u), r) == "small"
    assert route(raw(np.nextafter(u, -1)), r) == "large"


def test_score_equal_to_threshold_stays_small():
    model = fit_isotonic([0.1, 0.2, 0.3, 0.4], [1, 0, 1, 1])
    policy = RoutingPolicy(ScoreSource.CALIBRATED_P, 0.5, Direction.ABOVE, model)
    assert route(policy, toy("a", 0.15, True, True)) == "small"
    assert route(policy, toy("b", 0.35, True, True)) == "large"


def test_confidence_boundary_goes_large():
    r = make_record("a", tokens=((0.8, 0.1),))
    assert route(raw(0.8, ScoreSource.MEAN_MAX_PROB), r) == "large"
    assert route(raw(0.79, ScoreSource.MEAN_MAX_PROB), r) == "small"


def test_direction_must_match_orientation():
    with pytest.raises(ValidationError):
        RoutingPolicy(ScoreSource.MEAN_MAX_PROB, 0.5, Direction.ABOVE)
    with pytest.raises(ValidationError):
        RoutingPolicy(ScoreSource.RAW_MARGIN, 0.5, Direction.BELOW)
    with pytest.raises(ValidationError):
        RoutingPolicy(ScoreSource.CALIBRATED_P, 0.5, Direction.ABOVE)


def test_entropy_policy_needs_entropy():
    with pytest.raises(SignalUnavailableError):
        route(raw(0.5, ScoreSource.MEAN_ENTROPY), toy("a", 0.3, True, True))


def test_policy_file_round_trip(tmp_path):
    model = fit_isotonic([0.1, 0.2, 0.3, 0.4], [1, 0, 1, 1])
    for policy in (
        RoutingPolicy(ScoreSource.CALIBRATED_P, 0.5, Direction.ABOVE, model),
        raw(math.inf),
        raw(-math.inf, ScoreSource.MEAN_MAX_PROB),
    ):
        path = tmp_path / "p.json"
        save_policy(path, policy)
        back = load_policy(path)
        assert back.to_json() == policy.to_json()


def test_policy_file_rejects_unknown_keys():
    with pytest.raises(ValidationError):
        RoutingPolicy.from_json({"score": "raw_margin", "direction": "above", "threshold": 0.2, "x": 1})


def _toy_set():
    # u, small correct, large correct
    rows = [(0.9, False, True), (0.7, False, True), (0.4, True, True), (0.1, True, False)]
    return [toy(f"r{i}", u, s, l) for i, (u, s, l) in enumerate(rows)]


def test_easy_target_keeps_everything():
    recs = _toy_set()
    sel = select_threshold(recs, [0.9, 0.7, 0.4, 0.1], ScoreSource.RAW_MARGIN, CM, 0.5)
    assert sel.feasible and sel.validation_cost == 1.0 and sel.policy.threshold == math.inf


def test_unreachable_target_escalates_everything():
    recs = [toy("a", 0.9, False, True), toy("b", 0.2, True, True), toy("c", 0.5, False, True)]
    sel = select_threshold(recs, [0.9, 0.2, 0.5], ScoreSource.RAW_MARGIN, CM, 1.01)
    assert not sel.feasible
    assert sel.escalation_fraction == 1.0 and sel.validation_cost == pytest.approx(3.02)


def test_four_record_toy_matches_subset_oracle():
    recs = _toy_set()
    scores = np.array([0.9, 0.7, 0.4, 0.1])
    out = Outcomes.from_records(recs)
    for tau in (0.5, 0.7, 0.75, 0.8, 1.0):
        sel = select_threshold(recs, scores, ScoreSource.RAW_MARGIN, CM, tau, outcomes=out)
        oracle = brute_force_optimal_policy(out, CM, tau, scores=scores)
        got = sel.validation_cost if sel.feasible else math.inf
        assert got == pytest.approx(oracle.min_cost)
    # F1 0.75 is reached by escalating only the most uncertain record
    sel = select_threshold(recs, scores, ScoreSource.RAW_MARGIN, CM, 0.75)
    assert sel.escalation_fraction == 0.25 and sel.validation_accuracy == 0.75
    sel = select_threshold(recs, scores, ScoreSource.RAW_MARGIN, CM, 0.8)
    assert sel.escalation_fraction == 0.5 and sel.validation_accuracy == 1.0


def test_empty_validation():
    with pytest.raises(SelectionError):
        select_threshold([], [], ScoreSource.RAW_MARGIN, CM, 0.9)


def test_constant_entropy_two_candidates():
    recs = [toy(f"r{i}", 0.3, i % 2 == 0, True, entropy=0.7) for i in range(6)]
    out = Outcomes.from_records(recs)
    sweep = ThresholdSweep(np.full(6, 0.7), out.small, out.large, Direction.ABOVE)
    phi, _, _ = sweep.evaluate(sweep.candidates(), CM)
    assert sorted(set(phi.tolist())) == [0.0, 1.0]
    assert build_entropy_baseline(recs, CM, 0.4).validation_cost == 1.0
    assert build_entropy_baseline(recs, CM, 0.9).escalation_fraction == 1.0


def test_frugal_all_confident():
    recs = [make_record(f"r{i}", tokens=((1.0, 0.0),)) for i in range(4)]
    sel = build_frugal_baseline(recs, CM, 0.9)
    assert sel.feasible and sel.validation_cost == 1.0
    assert sel.policy.direction is Direction.BELOW


def test_frugal_anti_correlated_toy():
    # the most confident records are the wrong ones
    rows = [(0.05, False), (0.1, False), (0.6, True), (0.8, True), (0.5, True)]
    recs = [toy(f"r{i}", u, ok, True) for i, (u, ok) in enumerate(rows)]
    out = Outcomes.from_records(recs)
    sel = build_frugal_baseline(recs, CM, 0.9, outcomes=out)
    conf = raw(0.0, ScoreSource.MEAN_MAX_PROB).scores(recs)
    oracle = brute_force_optimal_policy(out, CM, 0.9, scores=-conf)
    assert sel.validation_cost == pytest.approx(oracle.min_cost)


def test_conformal_quantile_examples():
    assert conformal_quantile([0.1, 0.2, 0.3], 0.5) == 0.2
    assert conformal_quantile([0.3, 0.1, 0.2], 0.001) == 0.3
    u = np.random.default_rng(0).random(57)
    for d in (0.05, 0.2, 0.5):
        rank = math.ceil(58 * (1 - d))
        assert conformal_quantile(u, d) == np.sort(u)[rank - 1]


def test_conformal_needs_correct_records():
    bad = [toy("a", 0.2, False, True)]
    with pytest.raises(SelectionError):
        select_conformal(bad, _toy_set(), CM, 0.8)
    with pytest.raises(SelectionError):
        select_conformal(_toy_set(), _toy_set(), CM, 0.8, deltas=())


def test_conformal_records_delta():
    sel = select_conformal(_toy_set(), _toy_set(), CM, 0.75)
    assert sel.feasible and 0 < sel.extra["delta"] < 1
    assert sel.policy.score_source is ScoreSource.RAW_MARGIN


def test_calibrated_plateau_ties_route_together():
    recs = _toy_set()
    model = fit_isotonic([0.1, 0.4, 0.7, 0.9], [0, 1, 0, 1])
    sel = select_calibrated(model, recs, CM, 0.75)
    decisions = sel.policy.decide(recs)
    p = sel.policy.scores(recs)
    for i in range(4):
        for j in range(4):
            if p[i] == p[j]:
                assert decisions[i] == decisions[j]


def test_budget_dual():
    sel = select_within_budget(_toy_set(), [0.9, 0.7, 0.4, 0.1], "raw_margin", CM, 2.01)
    assert sel.validation_cost <= 2.01 and sel.validation_accuracy == 1.0
    with pytest.raises(SelectionError):
        select_within_budget(_toy_set(), [0.9, 0.7, 0.4, 0.1], "raw_margin", CM, 0.5)


# -- properties -------------------------------------------------------------


@st.composite
def instances(draw):
    n = draw(st.integers(1, 12))
    u = draw(st.lists(st.integers(0, 10).map(lambda k: k / 10), min_size=n, max_size=n))
    small = draw(st.lists(st.booleans(), min_size=n, max_size=n))
    large = draw(st.lists(st.booleans(), min_size=n, max_size=n))
    tau = draw(st.sampled_from([0.3, 0.5, 0.7, 0.8, 0.9, 1.0]))
    recs = [toy(f"r{i}", u[i], small[i], large[i]) for i in range(n)]
    return recs, np.array(u), tau


@given(instances())
@settings(max_examples=150, deadline=None)
def test_threshold_family_optimal(inst):
    recs, scores, tau = inst
    out = Outcomes.from_records(recs)
    sel = select_threshold(recs, scores, ScoreSource.RAW_MARGIN, CM, tau, outcomes=out)
    oracle = brute_force_optimal_policy(out, CM, tau, scores=scores)
    assert (sel.validation_cost if sel.feasible else math.inf) == pytest.approx(oracle.min_cost)
    free = brute_force_optimal_policy(out, CM, tau)
    assert free.min_cost <= (sel.validation_cost if sel.feasible else math.inf) + 1e-12


@given(instances(), st.sampled_from([(1.0, 5.0), (1.0, 10.0), (2.0, 3.0)]))
@settings(max_examples=100, deadline=None)
def test_cost_ratio_invariance(inst, costs):
    recs, scores, tau = inst
    a = select_threshold(recs, scores, ScoreSource.RAW_MARGIN, CM, tau)
    b = select_threshold(recs, scores, ScoreSource.RAW_MARGIN, CostModel(*costs), tau)
    assert np.array_equal(a.policy.decide(recs), b.policy.decide(recs))


@given(instances(), st.sampled_from([np.exp, np.cbrt, lambda x: 3 * x - 7, np.arctan]))
@settings(max_examples=100, deadline=None)
def test_monotone_transform_invariance(inst, fn):
    recs, scores, tau = inst
    out = Outcomes.from_records(recs)
    a = select_threshold(recs, scores, "raw_margin", CM, tau, outcomes=out)
    b = select_threshold(recs, fn(scores), "raw_margin", CM, tau, outcomes=out)
    from calcascade.routing import escalates

    da = escalates(scores, a.policy.threshold, Direction.ABOVE)
    db = escalates(fn(scores), b.policy.threshold, Direction.ABOVE)
    assert np.array_equal(da, db)


@given(instances())
@settings(deadline=None)
def test_equal_scores_equal_decisions(inst):
    recs, scores, tau = inst
    sel = select_threshold(recs, scores, ScoreSource.RAW_MARGIN, CM, tau)
    d = sel.policy.decide(recs)
    for s in np.unique(scores):
        assert np.unique(d[scores == s]).size == 1


@given(instances())
@settings(deadline=None)
def test_feasible_implies_target(inst):
    recs, scores, tau = inst
    sel = select_threshold(recs, scores, ScoreSource.RAW_MARGIN, CM, tau)
    if sel.feasible:
        assert sel.validation_accuracy >= tau
    assert json.loads(json.dumps(sel.to_json()))["feasible"] == sel.feasible
