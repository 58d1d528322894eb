import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calcascade.calibration import (
    IsotonicModel,
    TemperatureModel,
    expected_calibration_error,
    fit_isotonic,
    fit_temperature,
    load_model,
    model_from_json,
    save_model,
)
from calcascade.exceptions import FitError, ValidationError
from calcascade.verify import brute_force_isotonic


def test_four_point_example():
    m = fit_isotonic([0.1, 0.2, 0.3, 0.4], [1, 0, 1, 1])
    assert list(m.breakpoints) == [0.1, 0.3]
    assert list(m.block_values) == [0.5, 1.0]
    assert m.predict(0.35) == 1.0
    np.testing.assert_allclose(
        m.predict(np.array([0.1, 0.2, 0.3, 0.4])),
        brute_force_isotonic([0.1, 0.2, 0.3, 0.4], [1, 0, 1, 1]),
        atol=1e-12,
    )


def test_monotone_input_is_returned():
    u = [0.1, 0.4, 0.5, 0.9]
    e = [0.0, 0.2, 0.7, 1.0]
    assert list(fit_isotonic(u, e).predict(np.array(u))) == e


def test_all_zero_outcomes_single_block():
    m = fit_isotonic(np.linspace(0, 1, 20), np.zeros(20))
    assert m.block_values.tolist() == [0.0]


def test_ties_are_pooled_first():
    m = fit_isotonic([0.2, 0.2, 0.2, 0.5], [1, 0, 0, 1])
    assert m.predict(0.2) == pytest.approx(1 / 3)
    assert m.predict(0.5) == 1.0


def test_prediction_clamps_and_boundaries():
    m = fit_isotonic([0.1, 0.2, 0.3, 0.4], [1, 0, 1, 1])
    assert m.predict(-5.0) == 0.5
    assert m.predict(0.3) == 1.0
    assert m.predict(0.2999) == 0.5
    assert m.predict(7.0) == 1.0
    with pytest.raises(ValueError):
        m.predict(float("nan"))


def test_fit_errors():
    with pytest.raises(FitError):
        fit_isotonic([0.5], [1])
    with pytest.raises(FitError):
        fit_isotonic([0.5, float("inf")], [1, 0])


def test_model_file_round_trip(tmp_path):
    m = fit_isotonic([0.1, 0.2, 0.3, 0.4, 0.5], [0, 1, 0, 1, 1])
    path = tmp_path / "m.json"
    save_model(path, m)
    back = load_model(path)
    assert back.breakpoints.tolist() == m.breakpoints.tolist()
    assert back.block_values.tolist() == m.block_values.tolist()
    assert back.n == 5
    t = TemperatureModel(0.7)
    assert model_from_json(json.loads(json.dumps(t.to_json()))).temperature == 0.7


@pytest.mark.parametrize(
    "obj",
    [
        {"kind": "isotonic", "breakpoints": [0.1, 0.2], "values": [0.5, 0.4], "n": 3},
        {"kind": "isotonic", "breakpoints": [0.2, 0.1], "values": [0.1, 0.4], "n": 3},
        {"kind": "isotonic", "breakpoints": [0.1], "values": [1.5], "n": 3},
        {"kind": "temperature", "temperature": -1},
        {"kind": "platt"},
        {"breakpoints": []},
    ],
)
def test_model_loading_validates(obj):
    with pytest.raises(ValidationError):
        model_from_json(obj)


def test_temperature_near_one_when_calibrated():
    rng = np.random.default_rng(0)
    u = rng.uniform(0.01, 0.99, 20_000)
    e = (rng.random(u.size) < u).astype(float)
    assert fit_temperature(u, e).temperature == pytest.approx(1.0, abs=0.1)


def test_temperature_sharpens_step_data():
    rng = np.random.default_rng(1)
    u = rng.uniform(0, 1, 5_000)
    assert fit_temperature(u, (u > 0.5).astype(float)).temperature < 1.0


def test_temperature_single_class_is_degenerate():
    with pytest.raises(FitError):
        fit_temperature([0.1, 0.5, 0.9], [1, 1, 1])


def test_ece_two_bin_example():
    p = np.r_[np.full(50, 0.2), np.full(50, 0.8)]
    e = np.r_[np.ones(15), np.zeros(35), np.ones(35), np.zeros(15)]
    table = expected_calibration_error(p, e, 2)
    assert table.ece == pytest.approx(0.10)
    assert [c for _, _, c in table.bins] == [50, 50]


def test_ece_zero_and_one():
    p = np.r_[np.full(10, 0.1), np.full(10, 0.5)]
    e = np.r_[np.ones(1), np.zeros(9), np.ones(5), np.zeros(5)]
    assert expected_calibration_error(p, e, 2).ece == pytest.approx(0.0, abs=1e-15)
    assert expected_calibration_error(np.zeros(10), np.ones(10), 2).ece == 1.0


def test_ece_needs_enough_predictions():
    with pytest.raises(ValueError):
        expected_calibration_error([0.1] * 5, [0] * 5, 10)
    with pytest.raises(ValueError):
        expected_calibration_error([0.1] * 5, [0] * 5, 1)


def test_ece_bins_differ_by_at_most_one():
    t = expected_calibration_error(np.linspace(0, 1, 103), np.zeros(103), 10)
    counts = [c for _, _, c in t.bins]
    assert sum(counts) == 103 and max(counts) - min(counts) <= 1


def test_reliability_exports():
    t = expected_calibration_error(np.linspace(0, 1, 20), np.r_[np.zeros(10), np.ones(10)], 4)
    assert t.to_csv().splitlines()[0] == "bin,mean_predicted,observed_rate,count"
    assert t.to_json()["scheme"] == "equal-mass" and len(t.to_json()["bins"]) == 4


# -- properties -------------------------------------------------------------

grid_u = st.lists(st.integers(0, 8).map(lambda k: k / 8), min_size=2, max_size=12)
cont_u = st.lists(st.floats(0, 1), min_size=2, max_size=12)


@st.composite
def pairs(draw):
    u = draw(st.one_of(grid_u, cont_u))
    e = draw(st.lists(st.sampled_from([0.0, 1.0]), min_size=len(u), max_size=len(u)))
    return np.array(u), np.array(e)


@given(pairs())
@settings(max_examples=300)
def test_matches_brute_force(p):
    u, e = p
    np.testing.assert_allclose(fit_isotonic(u, e).predict(u), brute_force_isotonic(u, e), atol=1e-9)


@given(pairs(), st.floats(-1, 2), st.floats(-1, 2))
def test_predict_is_monotone(p, a, b):
    m = fit_isotonic(*p)
    lo, hi = min(a, b), max(a, b)
    assert m.predict(lo) <= m.predict(hi)


@given(pairs())
def test_refit_is_idempotent(p):
    u, e = p
    fitted = fit_isotonic(u, e).predict(u)
    again = fit_isotonic(u, fitted).predict(u)
    np.testing.assert_allclose(again, fitted, atol=1e-12)


@given(pairs())
def test_sum_preserved(p):
    u, e = p
    assert abs(fit_isotonic(u, e).predict(u).sum() - e.sum()) <= 1e-9 * u.size


@given(
    st.lists(st.tuples(st.sampled_from([0.0, 0.25, 0.5, 0.9]), st.sampled_from([0.0, 1.0])),
             min_size=10, max_size=60),
    st.randoms(),
)
def test_ece_permutation_invariant(rows, rnd):
    shuffled = list(rows)
    rnd.shuffle(shuffled)
    a = expected_calibration_error(*map(np.array, zip(*rows)), 5).ece
    b = expected_calibration_error(*map(np.array, zip(*shuffled)), 5).ece
    assert a == pytest.approx(b, abs=1e-12)
