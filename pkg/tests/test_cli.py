import io
import json
import subprocess
import sys

import pytest

from calcascade.cli import main, serve_stream
from calcascade.calibration import fit_isotonic
from calcascade.datamodel import load_records
from calcascade.routing import Direction, RoutingPolicy, ScoreSource, load_policy


def run(*argv, stdin=""):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), stdin=io.StringIO(stdin), stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    code, out, _ = run("synth", "--out", str(d / "w.jsonl"), "--n", "6000", "--split", "--seed", "3")
    assert code == 0
    return d


def test_synth_writes_three_splits(workdir):
    sizes = {name: len(load_records(workdir / f"w.{name}.jsonl")) for name in ("calibration", "validation", "test")}
    assert sizes == {"calibration": 1800, "validation": 1200, "test": 3000}


def test_pipeline(workdir):
    model, pol = workdir / "m.json", workdir / "p.json"
    code, out, _ = run("calibrate", "--records", str(workdir / "w.calibration.jsonl"), "--out", str(model))
    cal = json.loads(out)
    assert code == 0 and cal["ece_after"] < cal["ece_before"]

    code, out, _ = run("select", "--records", str(workdir / "w.validation.jsonl"),
                       "--model", str(model), "--out", str(pol), "--tau", "0.88")
    sel = json.loads(out)
    assert code == 0 and sel["feasible"] and sel["score"] == "calibrated_p"
    assert load_policy(pol).calibration_model is not None

    code, out, _ = run("eval", "--records", str(workdir / "w.test.jsonl"), "--policy", str(pol),
                       "--bootstrap", "50")
    rep = json.loads(out)["reports"][0]
    assert code == 0
    assert rep["ci"]["cost"]["lower"] <= rep["total_cost"] <= rep["ci"]["cost"]["upper"]
    assert [r["ratio"] for r in rep["cost_sensitivity"]] == [3.02, 5.0, 10.0]
    assert "gap" in rep["assumption_ii"]


def test_select_tau_zero_keeps_everything(workdir):
    code, out, _ = run("select", "--records", str(workdir / "w.validation.jsonl"), "--baseline",
                       "entropy", "--tau", "0", "--out", str(workdir / "e.json"))
    assert code == 0 and json.loads(out)["validation_cost"] == 1.0


def test_select_infeasible_exits_zero(workdir):
    code, out, _ = run("select", "--records", str(workdir / "w.validation.jsonl"), "--baseline",
                       "frugal", "--tau", "0.999", "--out", str(workdir / "f.json"))
    assert code == 0 and json.loads(out)["feasible"] is False


def test_conformal_and_raw_signal(workdir):
    code, out, _ = run("select", "--records", str(workdir / "w.validation.jsonl"), "--baseline",
                       "conformal", "--calibration", str(workdir / "w.calibration.jsonl"),
                       "--out", str(workdir / "c.json"))
    assert code == 0 and "delta" in json.loads(out)
    code, out, _ = run("select", "--records", str(workdir / "w.validation.jsonl"), "--signal",
                       "maxprob", "--out", str(workdir / "x.json"))
    assert code == 0 and json.loads(out)["direction"] == "below"


def test_escalate_everything_matches_large_only(workdir, tmp_path):
    pol = tmp_path / "all.json"
    pol.write_text(json.dumps({"score": "raw_margin", "direction": "above", "threshold": -1}))
    code, out, _ = run("eval", "--records", str(workdir / "w.test.jsonl"), "--policy", str(pol))
    doc = json.loads(out)
    rep, large = doc["reports"][0], doc["single_model"]["large"]
    for key in ("total_cost", "micro_f1", "tp", "fp", "fn", "per_entity_f1"):
        assert rep[key] == large[key]


def test_outputs_are_byte_identical(workdir):
    args = ("report", "--records", str(workdir / "w.test.jsonl"), "--bootstrap", "30", "--seed", "4")
    assert run(*args)[1] == run(*args)[1]
    a = run("sweep", "--records", str(workdir / "w.test.jsonl"), "--signal", "entropy")[1]
    assert a == run("sweep", "--records", str(workdir / "w.test.jsonl"), "--signal", "entropy")[1]
    assert a.splitlines()[0] == "threshold,cost,micro_f1,escalation_fraction"


def test_report_has_all_routers(workdir):
    code, out, _ = run("report", "--records", str(workdir / "w.test.jsonl"))
    doc = json.loads(out)
    assert code == 0 and set(doc["routers"]) == {"ucci", "entropy", "conformal", "frugal"}


def _policy():
    model = fit_isotonic([0.1, 0.3, 0.5, 0.7], [0, 0, 1, 1])
    return RoutingPolicy(ScoreSource.CALIBRATED_P, 0.5, Direction.ABOVE, model)


def test_serve_stream_contract():
    lines = [
        json.dumps({"id": "a", "tokens": [{"p1": 0.99, "p2": 0.0}]}),
        "{oops",
        json.dumps({"id": "b", "tokens": [{"p1": 0.5, "p2": 0.4}]}),
        json.dumps({"id": "c", "tokens": [{"p1": 0.9, "p2": 0.7}]}),
    ]
    out = io.StringIO()
    errors = serve_stream(_policy(), lines, out)
    replies = [json.loads(l) for l in out.getvalue().splitlines()]
    assert errors == 2 and len(replies) == 4
    assert replies[0]["decision"] == "small" and replies[0]["id"] == "a"
    assert replies[1] == {"line": 2, "error": replies[1]["error"]}
    assert replies[2]["decision"] == "large" and "p_hat" in replies[2]
    assert replies[3]["line"] == 4 and replies[3]["id"] == "c"


def test_serve_threshold_boundary():
    # p_hat exactly at the threshold stays small
    model = fit_isotonic([0.1, 0.5], [0.0, 0.5])
    policy = RoutingPolicy(ScoreSource.CALIBRATED_P, 0.5, Direction.ABOVE, model)
    out = io.StringIO()
    serve_stream(policy, [json.dumps({"id": "a", "tokens": [{"p1": 0.25, "p2": 0.25}]})], out)
    reply = json.loads(out.getvalue())
    assert reply["p_hat"] == 0.5 and reply["decision"] == "small"


def test_serve_raw_policy_via_main(tmp_path):
    pol = tmp_path / "p.json"
    pol.write_text(json.dumps({"score": "mean_max_prob", "direction": "below", "threshold": 0.6}))
    req = json.dumps({"id": "q", "tokens": [{"p1": 0.6, "p2": 0.3}]}) + "\n"
    code, out, _ = run("serve", "--policy", str(pol), stdin=req)
    assert code == 0 and json.loads(out) == {"id": "q", "score": 0.6, "decision": "large"}


@pytest.mark.parametrize(
    "argv, code",
    [
        (("calibrate", "--records", "/nonexistent.jsonl", "--out", "/tmp/x.json"), 3),
        (("nonsense",), 1),
        (("select", "--records", "x"), 1),
    ],
)
def test_exit_codes(argv, code):
    got, out, err = run(*argv)
    assert got == code and out == ""
    assert json.loads(err)["exit_code"] == code


def test_validation_exit_code(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"id": "a", "tokens": [{"p1": 0.2, "p2": 0.5}], "small": {},
                               "large": {}, "gold": {}}) + "\n")
    code, _, err = run("calibrate", "--records", str(bad), "--out", str(tmp_path / "m.json"))
    assert code == 2 and "'a'" in json.loads(err)["message"]


def test_config_file_is_used(tmp_path, workdir):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"accuracy_target": 0.0, "large_cost": 5.0}))
    code, out, _ = run("select", "--records", str(workdir / "w.validation.jsonl"), "--baseline",
                       "entropy", "--config", str(cfg), "--out", str(tmp_path / "p.json"))
    assert code == 0 and json.loads(out)["tau"] == 0.0
    cfg.write_text(json.dumps({"accuracy_target": 2}))
    code, _, _ = run("select", "--records", str(workdir / "w.validation.jsonl"), "--baseline",
                     "entropy", "--config", str(cfg), "--out", str(tmp_path / "p.json"))
    assert code == 2


def test_verify_fault_injection():
    code, out, _ = run("verify", "--quick", "--property", "level_set_ties", "--inject-fault", "interpolating")
    lines = [json.loads(l) for l in out.splitlines()]
    assert code == 4 and lines[0]["passed"] is False


def test_verify_quick_subset_passes():
    code, out, _ = run("verify", "--quick", "--property", "pava_oracle", "level_set_ties", "subset_oracle")
    assert code == 0 and json.loads(out.splitlines()[-1])["summary"]["passed"]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "calcascade", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "calcascade" in proc.stdout
