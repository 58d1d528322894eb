"""Command-line entry point: ``calcascade <command> [flags]``.

Data goes to stdout as JSON (or CSV for ``sweep``); errors go to stderr as a
JSON object. Exit codes: 0 ok (an infeasible selection is still ok), 1 usage,
2 validation, 3 I/O, 4 property failure from ``verify``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from . import __version__
from .calibration import expected_calibration_error, fit_isotonic, fit_temperature, load_model, save_model
from .datamodel import (
    CostModel,
    RunConfig,
    derive_correctness,
    dump_records,
    load_config,
    load_records,
    Outcomes,
    parse_tokens,
    split_dataset,
)
from .evaluation import (
    assumption_ii_diagnostic,
    bootstrap_ci,
    cost_sensitivity,
    evaluate_decisions,
    pareto_sweep,
    per_entity_report,
    single_model_report,
)
from .exceptions import CascadeError, DiagnosticUndefinedError, ValidationError
from .routing import (
    Direction,
    RoutingPolicy,
    ScoreSource,
    build_entropy_baseline,
    build_frugal_baseline,
    direction_for,
    escalates,
    load_policy,
    save_policy,
    select_conformal,
    select_threshold,
    select_calibrated,
)
from .synthetic import SyntheticSpec, generate, matched_workload_spec
from .uncertainty import margin_uncertainty
from .verify import PREDICTORS, run_properties

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_IO, EXIT_PROPERTY = 0, 1, 2, 3, 4

SIGNAL_SOURCES = {
    "margin": ScoreSource.RAW_MARGIN,
    "entropy": ScoreSource.MEAN_ENTROPY,
    "maxprob": ScoreSource.MEAN_MAX_PROB,
}
BASELINES = ("ucci", "entropy", "conformal", "frugal")
DEFAULT_SENSITIVITY_RATIOS = (5.0, 10.0)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def _emit(obj, out: TextIO) -> None:
    out.write(_dumps(obj) + "\n")


# -- config -----------------------------------------------------------------


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    if getattr(args, "tau", None) is not None:
        changes["accuracy_target"] = args.tau
    if getattr(args, "bins", None) is not None:
        changes["ece_bins"] = args.bins
    if getattr(args, "bootstrap", None) is not None and args.bootstrap > 0:
        changes["bootstrap_resamples"] = args.bootstrap
    if getattr(args, "seed", None) is not None:
        changes["rng_seed"] = args.seed
    ratio = getattr(args, "cost_ratio", None)
    if isinstance(ratio, float):
        small = cfg.cost_model.small_cost
        changes["cost_model"] = CostModel(small, small * ratio)
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _records(path, cfg: RunConfig):
    return load_records(path, cfg.entity_schema)


def _margins(records) -> np.ndarray:
    return np.array([margin_uncertainty(r.small_tokens) for r in records], dtype=float)


def _errors(records) -> np.ndarray:
    return np.array([derive_correctness(r, "small") for r in records], dtype=float)


def _write_or_print(text: str, out_path, stdout: TextIO) -> None:
    if out_path:
        Path(out_path).write_text(text, encoding="utf-8")
    else:
        stdout.write(text)


# -- commands ---------------------------------------------------------------


def cmd_calibrate(args, stdout: TextIO) -> int:
    cfg = _config(args)
    records = _records(args.records, cfg)
    u, e = _margins(records), _errors(records)
    model = fit_isotonic(u, e)
    before = expected_calibration_error(u, e, cfg.ece_bins)
    after = expected_calibration_error(model.predict(u), e, cfg.ece_bins)
    save_model(args.out, model)
    _emit(
        {
            "n": len(records),
            "model": str(args.out),
            "blocks": int(model.breakpoints.size),
            "ece_before": before.ece,
            "ece_after": after.ece,
            "reliability_before": before.to_json()["bins"],
            "reliability_after": after.to_json()["bins"],
        },
        stdout,
    )
    return EXIT_OK


def _select(args, cfg: RunConfig, records, outcomes):
    cm, tau = cfg.cost_model, cfg.accuracy_target
    if args.signal is not None:
        source = SIGNAL_SOURCES[args.signal]
        scores = RoutingPolicy(source, 0.0, direction_for(source)).scores(records)
        return select_threshold(records, scores, source, cm, tau, outcomes=outcomes)
    baseline = args.baseline
    if baseline == "ucci":
        if not args.model:
            raise UsageError("--model is required for --baseline ucci")
        return select_calibrated(load_model(args.model), records, cm, tau, outcomes=outcomes)
    if baseline == "entropy":
        return build_entropy_baseline(records, cm, tau, outcomes=outcomes)
    if baseline == "frugal":
        return build_frugal_baseline(records, cm, tau, outcomes=outcomes)
    if not args.calibration:
        raise UsageError("--calibration records are required for the conformal selector")
    calibration = _records(args.calibration, cfg)
    return select_conformal(calibration, records, cm, tau, outcomes=outcomes)


def cmd_select(args, stdout: TextIO) -> int:
    cfg = _config(args)
    records = _records(args.records, cfg)
    outcomes = Outcomes.from_records(records, cfg.entity_schema)
    result = _select(args, cfg, records, outcomes)
    save_policy(args.out, result.policy)
    out = result.to_json()
    out["policy"] = str(args.out)
    out["selector"] = args.signal and f"raw:{args.signal}" or args.baseline
    _emit(out, stdout)
    return EXIT_OK


def _policy_report(policy: RoutingPolicy, records, outcomes, cfg: RunConfig, args) -> dict:
    escalate = policy.decide(records)
    report = evaluate_decisions(outcomes, escalate, cfg.cost_model, policy.to_json())
    out = report.to_json()
    if args.bootstrap:
        routed = outcomes.routed(escalate)
        out["ci"] = {
            stat: bootstrap_ci(
                routed, escalate, stat, cfg.cost_model, cfg.bootstrap_resamples, cfg.rng_seed
            ).to_json()
            for stat in ("cost", "micro_f1", "cost_saving_vs_large")
        }
    ratios = args.cost_ratio or (cfg.cost_model.ratio, *DEFAULT_SENSITIVITY_RATIOS)
    out["cost_sensitivity"] = cost_sensitivity(escalate, ratios)
    try:
        out["assumption_ii"] = assumption_ii_diagnostic(outcomes, escalate).to_json()
    except DiagnosticUndefinedError as exc:
        out["assumption_ii"] = {"undefined": str(exc)}
    return out


def cmd_eval(args, stdout: TextIO) -> int:
    cfg = _config(args)
    records = _records(args.records, cfg)
    outcomes = Outcomes.from_records(records, cfg.entity_schema)
    reports = [
        dict(_policy_report(load_policy(p), records, outcomes, cfg, args), policy_path=str(p))
        for p in args.policy
    ]
    refs = {
        m: single_model_report(outcomes, m, cfg.cost_model).to_json() for m in ("small", "large")
    }
    _emit({"reports": reports, "single_model": refs}, stdout)
    return EXIT_OK


def cmd_sweep(args, stdout: TextIO) -> int:
    cfg = _config(args)
    records = _records(args.records, cfg)
    outcomes = Outcomes.from_records(records, cfg.entity_schema)
    signal = args.signal or "margin"
    if signal == "margin" and args.model:
        source = ScoreSource.CALIBRATED_P
        policy = RoutingPolicy(source, 0.0, Direction.ABOVE, load_model(args.model))
    else:
        source = SIGNAL_SOURCES[signal]
        policy = RoutingPolicy(source, 0.0, direction_for(source))
    curve = pareto_sweep(policy.scores(records), outcomes, cfg.cost_model, policy.direction)
    _write_or_print(curve.to_csv(), args.out, stdout)
    if args.out:
        _emit({"points": len(curve.points), "score": source.value, "out": str(args.out)}, stdout)
    return EXIT_OK


def cmd_synth(args, stdout: TextIO) -> int:
    cfg = _config(args)
    if args.spec:
        try:
            obj = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"spec file is not valid JSON: {exc}") from exc
        spec = SyntheticSpec.from_json(obj)
    elif args.workload == "matched":
        spec = matched_workload_spec()
    else:
        spec = SyntheticSpec(n=args.n or 10_000)
    overrides = {"seed": cfg.rng_seed}
    if args.n is not None:
        overrides["n"] = args.n
    spec = spec.replace(**overrides)
    records = generate(spec)
    out = {"n": len(records), "spec": spec.to_json()}
    if args.split:
        base = Path(args.out)
        paths = {}
        for split in split_dataset(records, seed=cfg.rng_seed):
            path = base.with_name(f"{base.stem}.{split.name}{base.suffix or '.jsonl'}")
            dump_records(path, split.records)
            paths[split.name] = str(path)
        out["splits"] = paths
    else:
        dump_records(args.out, records)
        out["out"] = str(args.out)
    _emit(out, stdout)
    return EXIT_OK


def cmd_report(args, stdout: TextIO) -> int:
    """Split one record file, fit, select every router and evaluate on the test split."""
    cfg = _config(args)
    cm, tau = cfg.cost_model, cfg.accuracy_target
    records = _records(args.records, cfg)
    cal, val, test = split_dataset(records, seed=cfg.rng_seed)
    val_out = Outcomes.from_records(val.records, cfg.entity_schema)
    test_out = Outcomes.from_records(test.records, cfg.entity_schema)

    u_cal, e_cal = _margins(cal.records), _errors(cal.records)
    iso = fit_isotonic(u_cal, e_cal)
    temp = fit_temperature(u_cal, e_cal)
    u_test, e_test = _margins(test.records), _errors(test.records)
    calibration = {
        "n_calibration": len(cal),
        "ece_raw": expected_calibration_error(u_test, e_test, cfg.ece_bins).ece,
        "ece_isotonic": expected_calibration_error(iso.predict(u_test), e_test, cfg.ece_bins).ece,
        "ece_temperature": expected_calibration_error(
            temp.predict(u_test), e_test, cfg.ece_bins
        ).ece,
        "temperature": temp.temperature,
    }

    selections = {
        "ucci": select_calibrated(iso, val.records, cm, tau, outcomes=val_out),
        "entropy": build_entropy_baseline(val.records, cm, tau, outcomes=val_out),
        "conformal": select_conformal(cal.records, val.records, cm, tau, outcomes=val_out),
        "frugal": build_frugal_baseline(val.records, cm, tau, outcomes=val_out),
    }
    routers = {}
    for name, sel in selections.items():
        escalate = sel.policy.decide(test.records)
        rep = evaluate_decisions(test_out, escalate, cm, sel.policy.to_json())
        row = {
            "selection": sel.to_json(),
            "test": rep.metrics(),
            "meets_tau_on_test": rep.micro_f1 >= tau,
        }
        if args.bootstrap:
            row["ci"] = {
                stat: bootstrap_ci(
                    test_out.routed(escalate), escalate, stat, cm, cfg.bootstrap_resamples,
                    cfg.rng_seed,
                ).to_json()
                for stat in ("cost", "micro_f1", "cost_saving_vs_large")
            }
        routers[name] = row
    cal_escalate = selections["ucci"].policy.decide(test.records)
    out = {
        "config": cfg.to_json(),
        "splits": {s.name: len(s) for s in (cal, val, test)},
        "calibration": calibration,
        "routers": routers,
        "single_model": {
            m: single_model_report(test_out, m, cm).metrics() for m in ("small", "large")
        },
        "calibrated_per_entity_f1": per_entity_report(test_out, cal_escalate),
        "calibrated_cost_sensitivity": cost_sensitivity(
            cal_escalate, args.cost_ratio or (cm.ratio, *DEFAULT_SENSITIVITY_RATIOS)
        ),
    }
    try:
        out["calibrated_assumption_ii"] = assumption_ii_diagnostic(test_out, cal_escalate).to_json()
    except DiagnosticUndefinedError as exc:
        out["calibrated_assumption_ii"] = {"undefined": str(exc)}
    _emit(out, stdout)
    return EXIT_OK


def serve_stream(policy: RoutingPolicy, lines, out: TextIO) -> int:
    """Answer one JSONL request per input line; returns the number of error lines."""
    errors = 0
    calibrated = policy.score_source is ScoreSource.CALIBRATED_P
    raw_source = ScoreSource.RAW_MARGIN if calibrated else policy.score_source
    raw_policy = RoutingPolicy(raw_source, 0.0, direction_for(raw_source))
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        rid = None
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict) or set(obj) != {"id", "tokens"}:
                raise ValidationError("request must be an object with exactly 'id' and 'tokens'")
            rid = obj["id"]
            if not isinstance(rid, str) or not rid:
                raise ValidationError("id must be a non-empty string")
            tokens = parse_tokens(obj["tokens"], record_id=rid)
            raw = raw_policy.score_tokens(tokens)
            reply = {"id": rid, "score": raw}
            score = raw
            if calibrated:
                score = float(policy.calibration_model.predict(raw))
                reply["p_hat"] = score
            esc = bool(escalates(score, policy.threshold, policy.direction))
            reply["decision"] = "large" if esc else "small"
        except (json.JSONDecodeError, CascadeError, ValueError, TypeError) as exc:
            errors += 1
            reply = {"line": lineno, "error": str(exc)}
            if rid is not None:
                reply["id"] = rid
        out.write(_dumps(reply) + "\n")
        out.flush()
    return errors


def cmd_serve(args, stdout: TextIO, stdin: TextIO) -> int:
    policy = load_policy(args.policy)
    serve_stream(policy, stdin, stdout)
    return EXIT_OK


def cmd_verify(args, stdout: TextIO) -> int:
    cfg = _config(args)
    failed = []
    for result in run_properties(
        args.property, quick=args.quick, predictor=args.inject_fault or "step", seed=cfg.rng_seed
    ):
        _emit(result.to_json(), stdout)
        stdout.flush()
        if not result.passed:
            failed.append(result.name)
    _emit({"summary": {"passed": not failed, "failed": failed}}, stdout)
    return EXIT_PROPERTY if failed else EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="calcascade", description="Calibrated small/large model cascade routing.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, *, tau=False, ratio="single", bins=False, boot=False):
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--seed", type=int, help="override the config seed")
        if tau:
            p.add_argument("--tau", type=float, help="accuracy target (micro-F1)")
        if ratio == "single":
            p.add_argument("--cost-ratio", type=float, help="large/small cost ratio")
        elif ratio == "many":
            p.add_argument(
                "--cost-ratio", type=float, nargs="+",
                help="ratios for the cost-sensitivity table",
            )
        if bins:
            p.add_argument("--bins", type=int, help="equal-mass ECE bins")
        if boot:
            p.add_argument(
                "--bootstrap", type=int, default=0,
                help="bootstrap resamples for CIs (0 disables)",
            )

    p = sub.add_parser("calibrate", help="fit the isotonic map on calibration records")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True, help="model JSON to write")
    common(p, bins=True)

    p = sub.add_parser("select", help="pick the cheapest threshold meeting tau")
    p.add_argument("--records", required=True, help="validation records")
    p.add_argument("--model", help="calibration model for --baseline ucci")
    p.add_argument("--calibration", help="calibration records (conformal selector)")
    p.add_argument("--out", required=True, help="policy JSON to write")
    p.add_argument("--baseline", choices=BASELINES, default="ucci")
    p.add_argument("--signal", choices=sorted(SIGNAL_SOURCES), help="threshold a raw signal instead")
    common(p, tau=True)

    p = sub.add_parser("eval", help="evaluate policies end to end on test records")
    p.add_argument("--records", required=True)
    p.add_argument("--policy", required=True, nargs="+")
    common(p, ratio="many", boot=True)

    p = sub.add_parser("sweep", help="Pareto curve over all thresholds (CSV)")
    p.add_argument("--records", required=True)
    p.add_argument("--model", help="calibration model; margin scores become p_hat")
    p.add_argument("--signal", choices=sorted(SIGNAL_SOURCES))
    p.add_argument("--out", help="CSV path (default stdout)")
    common(p)

    p = sub.add_parser("synth", help="generate synthetic records")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--workload", choices=("default", "matched"), default="default")
    p.add_argument("--spec", help="SyntheticSpec JSON (overrides --workload)")
    p.add_argument("--split", action="store_true", help="write calibration/validation/test files")
    common(p, ratio=None)

    p = sub.add_parser("report", help="full pipeline comparison on one record file")
    p.add_argument("--records", required=True)
    common(p, tau=True, ratio="many", bins=True, boot=True)

    p = sub.add_parser("serve", help="route JSONL requests from stdin")
    p.add_argument("--policy", required=True)

    p = sub.add_parser("verify", help="run the property suite")
    p.add_argument("--property", nargs="+", help="run only these properties")
    p.add_argument("--quick", action="store_true", help="smaller instance counts")
    p.add_argument("--inject-fault", choices=sorted(set(PREDICTORS) - {"step"}))
    common(p, ratio=None)
    return parser


COMMANDS = {
    "calibrate": cmd_calibrate,
    "select": cmd_select,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "synth": cmd_synth,
    "report": cmd_report,
    "verify": cmd_verify,
}


def _fail(code: int, exc: BaseException, stderr: TextIO) -> int:
    _emit({"error": type(exc).__name__, "message": str(exc), "exit_code": code}, stderr)
    return code


def main(argv: Sequence[str] | None = None, *, stdin=None, stdout=None, stderr=None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        if args.command == "serve":
            return cmd_serve(args, stdout, stdin)
        return COMMANDS[args.command](args, stdout)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc, stderr)
    except OSError as exc:
        return _fail(EXIT_IO, exc, stderr)
    except (CascadeError, ValueError) as exc:
        return _fail(EXIT_VALIDATION, exc, stderr)


if __name__ == "__main__":
    sys.exit(main())
