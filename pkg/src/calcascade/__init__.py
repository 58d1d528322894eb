"""Calibrated two-model cascade routing from logged inference records."""

from .calibration import (
    IsotonicModel,
    ReliabilityTable,
    TemperatureModel,
    expected_calibration_error,
    fit_isotonic,
    fit_temperature,
    predict,
)
from .datamodel import (
    CostModel,
    DatasetSplit,
    InferenceRecord,
    Outcomes,
    RunConfig,
    TokenStats,
    derive_correctness,
    derive_match_counts,
    load_records,
    split_dataset,
)
from .evaluation import (
    BootstrapCI,
    CascadeReport,
    ParetoCurve,
    assumption_ii_diagnostic,
    bootstrap_ci,
    cost_sensitivity,
    evaluate_cascade,
    micro_f1,
    pareto_sweep,
)
from .routing import (
    Direction,
    RoutingPolicy,
    ScoreSource,
    SelectionResult,
    build_entropy_baseline,
    build_frugal_baseline,
    route,
    select_conformal,
    select_threshold,
    select_calibrated,
)
from .synthetic import SyntheticSpec, generate, matched_workload_spec
from .uncertainty import (
    SignalKind,
    margin_uncertainty,
    mean_entropy,
    mean_max_prob_confidence,
    score_records,
)

__version__ = "0.1.0"
