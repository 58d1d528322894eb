# %% [markdown]
# # Routing
# Pick the cheapest threshold on calibrated error probability whose
# validation micro-F1 reaches the target, then compare with baselines.

# %%
import numpy as np

from calcascade.calibration import fit_isotonic
from calcascade.datamodel import CostModel, Outcomes, split_dataset
from calcascade.routing import (
    build_entropy_baseline,
    build_frugal_baseline,
    route,
    select_conformal,
    select_calibrated,
)
from calcascade.synthetic import generate, matched_workload_spec
from calcascade.uncertainty import margin_uncertainty

spec = matched_workload_spec(n=20_000, seed=0)
cal, val, test = split_dataset(generate(spec), seed=0)
u = np.array([margin_uncertainty(r.small_tokens) for r in cal.records])
e = np.array([float(r.small_output != r.gold) for r in cal.records])
model = fit_isotonic(u, e)

cm, tau = CostModel(), 0.91
val_out = Outcomes.from_records(val.records, spec.entity_schema)
selections = {
    "calibrated": select_calibrated(model, val.records, cm, tau, outcomes=val_out),
    "entropy": build_entropy_baseline(val.records, cm, tau, outcomes=val_out),
    "conformal": select_conformal(cal.records, val.records, cm, tau, outcomes=val_out),
    "max-prob": build_frugal_baseline(val.records, cm, tau, outcomes=val_out),
}
for name, sel in selections.items():
    print(
        f"{name:10s} theta={sel.policy.threshold:.4f} cost={sel.validation_cost:.3f} "
        f"F1={sel.validation_accuracy:.3f} feasible={sel.feasible}"
    )

# %% [markdown]
# A policy routes one record at a time too.

# %%
policy = selections["calibrated"].policy
print([route(policy, r) for r in test.records[:8]])
