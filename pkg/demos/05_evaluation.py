# %% [markdown]
# # Evaluating a cascade
# Every metric comes from the outputs the routed model actually produced.

# %%
import numpy as np

from calcascade.calibration import fit_isotonic
from calcascade.datamodel import CostModel, Outcomes, split_dataset
from calcascade.evaluation import (
    assumption_ii_diagnostic,
    bootstrap_policy_ci,
    cost_sensitivity,
    evaluate_cascade,
    pareto_sweep,
    single_model_report,
)
from calcascade.routing import select_calibrated
from calcascade.synthetic import generate, matched_workload_spec
from calcascade.uncertainty import margin_uncertainty

spec = matched_workload_spec(n=20_000, seed=0)
cal, val, test = split_dataset(generate(spec), seed=0)
u = np.array([margin_uncertainty(r.small_tokens) for r in cal.records])
e = np.array([float(r.small_output != r.gold) for r in cal.records])
cm = CostModel()
sel = select_calibrated(fit_isotonic(u, e), val.records, cm, 0.91)
test_out = Outcomes.from_records(test.records, spec.entity_schema)

rep = evaluate_cascade(sel.policy, test.records, cm, outcomes=test_out)
print(f"cascade cost {rep.total_cost:.3f}, micro-F1 {rep.micro_f1:.3f}, escalated {rep.escalation_fraction:.1%}")
for m in ("small", "large"):
    r = single_model_report(test_out, m, cm)
    print(f"{m}-only cost {r.total_cost:.2f}, micro-F1 {r.micro_f1:.3f}")

# %%
ci = bootstrap_policy_ci(sel.policy, test.records, "micro_f1", cm, resamples=500, outcomes=test_out)
print(f"micro-F1 95% CI [{ci.lower:.3f}, {ci.upper:.3f}]")

# %% [markdown]
# The same decisions re-priced under other cost ratios.

# %%
for row in cost_sensitivity(sel.policy.decide(test.records), (3.02, 5.0, 10.0)):
    print(row)

# %%
print(assumption_ii_diagnostic(test_out, sel.policy.decide(test.records)))

# %%
curve = pareto_sweep(sel.policy.scores(test.records), test_out, cm)
front = curve.frontier()
for point in front[:: max(1, len(front) // 6)]:
    print("theta={:.4f} cost={:.3f} F1={:.3f} escalated={:.3f}".format(*point))
