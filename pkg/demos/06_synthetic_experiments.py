# %% [markdown]
# # Synthetic workloads and controlled experiments
# Generated workloads know their true error curve, so calibration rates,
# conformal coverage and routing optimality can be checked against truth.

# %%
from calcascade.synthetic import (
    SyntheticSpec,
    conformal_coverage_experiment,
    falsification_experiment,
    generate_with_truth,
    matched_workload_spec,
    mean_error_rate,
    rate_experiment,
)

spec = matched_workload_spec(n=10_000)
records, truth = generate_with_truth(spec)
print(f"target small error {mean_error_rate(spec):.3f}, realized {truth.e_small.mean():.3f}")
print(f"realized large error {truth.e_large.mean():.3f}")

# %% [markdown]
# ECE of the isotonic fit shrinks with calibration-set size.

# %%
rate = rate_experiment(SyntheticSpec(n=100), trials=5, fresh_n=50_000)
for row in rate.rows:
    print(row)
print(f"log-log slope {rate.slope:.3f}")

# %%
for row in conformal_coverage_experiment(SyntheticSpec(n=5_000), n_calibration=5_000, trials=5):
    print(row)

# %% [markdown]
# Low-uncertainty queries that are secretly hard break threshold routing;
# the gap to an oracle that knows the true rates grows with contamination.

# %%
fals = falsification_experiment(SyntheticSpec(n=1_000), trials=5)
for row in fals.rows:
    print(f"contamination {row['contamination']:.2f}: mean cost gap {row['mean_gap']:.3f}")
