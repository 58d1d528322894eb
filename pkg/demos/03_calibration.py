# %% [markdown]
# # Calibrating uncertainty
# Isotonic regression maps u to the probability that the small model is
# wrong. Temperature scaling is a one-parameter comparator.

# %%
import numpy as np

from calcascade.calibration import expected_calibration_error, fit_isotonic, fit_temperature
from calcascade.synthetic import SyntheticSpec, draw_latents

spec = SyntheticSpec(n=20_000, seed=1)
train = draw_latents(spec)
fresh = draw_latents(spec.replace(seed=2))

iso = fit_isotonic(train.u, train.e_small)
temp = fit_temperature(train.u, train.e_small)
print(f"{iso.breakpoints.size} isotonic blocks, temperature {temp.temperature:.3f}")

# %% [markdown]
# Equal-mass ECE on a fresh sample: raw u is far from calibrated, the
# sigmoid family cannot bend to the true curve, the step function can.

# %%
for name, p in (
    ("raw", fresh.u),
    ("temperature", temp.predict(fresh.u)),
    ("isotonic", iso.predict(fresh.u)),
):
    print(f"{name:12s} ECE {expected_calibration_error(p, fresh.e_small).ece:.4f}")

# %%
table = expected_calibration_error(iso.predict(fresh.u), fresh.e_small, bin_count=5)
print(table.to_csv())
