# %% [markdown]
# # Uncertainty signals
# The margin signal is one minus the mean gap between the top-1 and top-2
# token probabilities. Entropy and max-probability are baseline signals.

# %%
from calcascade.datamodel import TokenStats
from calcascade.uncertainty import margin_uncertainty, mean_entropy, mean_max_prob_confidence

confident = [TokenStats(0.97, 0.01, 0.15), TokenStats(0.90, 0.05, 0.40)]
torn = [TokenStats(0.48, 0.46, 1.10), TokenStats(0.55, 0.40, 0.95)]

for name, toks in (("confident", confident), ("torn", torn)):
    print(
        f"{name:9s} u={margin_uncertainty(toks):.3f} "
        f"entropy={mean_entropy(toks):.3f} maxprob={mean_max_prob_confidence(toks):.3f}"
    )

# %% [markdown]
# Two top candidates close together make u large even when the top-1
# probability alone looks moderate.
