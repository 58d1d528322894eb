# %% [markdown]
# # Inference records
# One JSONL line per query: the small model's top-2 token probabilities, the
# entity maps from both models and the gold map. Correctness is exact match.

# %%
import json

from calcascade.datamodel import (
    derive_correctness,
    derive_match_counts,
    dumps_records,
    iter_records,
    split_dataset,
)
from calcascade.exceptions import ValidationError

line = json.dumps({
    "id": "q1",
    "tokens": [{"p1": 0.92, "p2": 0.05}, {"p1": 0.61, "p2": 0.30}],
    "small": {"camera": "Canon R5", "lens": "50mm"},
    "large": {"camera": "Canon R5", "lens": "85mm"},
    "gold": {"camera": "Canon R5", "lens": "85mm"},
})
(record,) = iter_records([line])
print("small correct:", derive_correctness(record, "small"))
print("large correct:", derive_correctness(record, "large"))
print("small (tp, fp, fn):", derive_match_counts(record, "small"))

# %% [markdown]
# Malformed lines fail with the line number and record id.

# %%
bad = line.replace('"p2": 0.05', '"p2": 0.95')
try:
    list(iter_records([bad]))
except ValidationError as exc:
    print("rejected:", exc)

# %% [markdown]
# Splits are seeded shuffles, 30/20/50 by default.

# %%
cal, val, test = split_dataset([record] * 10, seed=0)
print({s.name: len(s) for s in (cal, val, test)})
print(dumps_records([record]).strip())
