"""Record schema, dataset splits, JSONL serialization and run configuration.

A record is one query's logged evidence: the small model's per-token top-1 and
top-2 probabilities, both models' structured outputs, and the gold entities.
Correctness events and entity match counts are derived from these, never
stored.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Literal, Mapping, Sequence

import numpy as np

from .exceptions import ValidationError

Model = Literal["small", "large"]
EntityMap = Mapping[str, str]

DEFAULT_ENTITY_SCHEMA = (
    "camera",
    "lens",
    "aperture",
    "shutter_speed",
    "iso",
    "focal_length",
)
MAX_TOKENS = 256
SPLIT_NAMES = ("calibration", "validation", "test")

_PROB_TOL = 1e-9
_RECORD_KEYS = {"id", "tokens", "small", "large", "gold"}
_TOKEN_KEYS = {"p1", "p2", "entropy"}


@dataclass(frozen=True, slots=True)
class TokenStats:
    top1_prob: float
    top2_prob: float
    entropy: float | None = None

    @property
    def margin(self) -> float:
        return self.top1_prob - self.top2_prob

    def violation(self) -> str | None:
        """Return a description of the first broken invariant, or None."""
        p1, p2 = self.top1_prob, self.top2_prob
        if not (math.isfinite(p1) and math.isfinite(p2)):
            return "token probabilities must be finite"
        if p2 < -_PROB_TOL:
            return f"top2_prob {p2} is negative"
        if p1 > 1 + _PROB_TOL:
            return f"top1_prob {p1} exceeds 1"
        if p2 > p1 + _PROB_TOL:
            return f"top2_prob {p2} exceeds top1_prob {p1}"
        if p1 + p2 > 1 + _PROB_TOL:
            return f"top1_prob + top2_prob = {p1 + p2} exceeds 1"
        if self.entropy is not None and not (self.entropy >= 0 and math.isfinite(self.entropy)):
            return f"entropy {self.entropy} must be finite and nonnegative"
        return None


@dataclass(frozen=True)
class InferenceRecord:
    id: str
    small_tokens: tuple[TokenStats, ...]
    small_output: EntityMap
    large_output: EntityMap
    gold: EntityMap

    def output(self, model: Model) -> EntityMap:
        if model == "small":
            return self.small_output
        if model == "large":
            return self.large_output
        raise ValueError(f"unknown model {model!r}")

    def validate(self, schema: Sequence[str] | None = None) -> None:
        if not isinstance(self.id, str) or not self.id:
            raise ValidationError("id must be a non-empty string", record_id=self.id)
        if len(self.small_tokens) == 0:
            raise ValidationError("small_tokens must be non-empty", record_id=self.id)
        if len(self.small_tokens) > MAX_TOKENS:
            raise ValidationError(
                f"{len(self.small_tokens)} tokens exceeds the {MAX_TOKENS}-token cap",
                record_id=self.id,
            )
        for t, tok in enumerate(self.small_tokens):
            problem = tok.violation()
            if problem is not None:
                raise ValidationError(f"token {t}: {problem}", record_id=self.id)
        allowed = set(schema) if schema is not None else None
        for name in ("small_output", "large_output", "gold"):
            for key, value in getattr(self, name).items():
                if allowed is not None and key not in allowed:
                    raise ValidationError(
                        f"unknown entity type {key!r} in {name}", record_id=self.id
                    )
                if not isinstance(value, str) or not value:
                    raise ValidationError(
                        f"{name}[{key!r}] must be a non-empty string", record_id=self.id
                    )


@dataclass(frozen=True)
class DatasetSplit:
    name: str
    records: tuple[InferenceRecord, ...]

    def __post_init__(self):
        if self.name not in SPLIT_NAMES:
            raise ValueError(f"split name must be one of {SPLIT_NAMES}, got {self.name!r}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[InferenceRecord]:
        return iter(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]


@dataclass(frozen=True)
class CostModel:
    small_cost: float = 1.0
    large_cost: float = 3.02

    def __post_init__(self):
        if not (self.large_cost > self.small_cost > 0):
            raise ValidationError(
                f"costs must satisfy large_cost > small_cost > 0, "
                f"got small={self.small_cost}, large={self.large_cost}"
            )

    @property
    def ratio(self) -> float:
        return self.large_cost / self.small_cost


@dataclass(frozen=True)
class RunConfig:
    entity_schema: tuple[str, ...] = DEFAULT_ENTITY_SCHEMA
    cost_model: CostModel = field(default_factory=CostModel)
    accuracy_target: float = 0.91
    ece_bins: int = 10
    bootstrap_resamples: int = 1000
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.accuracy_target <= 1.0:
            raise ValidationError(f"accuracy_target must lie in [0, 1], got {self.accuracy_target}")
        if self.ece_bins < 2:
            raise ValidationError(f"ece_bins must be >= 2, got {self.ece_bins}")
        if self.bootstrap_resamples < 1:
            raise ValidationError(
                f"bootstrap_resamples must be >= 1, got {self.bootstrap_resamples}"
            )
        if self.rng_seed < 0:
            raise ValidationError(f"seed must be unsigned, got {self.rng_seed}")
        if len(set(self.entity_schema)) != len(self.entity_schema) or not self.entity_schema:
            raise ValidationError("entity_schema must be a non-empty list of distinct names")

    def to_json(self) -> dict:
        return {
            "entity_schema": list(self.entity_schema),
            "small_cost": self.cost_model.small_cost,
            "large_cost": self.cost_model.large_cost,
            "accuracy_target": self.accuracy_target,
            "ece_bins": self.ece_bins,
            "bootstrap_resamples": self.bootstrap_resamples,
            "seed": self.rng_seed,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> RunConfig:
        known = {
            "entity_schema",
            "small_cost",
            "large_cost",
            "accuracy_target",
            "ece_bins",
            "bootstrap_resamples",
            "seed",
        }
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        defaults = cls()
        try:
            return cls(
                entity_schema=tuple(obj.get("entity_schema", defaults.entity_schema)),
                cost_model=CostModel(
                    float(obj.get("small_cost", defaults.cost_model.small_cost)),
                    float(obj.get("large_cost", defaults.cost_model.large_cost)),
                ),
                accuracy_target=float(obj.get("accuracy_target", defaults.accuracy_target)),
                ece_bins=int(obj.get("ece_bins", defaults.ece_bins)),
                bootstrap_resamples=int(
                    obj.get("bootstrap_resamples", defaults.bootstrap_resamples)
                ),
                rng_seed=int(obj.get("seed", defaults.rng_seed)),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed config: {exc}") from exc


def load_config(path: str | Path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ValidationError("config must be a JSON object")
    return RunConfig.from_json(obj)


# -- serialization ----------------------------------------------------------


def record_to_json(record: InferenceRecord) -> dict:
    tokens = []
    for tok in record.small_tokens:
        item = {"p1": tok.top1_prob, "p2": tok.top2_prob}
        if tok.entropy is not None:
            item["entropy"] = tok.entropy
        tokens.append(item)
    return {
        "id": record.id,
        "tokens": tokens,
        "small": dict(record.small_output),
        "large": dict(record.large_output),
        "gold": dict(record.gold),
    }


def _entity_map(obj, name: str, line: int, record_id) -> dict[str, str]:
    if not isinstance(obj, dict):
        raise ValidationError(f"{name!r} must be an object", line=line, record_id=record_id)
    return dict(obj)


def _token(obj, line: int, record_id) -> TokenStats:
    if not isinstance(obj, dict):
        raise ValidationError("token entries must be objects", line=line, record_id=record_id)
    extra = set(obj) - _TOKEN_KEYS
    if extra or "p1" not in obj or "p2" not in obj:
        raise ValidationError(
            f"token keys must be p1, p2 and optional entropy, got {sorted(obj)}",
            line=line,
            record_id=record_id,
        )
    try:
        entropy = obj.get("entropy")
        return TokenStats(
            float(obj["p1"]), float(obj["p2"]), None if entropy is None else float(entropy)
        )
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"non-numeric token field: {exc}", line=line, record_id=record_id)


def parse_tokens(obj, *, line: int | None = None, record_id=None) -> tuple[TokenStats, ...]:
    """Validated token statistics from a JSON array of ``{p1, p2, entropy?}``."""
    if not isinstance(obj, list) or not obj:
        raise ValidationError("'tokens' must be a non-empty array", line=line, record_id=record_id)
    if len(obj) > MAX_TOKENS:
        raise ValidationError(
            f"{len(obj)} tokens exceeds the {MAX_TOKENS}-token cap", line=line, record_id=record_id
        )
    tokens = tuple(_token(t, line, record_id) for t in obj)
    for t, tok in enumerate(tokens):
        problem = tok.violation()
        if problem is not None:
            raise ValidationError(f"token {t}: {problem}", line=line, record_id=record_id)
    return tokens


def record_from_json(obj, schema: Sequence[str] | None = None, *, line: int | None = None):
    if not isinstance(obj, dict):
        raise ValidationError("record must be a JSON object", line=line)
    record_id = obj.get("id")
    unknown = set(obj) - _RECORD_KEYS
    if unknown:
        raise ValidationError(f"unknown keys {sorted(unknown)}", line=line, record_id=record_id)
    missing = _RECORD_KEYS - set(obj)
    if missing:
        raise ValidationError(f"missing keys {sorted(missing)}", line=line, record_id=record_id)
    if not isinstance(obj["tokens"], list):
        raise ValidationError("'tokens' must be an array", line=line, record_id=record_id)
    record = InferenceRecord(
        id=record_id,
        small_tokens=tuple(_token(t, line, record_id) for t in obj["tokens"]),
        small_output=_entity_map(obj["small"], "small", line, record_id),
        large_output=_entity_map(obj["large"], "large", line, record_id),
        gold=_entity_map(obj["gold"], "gold", line, record_id),
    )
    try:
        record.validate(schema)
    except ValidationError as exc:
        if line is not None and exc.line is None:
            raise ValidationError(str(exc), line=line) from None
        raise
    return record


def iter_records(lines: Iterable[str], schema: Sequence[str] | None = None):
    seen: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"JSON parse error: {exc.msg}", line=lineno) from None
        record = record_from_json(obj, schema, line=lineno)
        if record.id in seen:
            raise ValidationError("duplicate id", line=lineno, record_id=record.id)
        seen.add(record.id)
        yield record


def load_records(path: str | Path, schema: Sequence[str] | None = None) -> list[InferenceRecord]:
    """Read and validate a records JSONL file, preserving file order."""
    with open(path, encoding="utf-8") as fh:
        return list(iter_records(fh, schema))


def dumps_records(records: Iterable[InferenceRecord]) -> str:
    return "".join(json.dumps(record_to_json(r)) + "\n" for r in records)


def dump_records(path: str | Path, records: Iterable[InferenceRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(record_to_json(r)) + "\n")


# -- splits -----------------------------------------------------------------


def split_dataset(
    records: Sequence[InferenceRecord],
    fractions: tuple[float, float, float] = (0.30, 0.20, 0.50),
    seed: int = 0,
) -> tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    """Shuffle with `seed` and cut into calibration / validation / test.

    Calibration and validation sizes are floor-rounded; the remainder goes to
    test.
    """
    if len(records) == 0:
        raise ValueError("cannot split an empty record set")
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError(f"fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(records)
    n_cal = math.floor(n * fractions[0] + 1e-9)
    n_val = math.floor(n * fractions[1] + 1e-9)
    order = np.random.default_rng(seed).permutation(n)
    parts = (order[:n_cal], order[n_cal : n_cal + n_val], order[n_cal + n_val :])
    return tuple(
        DatasetSplit(name, tuple(records[i] for i in idx))
        for name, idx in zip(SPLIT_NAMES, parts)
    )


def check_disjoint(splits: Sequence[DatasetSplit]) -> None:
    seen: dict[str, str] = {}
    for split in splits:
        for rid in split.ids:
            if rid in seen:
                raise ValidationError(
                    f"appears in both {seen[rid]} and {split.name}", record_id=rid
                )
            seen[rid] = split.name


# -- derived outcomes -------------------------------------------------------


def derive_correctness(record: InferenceRecord, model: Model) -> int:
    """Exact-match error event: 0 if the model's entities equal gold, else 1."""
    return 0 if dict(record.output(model)) == dict(record.gold) else 1


def derive_match_counts(record: InferenceRecord, model: Model) -> tuple[int, int, int]:
    """Entity-level (tp, fp, fn); a present-but-wrong value counts one fp and one fn."""
    pred = record.output(model)
    gold = record.gold
    tp = fp = fn = 0
    for key in set(pred) | set(gold):
        p, g = pred.get(key), gold.get(key)
        if p is not None and g is not None and p == g:
            tp += 1
            continue
        if p is not None:
            fp += 1
        if g is not None:
            fn += 1
    return tp, fp, fn


def match_count_matrix(records: Sequence[InferenceRecord], model: Model) -> np.ndarray:
    """(n, 3) int64 array of per-record (tp, fp, fn)."""
    out = np.zeros((len(records), 3), dtype=np.int64)
    for i, r in enumerate(records):
        out[i] = derive_match_counts(r, model)
    return out


@dataclass(frozen=True)
class Outcomes:
    """Per-record match counts for both models, overall and per entity type.

    ``small`` and ``large`` are (n, 3) arrays of (tp, fp, fn); the ``*_by_entity``
    arrays are (n, k, 3) over ``schema``. Entity types outside ``schema`` only
    contribute to the overall counts.
    """

    ids: tuple[str, ...]
    schema: tuple[str, ...]
    small: np.ndarray
    large: np.ndarray
    small_by_entity: np.ndarray
    large_by_entity: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_records(
        cls, records: Sequence[InferenceRecord], schema: Sequence[str] = DEFAULT_ENTITY_SCHEMA
    ) -> Outcomes:
        schema = tuple(schema)
        col = {k: j for j, k in enumerate(schema)}
        n = len(records)
        by = {m: np.zeros((n, len(schema), 3), dtype=np.int64) for m in ("small", "large")}
        totals = {m: np.zeros((n, 3), dtype=np.int64) for m in ("small", "large")}
        for i, r in enumerate(records):
            gold = r.gold
            for m in ("small", "large"):
                pred = r.output(m)
                arr, tot = by[m], totals[m]
                for key in set(pred) | set(gold):
                    p, g = pred.get(key), gold.get(key)
                    if p is not None and p == g:
                        c = (1, 0, 0)
                    else:
                        c = (0, int(p is not None), int(g is not None))
                    tot[i] += c
                    j = col.get(key)
                    if j is not None:
                        arr[i, j] += c
        return cls(
            tuple(r.id for r in records),
            schema,
            totals["small"],
            totals["large"],
            by["small"],
            by["large"],
        )

    def subset(self, index) -> Outcomes:
        index = np.asarray(index)
        return Outcomes(
            tuple(self.ids[i] for i in np.arange(len(self.ids))[index]),
            self.schema,
            self.small[index],
            self.large[index],
            self.small_by_entity[index],
            self.large_by_entity[index],
        )

    def routed(self, escalate: np.ndarray) -> np.ndarray:
        """(n, 3) counts of whichever model each record was routed to."""
        escalate = np.asarray(escalate, dtype=bool)
        return np.where(escalate[:, None], self.large, self.small)

    def routed_by_entity(self, escalate: np.ndarray) -> np.ndarray:
        escalate = np.asarray(escalate, dtype=bool)
        return np.where(escalate[:, None, None], self.large_by_entity, self.small_by_entity)
