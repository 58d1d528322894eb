"""Per-record uncertainty and confidence signals from token statistics."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datamodel import InferenceRecord, TokenStats
from .exceptions import SignalUnavailableError


class SignalKind(str, enum.Enum):
    MARGIN = "margin"
    MEAN_ENTROPY = "mean_entropy"
    MEAN_MAX_PROB = "mean_max_prob"

    @property
    def is_confidence(self) -> bool:
        """True when larger scores mean *more* certain."""
        return self is SignalKind.MEAN_MAX_PROB


def _require_tokens(tokens: Sequence[TokenStats]) -> None:
    if len(tokens) == 0:
        raise SignalUnavailableError("token sequence is empty")


def margin_uncertainty(tokens: Sequence[TokenStats]) -> float:
    """One minus the mean top-1/top-2 margin; 0 is fully confident, 1 is a coin flip."""
    _require_tokens(tokens)
    total = math.fsum(t.top1_prob - t.top2_prob for t in tokens)
    u = 1.0 - total / len(tokens)
    # tolerance-level probability violations must not leak outside [0, 1]
    return min(1.0, max(0.0, u))


def mean_entropy(tokens: Sequence[TokenStats]) -> float:
    _require_tokens(tokens)
    values = []
    for i, t in enumerate(tokens):
        if t.entropy is None:
            raise SignalUnavailableError(f"token {i} has no entropy")
        values.append(t.entropy)
    return math.fsum(values) / len(values)


def mean_max_prob_confidence(tokens: Sequence[TokenStats]) -> float:
    _require_tokens(tokens)
    c = math.fsum(t.top1_prob for t in tokens) / len(tokens)
    return min(1.0, max(0.0, c))


_SIGNALS = {
    SignalKind.MARGIN: margin_uncertainty,
    SignalKind.MEAN_ENTROPY: mean_entropy,
    SignalKind.MEAN_MAX_PROB: mean_max_prob_confidence,
}


def record_signal(record: InferenceRecord, kind: SignalKind | str) -> float:
    kind = SignalKind(kind)
    try:
        return _SIGNALS[kind](record.small_tokens)
    except SignalUnavailableError as exc:
        raise SignalUnavailableError(str(exc), record_id=record.id) from None


@dataclass(frozen=True)
class ScoreStream:
    """Scores for a sequence of records, tagged with their orientation.

    `is_confidence` is True for confidence scores (escalate when low) and False
    for uncertainty scores (escalate when high).
    """

    kind: SignalKind
    ids: tuple[str, ...]
    scores: np.ndarray
    is_confidence: bool

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(zip(self.ids, self.scores.tolist()))


def score_records(records: Sequence[InferenceRecord], kind: SignalKind | str) -> ScoreStream:
    kind = SignalKind(kind)
    scores = np.fromiter(
        (record_signal(r, kind) for r in records), dtype=float, count=len(records)
    )
    return ScoreStream(
        kind=kind,
        ids=tuple(r.id for r in records),
        scores=scores,
        is_confidence=kind.is_confidence,
    )
