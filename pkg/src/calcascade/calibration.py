"""Calibration maps from raw uncertainty to error probability.

Isotonic regression (pool adjacent violators) is the main calibrator;
temperature scaling is kept as a one-parameter comparator. Expected
calibration error uses equal-mass bins.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import expit, logit

from .exceptions import FitError, ValidationError

LOGIT_EPS = 1e-6


@dataclass(frozen=True)
class IsotonicModel:
    """Non-decreasing step function.

    ``block_values[i]`` applies to ``breakpoints[i] <= u < breakpoints[i + 1]``;
    queries below the first breakpoint clamp to the first block.
    """

    breakpoints: np.ndarray
    block_values: np.ndarray
    n: int

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        vals = np.asarray(self.block_values, dtype=float)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "block_values", vals)
        if bp.ndim != 1 or bp.shape != vals.shape or bp.size == 0:
            raise ValidationError("breakpoints and values must be equal-length, non-empty")
        if not np.all(np.isfinite(bp)) or not np.all(np.isfinite(vals)):
            raise ValidationError("breakpoints and values must be finite")
        if np.any(np.diff(bp) <= 0):
            raise ValidationError("breakpoints must be strictly increasing")
        if np.any(np.diff(vals) < 0):
            raise ValidationError("block values must be non-decreasing")
        if np.any(vals < 0) or np.any(vals > 1):
            raise ValidationError("block values must lie in [0, 1]")
        if self.n < 1:
            raise ValidationError("training size must be positive")

    def block_index(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if not np.all(np.isfinite(u)):
            raise ValueError("uncertainty must be finite")
        idx = np.searchsorted(self.breakpoints, u, side="right") - 1
        return np.clip(idx, 0, None)

    def predict(self, u):
        out = self.block_values[self.block_index(u)]
        return float(out) if np.ndim(out) == 0 else out

    def to_json(self) -> dict:
        return {
            "kind": "isotonic",
            "breakpoints": self.breakpoints.tolist(),
            "values": self.block_values.tolist(),
            "n": int(self.n),
        }


@dataclass(frozen=True)
class TemperatureModel:
    temperature: float
    eps: float = LOGIT_EPS

    def __post_init__(self):
        if not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise ValidationError(f"temperature must be positive, got {self.temperature}")

    def predict(self, u):
        u = np.asarray(u, dtype=float)
        if not np.all(np.isfinite(u)):
            raise ValueError("uncertainty must be finite")
        z = logit(np.clip(u, self.eps, 1 - self.eps))
        out = expit(z / self.temperature)
        return float(out) if np.ndim(out) == 0 else out

    def to_json(self) -> dict:
        return {"kind": "temperature", "temperature": self.temperature}


def predict(model, u):
    return model.predict(u)


# -- isotonic ---------------------------------------------------------------


def _pava(values: np.ndarray, weights: np.ndarray) -> tuple[list[int], list[float], list[float]]:
    """Pool adjacent violators on pre-sorted, pre-pooled points.

    Returns block start indices, block means and block weights. Blocks with
    equal means are merged too, so the result has strictly increasing values.
    """
    starts: list[int] = []
    means: list[float] = []
    wsum: list[float] = []
    for i in range(len(values)):
        starts.append(i)
        means.append(float(values[i]))
        wsum.append(float(weights[i]))
        while len(means) > 1 and means[-2] >= means[-1]:
            w = wsum[-2] + wsum[-1]
            m = (means[-2] * wsum[-2] + means[-1] * wsum[-1]) / w
            starts.pop()
            means.pop()
            wsum.pop()
            means[-1] = m
            wsum[-1] = w
    return starts, means, wsum


def fit_isotonic(u: Sequence[float], e: Sequence[float]) -> IsotonicModel:
    """Least-squares non-decreasing fit of error events ``e`` on uncertainty ``u``."""
    u = np.asarray(u, dtype=float)
    e = np.asarray(e, dtype=float)
    if u.shape != e.shape or u.ndim != 1:
        raise FitError("u and e must be 1-D arrays of equal length")
    if u.size < 2:
        raise FitError(f"need at least 2 pairs, got {u.size}")
    if not np.all(np.isfinite(u)):
        raise FitError("uncertainty values must be finite")
    if not np.all(np.isfinite(e)):
        raise FitError("outcomes must be finite")
    uniq, inverse, counts = np.unique(u, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=e, minlength=uniq.size)
    starts, means, _ = _pava(sums / counts, counts.astype(float))
    values = np.clip(np.asarray(means), 0.0, 1.0)
    return IsotonicModel(uniq[starts], values, int(u.size))


# -- temperature scaling ----------------------------------------------------


def _temperature_nll(log_t: float, z: np.ndarray, e: np.ndarray) -> float:
    s = z / math.exp(log_t)
    # log(1 + exp(s)) - e*s, written to avoid overflow
    return float(np.mean(np.logaddexp(0.0, s) - e * s))


def fit_temperature(u: Sequence[float], e: Sequence[float], eps: float = LOGIT_EPS) -> TemperatureModel:
    """Fit sigmoid(logit(u) / T) by maximum likelihood.

    A coarse log-spaced grid locates the basin, then a bounded scalar search
    refines it between the neighbouring grid points.
    """
    u = np.asarray(u, dtype=float)
    e = np.asarray(e, dtype=float)
    if u.size < 2 or u.shape != e.shape:
        raise FitError("need at least 2 (u, e) pairs")
    if not np.all(np.isfinite(u)):
        raise FitError("uncertainty values must be finite")
    if np.all(e == e[0]):
        raise FitError("temperature fit is degenerate for single-class outcomes")
    z = logit(np.clip(u, eps, 1 - eps))
    grid = np.linspace(math.log(1e-3), math.log(1e3), 121)
    nll = np.array([_temperature_nll(g, z, e) for g in grid])
    k = int(np.argmin(nll))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    res = minimize_scalar(
        _temperature_nll, bounds=(lo, hi), args=(z, e), method="bounded",
        options={"xatol": 1e-10},
    )
    best = res.x if res.fun <= nll[k] else grid[k]
    return TemperatureModel(float(math.exp(best)), eps)


# -- ECE --------------------------------------------------------------------


@dataclass(frozen=True)
class ReliabilityTable:
    """Equal-mass reliability diagram; bins are (mean_predicted, observed_rate, count)."""

    bins: tuple[tuple[float, float, int], ...]
    total_n: int
    ece: float
    scheme: str = "equal-mass"

    def to_json(self) -> dict:
        return {
            "scheme": self.scheme,
            "total_n": self.total_n,
            "ece": self.ece,
            "bins": [
                {"mean_predicted": p, "observed_rate": o, "count": c} for p, o, c in self.bins
            ],
        }

    def to_csv(self) -> str:
        rows = ["bin,mean_predicted,observed_rate,count"]
        rows += [f"{i},{p!r},{o!r},{c}" for i, (p, o, c) in enumerate(self.bins)]
        return "\n".join(rows) + "\n"


def expected_calibration_error(p_hat, e, bin_count: int = 10) -> ReliabilityTable:
    p_hat = np.asarray(p_hat, dtype=float)
    e = np.asarray(e, dtype=float)
    if bin_count < 2:
        raise ValueError("bin_count must be >= 2")
    if p_hat.shape != e.shape or p_hat.ndim != 1:
        raise ValueError("predictions and outcomes must be 1-D and equal length")
    if p_hat.size < bin_count:
        raise ValueError(f"need at least {bin_count} predictions, got {p_hat.size}")
    # an atom of tied p_hat may straddle a bin edge; giving each member the
    # atom's mean outcome keeps the result independent of input order
    order = np.argsort(p_hat, kind="stable")
    p_sorted = p_hat[order]
    _, inverse, counts = np.unique(p_sorted, return_inverse=True, return_counts=True)
    e_sorted = (np.bincount(inverse, weights=e[order]) / counts)[inverse]
    n = p_hat.size
    bins = []
    ece = 0.0
    for idx in np.array_split(np.arange(n), bin_count):
        pred = float(p_sorted[idx].mean())
        obs = float(e_sorted[idx].mean())
        bins.append((pred, obs, int(idx.size)))
        ece += idx.size / n * abs(obs - pred)
    return ReliabilityTable(tuple(bins), int(n), float(ece))


# -- model files ------------------------------------------------------------


def model_from_json(obj) -> IsotonicModel | TemperatureModel:
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ValidationError("calibration model must be an object with a 'kind'")
    kind = obj["kind"]
    try:
        if kind == "isotonic":
            return IsotonicModel(
                np.asarray(obj["breakpoints"], dtype=float),
                np.asarray(obj["values"], dtype=float),
                int(obj["n"]),
            )
        if kind == "temperature":
            return TemperatureModel(float(obj["temperature"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"malformed {kind} model: {exc}") from exc
    raise ValidationError(f"unknown calibration model kind {kind!r}")


def save_model(path: str | Path, model) -> None:
    Path(path).write_text(json.dumps(model.to_json()) + "\n", encoding="utf-8")


def load_model(path: str | Path):
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"model file is not valid JSON: {exc}") from exc
    return model_from_json(obj)
