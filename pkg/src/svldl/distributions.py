"""Discrete label distributions over the integer age range 1..K.

Target distributions are truncated Gaussians evaluated on the integer grid
and renormalized so the mass inside [1, K] sums to one.  Candidate variance
sets hold the sharpness values the selective-KL loss picks from.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Clamp applied to any probability before it enters a log().
PROB_FLOOR = 1e-30

# Tolerance on "sums to one" for validated probability vectors.
SUM_TOL = 1e-9


def probability_vector(d, name: str = "distribution") -> np.ndarray:
    """Coerce a LabelDistribution or array-like to a float64 probability vector.

    No simplex validation happens here: loss code must stay well defined
    slightly off the simplex so finite-difference probes can perturb single
    entries.
    """
    probs = getattr(d, "probs", d)
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-D probability vector, got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise ValueError(f"{name} needs at least 2 labels, got {arr.shape[0]}")
    return arr


def ages(k_max: int) -> np.ndarray:
    """The integer label grid 1..K as float64."""
    return np.arange(1.0, float(k_max) + 0.5)


@dataclass(frozen=True, eq=False)
class LabelDistribution:
    """Probability mass over ages 1..K.

    Invariants checked at construction: entries in [0, 1], sum within
    1e-9 of one, K >= 2.
    """

    probs: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=np.float64)
        if arr.ndim != 1 or arr.shape[0] < 2:
            raise ValueError(f"probs must be 1-D with K >= 2, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("probs must be finite")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise ValueError("probs entries must lie in [0, 1]")
        total = float(arr.sum())
        if abs(total - 1.0) > SUM_TOL:
            raise ValueError(f"probs must sum to 1 within {SUM_TOL}, got {total!r}")
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)

    @property
    def k_max(self) -> int:
        return int(self.probs.shape[0])


@dataclass(frozen=True, eq=False)
class FirstDifference:
    """First-order difference of a length-K distribution: deltas[k] = p[k+1] - p[k]."""

    deltas: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.deltas, dtype=np.float64)
        if arr.ndim != 1 or arr.shape[0] < 1:
            raise ValueError(f"deltas must be 1-D and non-empty, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "deltas", arr)


@dataclass(frozen=True, eq=False)
class VarianceCandidateSet:
    """Strictly ascending positive variance values the selection searches over."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.shape[0] == 0:
            raise ValueError("candidate set must be a non-empty 1-D array")
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
            raise ValueError("candidate variances must be finite and > 0")
        if np.any(np.diff(arr) <= 0.0):
            raise ValueError("candidate variances must be strictly ascending")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return int(self.values.shape[0])


def gaussian_probs(mu: float, s: float, k_max: int) -> np.ndarray:
    """Raw probability vector of the renormalized Gaussian target.

    probs[k] is proportional to exp(-(k - mu)^2 / s) for k = 1..K; the
    normalizer divides by the sum of the unnormalized masses.
    """
    if not np.isfinite(mu) or not (1.0 <= mu <= k_max):
        raise ValueError(f"mu must lie in [1, {k_max}], got {mu!r}")
    if not np.isfinite(s) or s <= 0.0:
        raise ValueError(f"variance s must be > 0, got {s!r}")
    k = ages(k_max)
    e = -((k - mu) ** 2) / s
    w = np.exp(e - e.max())
    return w / w.sum()


def gaussian_label_distribution(mu: float, s: float, k_max: int) -> LabelDistribution:
    """Truncated Gaussian label distribution centered on age mu with sharpness s."""
    if int(k_max) != k_max or k_max < 2:
        raise ValueError(f"K must be an integer >= 2, got {k_max!r}")
    return LabelDistribution(gaussian_probs(float(mu), float(s), int(k_max)))


def gaussian_candidate_probs(mu: float, values: np.ndarray, k_max: int) -> np.ndarray:
    """(S, K) matrix of candidate targets, one renormalized Gaussian per variance.

    Row s is bitwise identical to gaussian_probs(mu, values[s], k_max).
    """
    if not np.isfinite(mu) or not (1.0 <= mu <= k_max):
        raise ValueError(f"mu must lie in [1, {k_max}], got {mu!r}")
    k = ages(k_max)
    d2 = (k - mu) ** 2
    e = -d2[None, :] / np.asarray(values, dtype=np.float64)[:, None]
    w = np.exp(e - e.max(axis=1, keepdims=True))
    return w / w.sum(axis=1, keepdims=True)


def distribution_mean(d) -> float:
    """Expected age under the distribution: sum_k k * probs[k]."""
    p = probability_vector(d)
    return float(np.dot(ages(p.shape[0]), p))


def distribution_std(d) -> float:
    """Standard deviation of the age label under the distribution.

    sqrt(sum_k probs[k] * (k - mean)^2), the second central moment's root.
    """
    p = probability_vector(d)
    k = ages(p.shape[0])
    mean = float(np.dot(k, p))
    var = float(np.dot(p, (k - mean) ** 2))
    return float(np.sqrt(max(var, 0.0)))


def first_difference(d) -> FirstDifference:
    """Adjacent-bin differences deltas[k] = probs[k+1] - probs[k], length K-1."""
    p = probability_vector(d)
    return FirstDifference(np.diff(p))


def make_candidate_set(start: float, stop: float, step: float,
                       squared: bool = True) -> VarianceCandidateSet:
    """Arithmetic grid over [start, stop]; with `squared`, each grid point is
    squared before insertion (grid of sigma, stored as s = sigma^2).
    """
    if not (0.0 < start <= stop):
        raise ValueError(f"need 0 < start <= stop, got start={start!r} stop={stop!r}")
    if step <= 0.0:
        raise ValueError(f"step must be > 0, got {step!r}")
    count = int(np.floor((stop - start) / step + 1e-9)) + 1
    if count < 1:
        raise ValueError("empty candidate grid")
    grid = start + step * np.arange(count, dtype=np.float64)
    # Absorb accumulated float error so the last grid point hits `stop` exactly
    # whenever stop - start is an integral number of steps.
    if abs(grid[-1] - stop) <= step * 1e-6:
        grid[-1] = stop
    if squared:
        grid = grid * grid
    return VarianceCandidateSet(grid)
