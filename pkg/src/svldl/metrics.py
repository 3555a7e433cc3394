"""Evaluation metrics: MAE, Pearson correlation, and the unimodal coefficient.

The unimodal coefficient counts valleys (a strict fall followed by a strict
rise in the first difference) inside a window of q predicted standard
deviations around the predicted mean; the reported mode count is that valley
count plus one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import ages, probability_vector


@dataclass(frozen=True)
class EvalReport:
    """One evaluation pass: regression error, correlation, and modality."""

    mae: float
    pcc: float
    eta_q: float
    mode_count: float
    q: float

    def __post_init__(self):
        if self.mae < 0.0:
            raise ValueError(f"mae must be >= 0, got {self.mae!r}")
        if not (-1.0 - 1e-9 <= self.pcc <= 1.0 + 1e-9):
            raise ValueError(f"pcc must lie in [-1, 1], got {self.pcc!r}")
        if abs(self.mode_count - (self.eta_q + 1.0)) > 1e-12:
            raise ValueError("mode_count must equal eta_q + 1")


def mae(true_ages, predicted_ages) -> float:
    """Mean absolute error between the two age vectors."""
    t = np.asarray(true_ages, dtype=np.float64).ravel()
    p = np.asarray(predicted_ages, dtype=np.float64).ravel()
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.shape[0]} true vs {p.shape[0]} predicted")
    if t.shape[0] == 0:
        raise ValueError("empty input")
    return float(np.abs(p - t).mean())


def pcc(true_ages, predicted_ages) -> float:
    """Sample Pearson correlation, exactly 1.0 for identical non-constant input.

    Computed as sum(dx*dy) / sqrt(sum(dx^2) * sum(dy^2)), which equals the
    1/(N-1) definition with sample standard deviations.
    """
    t = np.asarray(true_ages, dtype=np.float64).ravel()
    p = np.asarray(predicted_ages, dtype=np.float64).ravel()
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.shape[0]} true vs {p.shape[0]} predicted")
    if t.shape[0] < 2:
        raise ValueError("correlation needs at least 2 samples")
    dt = t - t.mean()
    dp = p - p.mean()
    st = float(np.dot(dt, dt))
    sp = float(np.dot(dp, dp))
    if st <= 0.0 or sp <= 0.0:
        raise ValueError("correlation undefined for a constant vector")
    return float(np.dot(dp, dt) / np.sqrt(sp * st))


def _valley_count(p: np.ndarray, q: float) -> int:
    """Valleys of one distribution inside its q-standard-deviation window."""
    k_max = p.shape[0]
    k = ages(k_max)
    mu = float(np.dot(k, p))
    sigma = float(np.sqrt(max(np.dot(p, (k - mu) ** 2), 0.0)))
    k_lo = max(1.0, mu - q * sigma)
    k_hi = min(mu + q * sigma, float(k_max - 1))
    deltas = np.diff(p)
    # valley at k: delta(k) < 0 and delta(k+1) > 0, with k >= k_lo and k+1 <= k_hi
    ks = np.arange(1, k_max - 1)
    mask = (ks >= k_lo) & (ks + 1 <= k_hi) & (deltas[ks - 1] < 0.0) & (deltas[ks] > 0.0)
    return int(mask.sum())


def unimodal_coefficient(distributions, q: float = 2.0):
    """Average valley count within q predicted standard deviations of the mean.

    Accepts a list of LabelDistribution/1-D vectors or an (N, K) matrix.
    Returns (eta_q, mode_count) with mode_count = eta_q + 1.
    """
    if q <= 0.0:
        raise ValueError(f"q must be > 0, got {q!r}")
    if hasattr(distributions, "probs"):
        rows = [probability_vector(distributions)]
    elif isinstance(distributions, np.ndarray) and distributions.ndim == 2:
        arr = np.asarray(distributions, dtype=np.float64)
        rows = [arr[i] for i in range(arr.shape[0])]
    elif isinstance(distributions, np.ndarray) and distributions.ndim == 1:
        rows = [probability_vector(distributions)]
    else:
        rows = [probability_vector(d) for d in distributions]
    if len(rows) == 0:
        raise ValueError("empty distribution list")
    counts = [_valley_count(row, float(q)) for row in rows]
    eta = float(np.mean(counts))
    return eta, eta + 1.0


def eval_report(true_ages, predicted_ages, distributions, q: float = 2.0) -> EvalReport:
    """Bundle the three metrics over one evaluation batch."""
    eta, modes = unimodal_coefficient(distributions, q)
    return EvalReport(mae=mae(true_ages, predicted_ages),
                      pcc=pcc(true_ages, predicted_ages),
                      eta_q=eta, mode_count=modes, q=float(q))
