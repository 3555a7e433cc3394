"""Finite-difference verification of every analytic gradient.

Each check draws seeded random instances, compares the analytic gradient
against central differences (step 1e-6, float64), and reports a norm-based
relative error ||a - n|| / max(||a|| + ||n||, tiny).  Losses must stay within
1e-5, the full tiny model within 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from .distributions import make_candidate_set
from .losses import LossWeights, fold_age_gradients, hybrid_loss, softmax
from .model import ModelConfig, ModelParameters, PARAM_FIELDS, backward, forward_cached, zero_gradients

FD_STEP = 1e-6
LOSS_TOL = 1e-5
MODEL_TOL = 1e-4

LOSS_COMPONENTS = ("kl_divergence", "svldl_kl_loss", "diff_loss",
                   "ccc_loss", "variance_loss", "focal_loss")


def central_difference(fn, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Two-sided difference quotient of a scalar function, entry by entry."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        flat[i] = (fn(xp) - fn(xm)) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(float(np.linalg.norm(a) + np.linalg.norm(n)), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def _random_probs(rng, k):
    return softmax(rng.uniform(-2.0, 2.0, size=k))


def _check_kl(rng):
    k = int(rng.integers(5, 40))
    t = _random_probs(rng, k)
    p = _random_probs(rng, k)
    _, grad = L.kl_divergence(t, p)
    num = central_difference(lambda q: L.kl_divergence(t, q)[0], p)
    return relative_error(grad, num)


def _check_svldl_kl(rng):
    k = int(rng.integers(8, 25))
    n = int(rng.integers(1, 4))
    cands = make_candidate_set(0.5, 5.0, 0.5, squared=True)
    mus = rng.uniform(2.0, k - 1.0, size=n)
    p = np.stack([_random_probs(rng, k) for _ in range(n)])
    _, _, grad = L.svldl_kl_loss(mus, p, cands)
    num = central_difference(lambda q: L.svldl_kl_loss(mus, q.reshape(n, k), cands)[0],
                             p.ravel()).reshape(n, k)
    return relative_error(grad, num)


def _check_diff(rng):
    k = int(rng.integers(5, 40))
    mu = float(rng.uniform(1.5, k - 0.5))
    s_star = float(rng.uniform(0.5, 9.0))
    p = _random_probs(rng, k)
    _, grad = L.diff_loss(mu, s_star, p)
    num = central_difference(lambda q: L.diff_loss(mu, s_star, q)[0], p)
    return relative_error(grad, num)


def _check_ccc(rng):
    n = int(rng.integers(2, 20))
    t = rng.uniform(18.0, 70.0, size=n)
    while np.ptp(t) < 1.0:
        t = rng.uniform(18.0, 70.0, size=n)
    p = t + rng.normal(0.0, 8.0, size=n)
    _, grad = L.ccc_loss(t, p)
    num = central_difference(lambda q: L.ccc_loss(t, q)[0], p)
    return relative_error(grad, num)


def _check_variance(rng):
    k = int(rng.integers(5, 40))
    p = _random_probs(rng, k)
    _, grad = L.variance_loss(p)
    num = central_difference(lambda q: L.variance_loss(q)[0], p)
    return relative_error(grad, num)


def _check_focal(rng):
    gamma = float(rng.choice([0.0, 0.5, 1.0, 2.0, 10.0]))
    target = int(rng.integers(0, 2))
    logits = rng.uniform(-3.0, 3.0, size=2)
    _, grad = L.focal_loss(target, softmax(logits), gamma)
    num = central_difference(lambda z: L.focal_loss(target, softmax(z), gamma)[0], logits)
    return relative_error(grad, num)


_LOSS_CHECKS = {
    "kl_divergence": _check_kl,
    "svldl_kl_loss": _check_svldl_kl,
    "diff_loss": _check_diff,
    "ccc_loss": _check_ccc,
    "variance_loss": _check_variance,
    "focal_loss": _check_focal,
}


def run_loss_checks(seed: int = 0, instances: int = 100) -> dict:
    """Max relative FD error per loss component over seeded random instances."""
    out = {}
    for idx, (name, check) in enumerate(_LOSS_CHECKS.items()):
        rng = np.random.default_rng([seed, idx])
        out[name] = max(check(rng) for _ in range(instances))
    return out


# tiny configuration used for the end-to-end model gradient check
TINY_CONFIG = ModelConfig(k_max=10, num_layers=2, feature_dim=4, hidden_size=8)


def _flatten(params: ModelParameters) -> np.ndarray:
    return np.concatenate([getattr(params, f).ravel() for f in PARAM_FIELDS])


def _unflatten(vec: np.ndarray, template: ModelParameters) -> ModelParameters:
    params = template.copy()
    off = 0
    for name in PARAM_FIELDS:
        arr = getattr(params, name)
        setattr(params, name, vec[off:off + arr.size].reshape(arr.shape).copy())
        off += arr.size
    return params


def _model_instance(rng):
    cfg = TINY_CONFIG
    n = 3
    feats = [rng.normal(size=(cfg.num_layers, 3, cfg.feature_dim)) for _ in range(n)]
    mus = rng.uniform(2.0, cfg.k_max - 1.0, size=n)
    genders = rng.integers(0, 2, size=n)
    params = ModelParameters.init(cfg, seed=int(rng.integers(0, 2 ** 31)))
    cands = make_candidate_set(0.5, 4.0, 0.5, squared=True)
    weights = LossWeights()
    return feats, mus, genders, params, cands, weights


def _model_total(vec, template, feats, mus, genders, cands, weights):
    params = _unflatten(vec, template)
    caches = [forward_cached(f, params) for f in feats]
    report, _ = hybrid_loss(mus, genders,
                            np.stack([c.age_logits for c in caches]),
                            np.stack([c.gender_logits for c in caches]),
                            cands, weights)
    return report.total


def _check_model_once(rng):
    feats, mus, genders, params, cands, weights = _model_instance(rng)
    caches = [forward_cached(f, params) for f in feats]
    _, hg = hybrid_loss(mus, genders,
                        np.stack([c.age_logits for c in caches]),
                        np.stack([c.gender_logits for c in caches]),
                        cands, weights)
    d_age = fold_age_gradients(hg, np.stack([c.age_probs for c in caches]))
    grads = zero_gradients(params)
    for i, cache in enumerate(caches):
        backward(cache, params, d_age[i], hg.gender_logits[i], grads)
    analytic = np.concatenate([grads[f].ravel() for f in PARAM_FIELDS])
    numeric = central_difference(
        lambda v: _model_total(v, params, feats, mus, genders, cands, weights),
        _flatten(params))
    return relative_error(analytic, numeric)


def run_model_check(seed: int = 0, instances: int = 100) -> float:
    rng = np.random.default_rng([seed, 909])
    return max(_check_model_once(rng) for _ in range(instances))


@dataclass(frozen=True)
class CheckResult:
    component: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def run_all(seed: int = 0, instances: int = 100, model_instances: int | None = None,
            corrupt: str | None = None) -> list:
    """Run every gradient suite; `corrupt` inflates one component's reported
    error (negative-control hook for the CLI tests)."""
    results = []
    for name, err in run_loss_checks(seed, instances).items():
        results.append(CheckResult(name, err, LOSS_TOL))
    results.append(CheckResult(
        "model", run_model_check(seed, model_instances or instances), MODEL_TOL))
    if corrupt is not None:
        names = [r.component for r in results]
        if corrupt not in names:
            raise ValueError(f"unknown component {corrupt!r}; choose from {names}")
        results = [CheckResult(r.component, r.max_error + 1.0, r.tolerance)
                   if r.component == corrupt else r for r in results]
    return results
