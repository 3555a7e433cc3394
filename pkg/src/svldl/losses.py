"""The hybrid training loss and its analytic gradients.

Five components are combined as a weighted sum: an agreement (concordance)
loss on predicted ages, a selective-variance KL loss against renormalized
Gaussian targets, a distribution-variance penalty, a first-difference shape
loss, and a focal loss on the auxiliary gender head.

Gradient conventions:

* the per-loss functions return gradients with respect to the quantity named
  in their contract (predicted probabilities for KL/diff/variance, predicted
  ages for the concordance loss, gender logits for the focal loss);
* `hybrid_loss` returns gradients where the model consumes them: pre-softmax
  age logits (distribution losses, chained through the softmax Jacobian),
  predicted ages (concordance), and gender logits (focal).

Every formula stays well defined for probability vectors slightly off the
simplex, so analytic gradients can be verified with central finite
differences entry by entry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distributions import (
    PROB_FLOOR,
    VarianceCandidateSet,
    ages,
    gaussian_candidate_probs,
    gaussian_probs,
    probability_vector,
)

#: keys used in LossReport.components, in the weighted-sum order
COMPONENT_KEYS = ("ccc", "kl", "variance", "diff", "gender")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


def softmax_vjp(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the logits.

    d/dz_j = p_j * (g_j - sum_k g_k p_k), applied along the last axis.
    """
    inner = np.sum(grad_probs * probs, axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the hybrid loss terms plus the focal focus parameter."""

    ccc: float = 10.0
    kl: float = 1.0
    variance: float = 0.1
    diff: float = 0.1
    gender: float = 0.01
    gamma: float = 10.0

    def __post_init__(self):
        for name in ("ccc", "kl", "variance", "diff", "gender", "gamma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0.0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v!r}")


@dataclass
class LossReport:
    """Total loss plus the unweighted per-component values that produced it.

    Components whose weight is zero are skipped entirely and absent from the
    map.  `selected_variances` holds the per-sample selected s* whenever the
    KL or diff component ran, else None.
    """

    total: float
    components: dict = field(default_factory=dict)
    selected_variances: np.ndarray | None = None


@dataclass
class HybridGradients:
    """Gradients of the weighted total, at the surfaces the model consumes.

    age_logits: (N, K) from the KL, variance and diff components.
    ages:       (N,) from the concordance component (w.r.t. predicted ages).
    gender_logits: (N, 2) from the focal component.
    """

    age_logits: np.ndarray
    ages: np.ndarray
    gender_logits: np.ndarray


def kl_divergence(target, predicted):
    """KL(target || predicted) with 0*log(0/x) = 0 and the probability floor.

    Returns (value, gradient w.r.t. the predicted probabilities), the gradient
    being -target/predicted elementwise.
    """
    t = probability_vector(target, "target")
    p = probability_vector(predicted, "predicted")
    if t.shape != p.shape:
        raise ValueError(f"K mismatch: target has {t.shape[0]} labels, predicted {p.shape[0]}")
    pc = np.maximum(p, PROB_FLOOR)
    tc = np.maximum(t, PROB_FLOOR)
    value = float(np.sum(np.where(t > 0.0, t * (np.log(tc) - np.log(pc)), 0.0)))
    grad = -t / pc
    return value, grad


def _candidate_kl_row(mu: float, candidates: VarianceCandidateSet, p: np.ndarray):
    """KL of every candidate target against `p`; returns (kl_per_candidate, targets)."""
    targets = gaussian_candidate_probs(mu, candidates.values, p.shape[0])
    logp = np.log(np.maximum(p, PROB_FLOOR))
    logt = np.log(np.maximum(targets, PROB_FLOOR))
    kl = np.sum(np.where(targets > 0.0, targets * (logt - logp[None, :]), 0.0), axis=1)
    return kl, targets


def svldl_select(mu: float, candidates: VarianceCandidateSet, predicted):
    """Pick the candidate variance whose Gaussian target is KL-closest to `predicted`.

    Returns (s_star, minimal KL).  Ties break toward the smallest variance
    (argmin takes the first minimum of the ascending grid).
    """
    p = probability_vector(predicted, "predicted")
    kl, _ = _candidate_kl_row(float(mu), candidates, p)
    i = int(np.argmin(kl))
    return float(candidates.values[i]), float(kl[i])


def svldl_kl_loss(mus, predicted, candidates: VarianceCandidateSet):
    """Mean selected-KL over a batch.

    `predicted` is an (N, K) matrix of probability rows.  Returns
    (mean loss, per-sample s*, (N, K) gradient w.r.t. the probability rows).
    The selection is treated as locally constant: each sample's gradient is
    the plain KL gradient at its selected target, divided by N.
    """
    mus = np.asarray(mus, dtype=np.float64).ravel()
    pred = np.asarray(predicted, dtype=np.float64)
    if pred.ndim != 2 or pred.shape[0] != mus.shape[0]:
        raise ValueError(f"predicted must be (N, K) matching {mus.shape[0]} ages, got {pred.shape}")
    n = mus.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    losses = np.empty(n)
    s_stars = np.empty(n)
    grads = np.empty_like(pred)
    for i in range(n):
        p = pred[i]
        kl, targets = _candidate_kl_row(float(mus[i]), candidates, p)
        j = int(np.argmin(kl))
        losses[i] = kl[j]
        s_stars[i] = candidates.values[j]
        grads[i] = -targets[j] / np.maximum(p, PROB_FLOOR) / n
    return float(losses.mean()), s_stars, grads


def diff_loss(mu: float, s_star: float, predicted):
    """Squared-error fit of the predicted first difference to the target's.

    The target is the renormalized Gaussian at (mu, s_star).  Returns
    (value, gradient w.r.t. the predicted probabilities).
    """
    if not np.isfinite(s_star) or s_star <= 0.0:
        raise ValueError(f"s_star must be > 0, got {s_star!r}")
    p = probability_vector(predicted, "predicted")
    target = gaussian_probs(float(mu), float(s_star), p.shape[0])
    r = np.diff(target) - np.diff(p)
    value = float(np.dot(r, r))
    grad = np.zeros_like(p)
    grad[:-1] += 2.0 * r
    grad[1:] -= 2.0 * r
    return value, grad


def ccc_loss(true_ages, predicted_ages):
    """One minus the concordance correlation coefficient over the batch.

    Population (1/N) statistics throughout.  Returns (value, gradient w.r.t.
    the predicted ages).
    """
    t = np.asarray(true_ages, dtype=np.float64).ravel()
    p = np.asarray(predicted_ages, dtype=np.float64).ravel()
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.shape[0]} true vs {p.shape[0]} predicted")
    n = t.shape[0]
    if n < 2:
        raise ValueError("concordance loss needs a batch of at least 2")
    mt = t.mean()
    mp = p.mean()
    dt = t - mt
    dp = p - mp
    cov = float(np.dot(dp, dt)) / n
    vp = float(np.dot(dp, dp)) / n
    vt = float(np.dot(dt, dt)) / n
    md = mp - mt
    denom = vp + vt + md * md
    if denom <= 0.0 or not np.isfinite(denom):
        raise ValueError("degenerate batch: zero concordance denominator")
    value = 1.0 - 2.0 * cov / denom
    grad = -(2.0 / (n * denom * denom)) * (dt * denom - 2.0 * cov * (dp + md))
    return float(value), grad


def variance_loss(predicted):
    """Second central moment of the predicted distribution.

    sum_k p_k (k - mu_hat)^2 with mu_hat = sum_k k p_k.  Returns (value,
    gradient w.r.t. the probabilities); the gradient carries mu_hat's
    dependence on p, so it stays exact off the simplex.
    """
    p = probability_vector(predicted, "predicted")
    k = ages(p.shape[0])
    mu_hat = float(np.dot(k, p))
    total = float(p.sum())
    centered = k - mu_hat
    value = float(np.dot(p, centered ** 2))
    grad = centered ** 2 - 2.0 * k * mu_hat * (1.0 - total)
    return value, grad


def focal_loss(true_class: int, predicted_probs, gamma: float):
    """Focal loss -(1 - p_t)^gamma * log(p_t) on a 2-class distribution.

    Returns (value, gradient w.r.t. the two gender logits).  At gamma = 0
    this is plain cross-entropy.
    """
    p = np.asarray(getattr(predicted_probs, "probs", predicted_probs), dtype=np.float64).ravel()
    if p.shape[0] != 2:
        raise ValueError(f"gender distribution must have 2 classes, got {p.shape[0]}")
    if np.any(p < 0.0) or abs(float(p.sum()) - 1.0) > 1e-6:
        raise ValueError("gender probabilities must be a valid 2-class distribution")
    if gamma < 0.0:
        raise ValueError(f"gamma must be >= 0, got {gamma!r}")
    t = int(true_class)
    if t not in (0, 1):
        raise ValueError(f"gender label must be 0 or 1, got {true_class!r}")
    pt = max(float(p[t]), PROB_FLOOR)
    q = max(1.0 - pt, 0.0)
    value = -(q ** gamma) * np.log(pt)
    if q == 0.0:
        # perfect prediction: the loss sits at its minimum
        dl_dpt = 0.0 if gamma > 0.0 else -1.0 / pt
    else:
        dl_dpt = gamma * q ** (gamma - 1.0) * np.log(pt) - (q ** gamma) / pt
    onehot = np.array([1.0 - t, float(t)])
    grad_logits = dl_dpt * pt * (onehot - p)
    return float(value), grad_logits


def _focal_batch(genders: np.ndarray, probs: np.ndarray, gamma: float):
    """Vectorized focal loss over an (N, 2) probability matrix."""
    n = probs.shape[0]
    idx = np.arange(n)
    pt = np.maximum(probs[idx, genders], PROB_FLOOR)
    q = np.maximum(1.0 - pt, 0.0)
    logpt = np.log(pt)
    values = -(q ** gamma) * logpt
    with np.errstate(divide="ignore", invalid="ignore"):
        dl_dpt = np.where(
            q > 0.0,
            gamma * q ** (gamma - 1.0) * logpt - (q ** gamma) / pt,
            0.0 if gamma > 0.0 else -1.0 / pt,
        )
    onehot = np.zeros_like(probs)
    onehot[idx, genders] = 1.0
    grads = (dl_dpt * pt)[:, None] * (onehot - probs)
    return values, grads


def fold_age_gradients(grads: HybridGradients, age_probs: np.ndarray) -> np.ndarray:
    """Combine the logit-space and age-space gradient pieces into one (N, K)
    gradient w.r.t. the age logits.

    The predicted age is mu_hat = sum_k k p_k, so d mu_hat / d z_j
    = p_j (j - mu_hat).
    """
    k = ages(age_probs.shape[1])
    mu_hat = age_probs @ k
    dmu_dz = age_probs * (k[None, :] - mu_hat[:, None])
    return grads.age_logits + grads.ages[:, None] * dmu_dz


def hybrid_loss(true_ages, true_genders, age_logits, gender_logits,
                candidates: VarianceCandidateSet, weights: LossWeights):
    """Weighted sum of the five loss components over a batch.

    `age_logits` is (N, K) pre-softmax, `gender_logits` (N, 2).  Components
    with zero weight are skipped (never computed); the concordance term
    requires N >= 2.  Returns (LossReport, HybridGradients).
    """
    t_ages = np.asarray(true_ages, dtype=np.float64).ravel()
    n = t_ages.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    z_age = np.asarray(age_logits, dtype=np.float64)
    if z_age.ndim != 2 or z_age.shape[0] != n:
        raise ValueError(f"age_logits must be (N, K) with N={n}, got {z_age.shape}")
    if weights.ccc > 0.0 and n < 2:
        raise ValueError("concordance weight > 0 requires a batch of at least 2 samples")

    probs = softmax(z_age)
    k = ages(z_age.shape[1])

    components: dict = {}
    grad_logits = np.zeros_like(z_age)
    grad_ages = np.zeros(n)
    grad_gender = np.zeros((n, 2))
    s_stars = None

    need_selection = weights.kl > 0.0 or weights.diff > 0.0
    if need_selection:
        kl_value, s_stars, kl_grad_probs = svldl_kl_loss(t_ages, probs, candidates)
        if weights.kl > 0.0:
            components["kl"] = kl_value
            grad_logits += weights.kl * softmax_vjp(probs, kl_grad_probs)

    if weights.ccc > 0.0:
        pred_ages = probs @ k
        ccc_value, ccc_grad = ccc_loss(t_ages, pred_ages)
        components["ccc"] = ccc_value
        grad_ages = weights.ccc * ccc_grad

    if weights.variance > 0.0:
        mu_hat = probs @ k
        centered = k[None, :] - mu_hat[:, None]
        per_sample = np.sum(probs * centered ** 2, axis=1)
        components["variance"] = float(per_sample.mean())
        totals = probs.sum(axis=1)
        g = centered ** 2 - 2.0 * k[None, :] * (mu_hat * (1.0 - totals))[:, None]
        grad_logits += (weights.variance / n) * softmax_vjp(probs, g)

    if weights.diff > 0.0:
        diff_vals = np.empty(n)
        g = np.empty_like(probs)
        for i in range(n):
            diff_vals[i], g[i] = diff_loss(float(t_ages[i]), float(s_stars[i]), probs[i])
        components["diff"] = float(diff_vals.mean())
        grad_logits += (weights.diff / n) * softmax_vjp(probs, g)

    if weights.gender > 0.0:
        z_g = np.asarray(gender_logits, dtype=np.float64)
        if z_g.ndim != 2 or z_g.shape != (n, 2):
            raise ValueError(f"gender_logits must be (N, 2) with N={n}, got {z_g.shape}")
        genders = np.asarray(true_genders).astype(np.int64).ravel()
        if genders.shape[0] != n or np.any((genders != 0) & (genders != 1)):
            raise ValueError("gender labels must be a length-N vector of 0/1")
        g_probs = softmax(z_g)
        values, grads = _focal_batch(genders, g_probs, weights.gamma)
        components["gender"] = float(values.mean())
        grad_gender = (weights.gender / n) * grads

    weight_map = {"ccc": weights.ccc, "kl": weights.kl, "variance": weights.variance,
                  "diff": weights.diff, "gender": weights.gender}
    total = float(sum(weight_map[name] * val for name, val in components.items()))
    report = LossReport(total=total, components=components, selected_variances=s_stars)
    return report, HybridGradients(age_logits=grad_logits, ages=grad_ages,
                                   gender_logits=grad_gender)
