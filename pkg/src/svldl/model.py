"""The trainable prediction head and its training loop.

Topology: per-layer feature sequences are fused by a trainable weighted sum,
collapsed to a fixed vector by mean/std statistics pooling, passed through a
fully connected layer with a rectified-linear unit into the embedding z, and
from z into a softmax age head over 1..K and a 2-class gender head.

All gradients are propagated in reverse mode by hand; the optimizer is SGD
with momentum and weight decay (v <- m*v + g + wd*theta; theta <- theta -
lr*v).  Everything is float64 and deterministic given the seed.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .distributions import LabelDistribution, VarianceCandidateSet, ages, make_candidate_set
from .losses import LossReport, LossWeights, fold_age_gradients, hybrid_loss, softmax
from .metrics import EvalReport, eval_report

CHECKPOINT_MAGIC = b"SVLDL1"

#: variance floor applied inside statistics pooling before the square root
POOL_VAR_FLOOR = 1e-12


class NumericsError(RuntimeError):
    """A non-finite value appeared during a forward pass or gradient step."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or inconsistent with its header."""


@dataclass(frozen=True)
class ModelConfig:
    k_max: int = 100
    num_layers: int = 1
    feature_dim: int = 16
    hidden_size: int = 128

    def __post_init__(self):
        for name in ("k_max", "num_layers", "feature_dim", "hidden_size"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.k_max < 2:
            raise ValueError(f"k_max must be >= 2, got {self.k_max}")


# parameter tensors in declaration (and serialization) order
PARAM_FIELDS = ("layer_weights", "w_fc1", "b_fc1", "w_age", "b_age", "w_gender", "b_gender")


@dataclass
class ModelParameters:
    """All trainable tensors plus the config that fixes their shapes."""

    config: ModelConfig
    layer_weights: np.ndarray
    w_fc1: np.ndarray
    b_fc1: np.ndarray
    w_age: np.ndarray
    b_age: np.ndarray
    w_gender: np.ndarray
    b_gender: np.ndarray

    @classmethod
    def init(cls, config: ModelConfig, seed=0) -> "ModelParameters":
        """Uniform fan-in initialization; fusion weights start at 1/L."""
        rng = np.random.default_rng(seed)

        def uniform(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        pooled = 2 * config.feature_dim
        h = config.hidden_size
        return cls(
            config=config,
            layer_weights=np.full(config.num_layers, 1.0 / config.num_layers),
            w_fc1=uniform((h, pooled), pooled),
            b_fc1=uniform(h, pooled),
            w_age=uniform((config.k_max, h), h),
            b_age=uniform(config.k_max, h),
            w_gender=uniform((2, h), h),
            b_gender=uniform(2, h),
        )

    def tensors(self):
        return [getattr(self, name) for name in PARAM_FIELDS]

    def copy(self) -> "ModelParameters":
        return replace(self, **{name: getattr(self, name).copy() for name in PARAM_FIELDS})


def zero_gradients(params: ModelParameters) -> dict:
    return {name: np.zeros_like(getattr(params, name)) for name in PARAM_FIELDS}


@dataclass
class SGDOptimizer:
    """SGD with momentum; weight decay is added to the raw gradient."""

    learning_rate: float = 2e-3
    momentum: float = 0.9
    weight_decay: float = 1e-3
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0.0:
            raise ValueError("learning rate must be >= 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0.0:
            raise ValueError("weight decay must be >= 0")

    def step(self, params: ModelParameters, grads: dict) -> None:
        """v <- m*v + g + wd*theta; theta <- theta - lr*v, tensor by tensor."""
        for name in PARAM_FIELDS:
            theta = getattr(params, name)
            g = grads[name] + self.weight_decay * theta
            buf = self.buffers.get(name)
            if buf is None:
                buf = np.zeros_like(theta)
            buf = self.momentum * buf + g
            self.buffers[name] = buf
            setattr(params, name, theta - self.learning_rate * buf)


def layer_weighted_sum(features: np.ndarray, layer_weights: np.ndarray) -> np.ndarray:
    """Fuse an (L, T, C) stack into (T, C) with per-layer scalar weights."""
    phi = np.asarray(features, dtype=np.float64)
    w = np.asarray(layer_weights, dtype=np.float64).ravel()
    if phi.ndim != 3:
        raise ValueError(f"features must be (L, T, C), got shape {phi.shape}")
    if w.shape[0] != phi.shape[0]:
        raise ValueError(f"{w.shape[0]} layer weights for {phi.shape[0]} layers")
    return np.tensordot(w, phi, axes=(0, 0))


def stats_pooling(frames: np.ndarray) -> np.ndarray:
    """Concatenate per-dimension mean and population std over the frame axis."""
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"frames must be (T, C) with T >= 1, got shape {x.shape}")
    mean = x.mean(axis=0)
    var = np.maximum(((x - mean) ** 2).mean(axis=0), POOL_VAR_FLOOR)
    return np.concatenate([mean, np.sqrt(var)])


@dataclass
class ForwardCache:
    """Intermediates one backward pass needs."""

    features: np.ndarray
    fused: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    std: np.ndarray
    pooled: np.ndarray
    pre_act: np.ndarray
    z: np.ndarray
    age_logits: np.ndarray
    age_probs: np.ndarray
    gender_logits: np.ndarray
    gender_probs: np.ndarray


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values in {name}")


def forward_cached(features: np.ndarray, params: ModelParameters) -> ForwardCache:
    cfg = params.config
    phi = np.asarray(features, dtype=np.float64)
    if phi.ndim != 3 or phi.shape[0] != cfg.num_layers or phi.shape[2] != cfg.feature_dim:
        raise ValueError(
            f"features must be ({cfg.num_layers}, T, {cfg.feature_dim}), got shape {phi.shape}")
    if phi.shape[1] < 1:
        raise ValueError("feature sequence needs at least one frame")
    _check_finite("input features", phi)
    fused = np.tensordot(params.layer_weights, phi, axes=(0, 0))
    _check_finite("layer fusion", fused)
    mean = fused.mean(axis=0)
    var = np.maximum(((fused - mean) ** 2).mean(axis=0), POOL_VAR_FLOOR)
    std = np.sqrt(var)
    pooled = np.concatenate([mean, std])
    _check_finite("statistics pooling", pooled)
    pre_act = params.w_fc1 @ pooled + params.b_fc1
    z = np.maximum(pre_act, 0.0)
    _check_finite("fc1", z)
    age_logits = params.w_age @ z + params.b_age
    _check_finite("age head", age_logits)
    gender_logits = params.w_gender @ z + params.b_gender
    _check_finite("gender head", gender_logits)
    return ForwardCache(
        features=phi, fused=fused, mean=mean, var=var, std=std, pooled=pooled,
        pre_act=pre_act, z=z, age_logits=age_logits, age_probs=softmax(age_logits),
        gender_logits=gender_logits, gender_probs=softmax(gender_logits))


@dataclass(frozen=True)
class ForwardResult:
    age_dist: LabelDistribution
    predicted_age: float
    predicted_std: float
    gender_probs: np.ndarray
    embedding: np.ndarray


def forward(features: np.ndarray, params: ModelParameters) -> ForwardResult:
    """Full forward pass returning the validated age distribution and stats."""
    cache = forward_cached(features, params)
    k = ages(params.config.k_max)
    mu = float(np.dot(k, cache.age_probs))
    sigma = float(np.sqrt(max(np.dot(cache.age_probs, (k - mu) ** 2), 0.0)))
    return ForwardResult(
        age_dist=LabelDistribution(cache.age_probs),
        predicted_age=mu,
        predicted_std=sigma,
        gender_probs=cache.gender_probs,
        embedding=cache.z)


def backward(cache: ForwardCache, params: ModelParameters,
             d_age_logits: np.ndarray, d_gender_logits: np.ndarray,
             grads: dict) -> None:
    """Accumulate parameter gradients for one sample into `grads`."""
    grads["w_age"] += np.outer(d_age_logits, cache.z)
    grads["b_age"] += d_age_logits
    grads["w_gender"] += np.outer(d_gender_logits, cache.z)
    grads["b_gender"] += d_gender_logits

    dz = params.w_age.T @ d_age_logits + params.w_gender.T @ d_gender_logits
    d_pre = dz * (cache.pre_act > 0.0)
    grads["w_fc1"] += np.outer(d_pre, cache.pooled)
    grads["b_fc1"] += d_pre

    d_pooled = params.w_fc1.T @ d_pre
    c = cache.mean.shape[0]
    d_mean = d_pooled[:c]
    d_std = d_pooled[c:]
    t = cache.fused.shape[0]
    # std half: d std/d var = 1/(2 std) where the floor is inactive, else 0
    d_var = np.where(cache.var > POOL_VAR_FLOOR, d_std / (2.0 * cache.std), 0.0)
    d_fused = (d_mean / t)[None, :] + d_var[None, :] * (2.0 / t) * (cache.fused - cache.mean)
    grads["layer_weights"] += np.tensordot(cache.features, d_fused, axes=([1, 2], [0, 1]))


def predict(features: np.ndarray, params: ModelParameters):
    """Whole-sequence age estimate: (predicted age, predicted std)."""
    out = forward(features, params)
    return out.predicted_age, out.predicted_std


def _crop(features: np.ndarray, crop_frames, rng: np.random.Generator) -> np.ndarray:
    if not crop_frames:
        return features
    t = features.shape[1]
    if t <= crop_frames:
        return features
    start = int(rng.integers(0, t - crop_frames + 1))
    return features[:, start:start + crop_frames, :]


def train_step(samples, params: ModelParameters, optimizer: SGDOptimizer,
               candidates: VarianceCandidateSet, weights: LossWeights,
               crop_frames: int | None = None,
               rng: np.random.Generator | None = None) -> LossReport:
    """One SGD step over a batch of samples; params update in place.

    Raises NumericsError (without applying the step) if any gradient is
    non-finite.
    """
    batch = list(samples)
    if not batch:
        raise ValueError("empty batch")
    if rng is None:
        rng = np.random.default_rng(0)
    caches = [forward_cached(_crop(s.features, crop_frames, rng), params) for s in batch]
    t_ages = np.array([s.age for s in batch], dtype=np.float64)
    genders = np.array([s.gender for s in batch], dtype=np.int64)
    age_logits = np.stack([c.age_logits for c in caches])
    gender_logits = np.stack([c.gender_logits for c in caches])

    report, hgrads = hybrid_loss(t_ages, genders, age_logits, gender_logits,
                                 candidates, weights)
    age_probs = np.stack([c.age_probs for c in caches])
    d_age = fold_age_gradients(hgrads, age_probs)
    d_gender = hgrads.gender_logits

    grads = zero_gradients(params)
    for i, cache in enumerate(caches):
        backward(cache, params, d_age[i], d_gender[i], grads)
    for name in PARAM_FIELDS:
        if not np.all(np.isfinite(grads[name])):
            raise NumericsError(f"non-finite gradient for {name}; step not applied")
    optimizer.step(params, grads)
    for name in PARAM_FIELDS:
        if not np.all(np.isfinite(getattr(params, name))):
            raise NumericsError(f"non-finite parameter {name} after update")
    return report


@dataclass(frozen=True)
class TrainSettings:
    """Everything the trainer needs besides the data."""

    weights: LossWeights = LossWeights()
    candidates: VarianceCandidateSet = field(
        default_factory=lambda: make_candidate_set(0.1, 10.0, 0.1, squared=True))
    learning_rate: float = 2e-3
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    crop_frames: int | None = 150
    seed: int = 0
    # optional fine-tune phase appended after the main epochs
    finetune_epochs: int = 0
    finetune_learning_rate: float = 1e-5
    finetune_weight_decay: float = 4e-4
    finetune_batch_size: int = 128
    finetune_crop_frames: int | None = 300
    finetune_candidates: VarianceCandidateSet | None = None


def _merge_reports(reports, sizes) -> LossReport:
    total = sum(r.total * n for r, n in zip(reports, sizes)) / sum(sizes)
    keys = reports[0].components.keys()
    comps = {key: sum(r.components[key] * n for r, n in zip(reports, sizes)) / sum(sizes)
             for key in keys}
    return LossReport(total=float(total), components=comps, selected_variances=None)


def train_model(samples, config: ModelConfig, settings: TrainSettings):
    """Train a fresh head on the sample list.

    Returns (params, per-epoch LossReport list).  Batches are contiguous
    chunks of a seeded shuffle; a trailing batch of one is skipped when the
    concordance weight requires batch statistics.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no training samples")
    ss = np.random.SeedSequence(settings.seed)
    init_seed, loop_seed = ss.spawn(2)
    params = ModelParameters.init(config, seed=init_seed)
    rng = np.random.default_rng(loop_seed)
    optimizer = SGDOptimizer(learning_rate=settings.learning_rate,
                             momentum=settings.momentum,
                             weight_decay=settings.weight_decay)
    epoch_reports = []

    phases = [(settings.epochs, settings.batch_size, settings.crop_frames,
               settings.candidates, settings.learning_rate, settings.weight_decay)]
    if settings.finetune_epochs > 0:
        phases.append((settings.finetune_epochs, settings.finetune_batch_size,
                       settings.finetune_crop_frames,
                       settings.finetune_candidates or settings.candidates,
                       settings.finetune_learning_rate, settings.finetune_weight_decay))

    for n_epochs, batch_size, crop, candidates, lr, wd in phases:
        optimizer.learning_rate = lr
        optimizer.weight_decay = wd
        for _ in range(n_epochs):
            order = rng.permutation(len(samples))
            reports, sizes = [], []
            for lo in range(0, len(samples), batch_size):
                batch = [samples[i] for i in order[lo:lo + batch_size]]
                if len(batch) < 2 and settings.weights.ccc > 0.0:
                    continue
                reports.append(train_step(batch, params, optimizer, candidates,
                                          settings.weights, crop, rng))
                sizes.append(len(batch))
            if reports:
                epoch_reports.append(_merge_reports(reports, sizes))
    return params, epoch_reports


def evaluate_model(params: ModelParameters, samples, q: float = 2.0) -> EvalReport:
    """Whole-sequence forward on every sample, then the three metrics."""
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to evaluate")
    true_ages = np.array([s.age for s in samples], dtype=np.float64)
    dists = np.empty((len(samples), params.config.k_max))
    for i, s in enumerate(samples):
        dists[i] = forward_cached(s.features, params).age_probs
    k = ages(params.config.k_max)
    predicted = dists @ k
    return eval_report(true_ages, predicted, dists, q=q)


def save_checkpoint(path, params: ModelParameters) -> None:
    """Versioned binary: magic, u32 config block, dimension-prefixed float64 tensors."""
    buf = io.BytesIO()
    cfg = params.config
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<4I", cfg.k_max, cfg.num_layers, cfg.feature_dim, cfg.hidden_size))
    for tensor in params.tensors():
        arr = np.ascontiguousarray(tensor, dtype=np.float64)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _expected_shapes(cfg: ModelConfig) -> dict:
    pooled = 2 * cfg.feature_dim
    return {
        "layer_weights": (cfg.num_layers,),
        "w_fc1": (cfg.hidden_size, pooled),
        "b_fc1": (cfg.hidden_size,),
        "w_age": (cfg.k_max, cfg.hidden_size),
        "b_age": (cfg.k_max,),
        "w_gender": (2, cfg.hidden_size),
        "b_gender": (2,),
    }


def load_checkpoint(path) -> ModelParameters:
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    if len(view) < len(CHECKPOINT_MAGIC) or bytes(view[:len(CHECKPOINT_MAGIC)]) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    off = len(CHECKPOINT_MAGIC)
    try:
        k_max, num_layers, feature_dim, hidden = struct.unpack_from("<4I", view, off)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint header in {path}") from exc
    off += 16
    try:
        cfg = ModelConfig(k_max=k_max, num_layers=num_layers,
                          feature_dim=feature_dim, hidden_size=hidden)
    except ValueError as exc:
        raise CheckpointError(f"invalid checkpoint config in {path}: {exc}") from exc
    expected = _expected_shapes(cfg)
    tensors = {}
    for name in PARAM_FIELDS:
        try:
            (ndim,) = struct.unpack_from("<I", view, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", view, off)
            off += 4 * ndim
        except struct.error as exc:
            raise CheckpointError(f"truncated tensor header ({name}) in {path}") from exc
        if shape != expected[name]:
            raise CheckpointError(
                f"tensor {name} has shape {shape}, expected {expected[name]} in {path}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = 8 * count
        if off + nbytes > len(view):
            raise CheckpointError(f"truncated tensor payload ({name}) in {path}")
        arr = np.frombuffer(view, dtype="<f8", count=count, offset=off).reshape(shape)
        off += nbytes
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"non-finite values in tensor {name} in {path}")
        tensors[name] = arr.astype(np.float64)
    if off != len(view):
        raise CheckpointError(f"{len(view) - off} trailing bytes in {path}")
    return ModelParameters(config=cfg, **tensors)
