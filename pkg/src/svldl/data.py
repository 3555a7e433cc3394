"""Dataset ingestion, the SVF binary feature format, and synthetic tasks.

SVF layout (little-endian): magic "SVF1", u32 L, u32 T, u32 C, then L*T*C
float32 values in C order (layer-major, then frame-major).  Manifests are
UTF-8 CSV with the header `id,feature_path,age,gender`; feature paths are
resolved relative to the manifest's directory.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass

import numpy as np

SVF_MAGIC = b"SVF1"

# the fixed embedding every synthetic dataset shares (independent of `seed`)
_EMBED_SEED = 761_204_331

MANIFEST_HEADER = ("id", "feature_path", "age", "gender")


class FeatureFormatError(ValueError):
    """An SVF file is malformed (magic, size, or value errors)."""


class ManifestError(ValueError):
    """A manifest row failed validation; the message names the line."""


@dataclass
class Sample:
    id: str
    features: np.ndarray  # (L, T, C) float64
    age: float
    gender: int


@dataclass(frozen=True)
class ManifestRow:
    id: str
    feature_path: str
    age: float
    gender: int


@dataclass(frozen=True)
class Manifest:
    rows: tuple
    base_dir: str

    def __len__(self) -> int:
        return len(self.rows)


def write_features(path, values) -> None:
    """Write an (L, T, C) tensor as SVF; values are stored as float32."""
    arr = np.ascontiguousarray(values, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"features must be (L, T, C), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("features must be finite")
    with open(path, "wb") as fh:
        fh.write(SVF_MAGIC)
        fh.write(struct.pack("<3I", *arr.shape))
        fh.write(arr.astype("<f4").tobytes())


def load_features(path) -> np.ndarray:
    """Read an SVF file back into an (L, T, C) float64 tensor."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != SVF_MAGIC:
        raise FeatureFormatError(f"bad SVF magic in {path}")
    if len(data) < 16:
        raise FeatureFormatError(f"truncated SVF header in {path}")
    l, t, c = struct.unpack_from("<3I", data, 4)
    count = l * t * c
    expected = 16 + 4 * count
    if len(data) != expected:
        raise FeatureFormatError(
            f"SVF payload size mismatch in {path}: expected {expected} bytes, got {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=16).reshape(l, t, c)
    if not np.all(np.isfinite(arr)):
        raise FeatureFormatError(f"non-finite feature values in {path}")
    return arr.astype(np.float64)


def load_manifest(path, max_age: float = 100.0, check_files: bool = True) -> Manifest:
    """Parse a manifest CSV; errors carry the 1-based line number.

    Validates the header, unique ids, age in [1, max_age], gender in {0, 1},
    and (by default) that every referenced feature file exists.
    """
    if not os.path.isfile(path):
        raise ManifestError(f"manifest not found: {path}")
    base_dir = os.path.dirname(os.path.abspath(path))
    rows = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty file, expected header line") from None
        if tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(
                f"{path} line 1: header must be {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ManifestError(f"{path} line {lineno}: expected 4 fields, got {len(row)}")
            sid, fpath, age_s, gender_s = (f.strip() for f in row)
            if not sid:
                raise ManifestError(f"{path} line {lineno}: empty id")
            if sid in seen:
                raise ManifestError(f"{path} line {lineno}: duplicate id {sid!r}")
            seen.add(sid)
            try:
                age = float(age_s)
            except ValueError:
                raise ManifestError(f"{path} line {lineno}: bad age {age_s!r}") from None
            if not np.isfinite(age) or not (1.0 <= age <= max_age):
                raise ManifestError(
                    f"{path} line {lineno}: age {age_s} out of range [1, {max_age}]")
            if gender_s not in ("0", "1"):
                raise ManifestError(f"{path} line {lineno}: gender must be 0 or 1, got {gender_s!r}")
            full = fpath if os.path.isabs(fpath) else os.path.join(base_dir, fpath)
            if check_files and not os.path.isfile(full):
                raise ManifestError(f"{path} line {lineno}: feature file not found: {full}")
            rows.append(ManifestRow(id=sid, feature_path=fpath, age=age, gender=int(gender_s)))
    return Manifest(rows=tuple(rows), base_dir=base_dir)


def load_samples(manifest_path, max_age: float = 100.0) -> list:
    """Load a manifest and every feature file it references."""
    manifest = load_manifest(manifest_path, max_age=max_age)
    samples = []
    for row in manifest.rows:
        full = row.feature_path if os.path.isabs(row.feature_path) \
            else os.path.join(manifest.base_dir, row.feature_path)
        samples.append(Sample(id=row.id, features=load_features(full),
                              age=row.age, gender=row.gender))
    return samples


def synth_generate(n_samples: int, k_max: int = 100, num_layers: int = 2,
                   num_frames: int = 20, feature_dim: int = 16,
                   noise_level: float = 0.1, seed: int = 0) -> list:
    """Deterministic synthetic samples whose age is recoverable by construction.

    Each frame carries a fixed linear embedding of (normalized age, signed
    gender) plus zero-mean Gaussian noise of the given level.  Ages are
    uniform on [18, 70), genders fair coin flips.  Feature values are exactly
    float32-representable so SVF round-trips are bitwise.
    """
    if n_samples < 0:
        raise ValueError("n_samples must be >= 0")
    for name, v in (("k_max", k_max), ("num_layers", num_layers),
                    ("num_frames", num_frames), ("feature_dim", feature_dim)):
        if v < 1:
            raise ValueError(f"{name} must be positive, got {v}")
    if noise_level < 0.0:
        raise ValueError("noise_level must be >= 0")
    embed = np.random.default_rng(_EMBED_SEED).normal(
        size=(num_layers, feature_dim, 2))
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_samples):
        age = float(rng.uniform(18.0, 70.0))
        gender = int(rng.integers(0, 2))
        code = np.array([(age - 44.0) / 26.0, 2.0 * gender - 1.0])
        signal = embed @ code  # (L, C)
        frames = np.broadcast_to(signal[:, None, :],
                                 (num_layers, num_frames, feature_dim))
        noise = noise_level * rng.standard_normal((num_layers, num_frames, feature_dim))
        features = (frames + noise).astype(np.float32).astype(np.float64)
        samples.append(Sample(id=f"synth-{i:05d}", features=features,
                              age=age, gender=gender))
    return samples


def split(samples, fraction: float, seed: int = 0):
    """Seeded shuffle split into (train, test) with disjoint ids."""
    samples = list(samples)
    if len(samples) < 2:
        raise ValueError("need at least 2 samples to split")
    if not (0.0 < fraction < 1.0):
        raise ValueError(f"fraction must lie in (0, 1), got {fraction!r}")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(fraction * len(samples)))
    n_train = min(max(n_train, 1), len(samples) - 1)
    train = [samples[i] for i in order[:n_train]]
    test = [samples[i] for i in order[n_train:]]
    return train, test


def write_dataset(samples, out_dir) -> str:
    """Write SVF files plus a manifest under out_dir; returns the manifest path."""
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.csv")
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for s in samples:
            rel = os.path.join("features", f"{s.id}.svf")
            write_features(os.path.join(out_dir, rel), s.features)
            writer.writerow([s.id, rel, repr(float(s.age)), int(s.gender)])
    return manifest_path
