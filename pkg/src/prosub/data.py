"""Datasets of samples x measurements: I/O, normalisation, CV folds, synthetic data."""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MAGIC = b"OSDS"
FORMAT_VERSION = 1
NORMALIZATION_MODES = ("global_max99", "per_measurement_max99")


class DatasetError(ValueError):
    pass


class DatasetFormatError(DatasetError):
    """Bad magic, unsupported version or truncated file."""


class NonFiniteDataError(DatasetError):
    pass


class DatasetShapeError(DatasetError):
    """Declared sizes disagree with the payload or the sidecar."""


@dataclass(frozen=True)
class NormalizationSpec:
    mode: str
    divisors: tuple

    def to_dict(self):
        return {"mode": self.mode, "divisors": list(self.divisors)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mode"], tuple(float(x) for x in d["divisors"]))


@dataclass
class MeasurementDataset:
    samples: np.ndarray
    measurement_ids: list
    subject_ids: np.ndarray
    normalization: NormalizationSpec | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.subject_ids = np.asarray(self.subject_ids, dtype=str)
        self.measurement_ids = [str(m) for m in self.measurement_ids]
        if self.samples.ndim != 2:
            raise DatasetShapeError(f"samples must be 2-D, got {self.samples.shape}")
        n, N = self.samples.shape
        if n < 1 or N < 2:
            raise DatasetShapeError(f"need n >= 1 and N >= 2, got {self.samples.shape}")
        if len(self.measurement_ids) != N:
            raise DatasetShapeError(f"{len(self.measurement_ids)} measurement ids for N={N}")
        if self.subject_ids.shape != (n,):
            raise DatasetShapeError(f"{self.subject_ids.shape} subject ids for n={n}")
        if any(s == "" for s in self.subject_ids):
            raise DatasetError("empty subject label")
        if not np.all(np.isfinite(self.samples)):
            raise NonFiniteDataError("dataset contains NaN or infinite entries")

    @property
    def n(self):
        return self.samples.shape[0]

    @property
    def N(self):
        return self.samples.shape[1]

    def subjects(self):
        return sorted(set(self.subject_ids.tolist()))

    def select_subjects(self, labels):
        keep = np.isin(self.subject_ids, list(labels))
        return replace(self, samples=self.samples[keep], subject_ids=self.subject_ids[keep])


def nearest_rank_percentile(values, q=99.0):
    """The ceil(q/100 * n)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise DatasetError("percentile of an empty array")
    rank = max(1, math.ceil(q / 100.0 * v.size))
    return float(v[rank - 1])


def fit_normalization(dataset, mode, train_subjects=None):
    """Divisors computed from the training subjects only."""
    if mode not in NORMALIZATION_MODES:
        raise ValueError(f"unknown normalization mode {mode!r}")
    train = dataset if train_subjects is None else dataset.select_subjects(train_subjects)
    if train.n == 0:
        raise DatasetError("no training samples to fit normalization on")
    if mode == "global_max99":
        divisors = (nearest_rank_percentile(train.samples),) * dataset.N
    else:
        divisors = tuple(nearest_rank_percentile(train.samples[:, j]) for j in range(dataset.N))
    if any(d <= 0 for d in divisors):
        raise DatasetError(f"non-positive normalization divisor in {mode}")
    return NormalizationSpec(mode, divisors)


def normalize(dataset, mode=None, train_subjects=None, spec=None):
    """Return ``(normalized_dataset, spec)``.

    Pass ``spec`` to reuse frozen divisors (validation/test subjects); the
    held-out samples are then never read for fitting. Re-applying the spec a
    dataset already carries is a no-op.
    """
    if spec is None:
        if dataset.normalization is not None:
            raise DatasetError("dataset is already normalized")
        spec = fit_normalization(dataset, mode, train_subjects)
    elif mode is not None and mode != spec.mode:
        raise ValueError(f"mode {mode!r} disagrees with spec mode {spec.mode!r}")
    if dataset.normalization is not None:
        if dataset.normalization == spec:
            return dataset, spec
        raise DatasetError("dataset is already normalized with a different spec")
    if len(spec.divisors) != dataset.N:
        raise DatasetShapeError(f"{len(spec.divisors)} divisors for N={dataset.N}")
    out = replace(dataset, samples=dataset.samples / np.asarray(spec.divisors), normalization=spec)
    return out, spec


# ----------------------------------------------------------------------------
# binary and CSV I/O

def _sidecar(path):
    return Path(str(path) + ".json")


def save_dataset(dataset, path):
    """Write the binary ``OSDS`` file plus a ``.json`` sidecar.

    The payload is float32, so only float32-representable data round-trips
    exactly.
    """
    path = Path(path)
    labels = sorted(set(dataset.subject_ids.tolist()))
    index = {s: i for i, s in enumerate(labels)}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQQ", FORMAT_VERSION, dataset.n, dataset.N))
        fh.write(struct.pack("<I", len(labels)))
        for s in labels:
            b = s.encode("utf-8")
            fh.write(struct.pack("<H", len(b)))
            fh.write(b)
        fh.write(np.array([index[s] for s in dataset.subject_ids], dtype="<u4").tobytes())
        fh.write(dataset.samples.astype("<f4").tobytes(order="C"))
    side = {
        "measurement_ids": dataset.measurement_ids,
        "normalization": dataset.normalization.to_dict() if dataset.normalization else None,
        "meta": dataset.meta,
    }
    _sidecar(path).write_text(json.dumps(side, indent=1))


def _read_binary(path):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {data[:4]!r}")
    try:
        version, n, N = struct.unpack_from("<IQQ", data, 4)
        if version != FORMAT_VERSION:
            raise DatasetFormatError(f"{path}: unsupported version {version}")
        off = 4 + struct.calcsize("<IQQ")
        (n_labels,) = struct.unpack_from("<I", data, off)
        off += 4
        labels = []
        for _ in range(n_labels):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            if off + ln > len(data):
                raise DatasetFormatError(f"{path}: truncated subject table")
            labels.append(data[off : off + ln].decode("utf-8"))
            off += ln
    except struct.error as exc:
        raise DatasetFormatError(f"{path}: truncated header") from exc
    expected = off + 4 * n + 4 * n * N
    if len(data) != expected:
        raise DatasetShapeError(f"{path}: payload is {len(data)} bytes, header implies {expected}")
    idx = np.frombuffer(data, "<u4", n, off)
    off += 4 * n
    if n and idx.max() >= n_labels:
        raise DatasetFormatError(f"{path}: subject index out of range")
    samples = np.frombuffer(data, "<f4", n * N, off).reshape(n, N).astype(np.float64)
    if not np.all(np.isfinite(samples)):
        raise NonFiniteDataError(f"{path}: payload contains NaN or infinite entries")
    return samples, np.array(labels, dtype=str)[idx]


def load_dataset(path):
    """Load a binary ``OSDS`` file (with optional sidecar) or a CSV file."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return load_csv(path)
    samples, subjects = _read_binary(path)
    side = {}
    if _sidecar(path).exists():
        side = json.loads(_sidecar(path).read_text())
    ids = side.get("measurement_ids") or [f"m{j}" for j in range(samples.shape[1])]
    if len(ids) != samples.shape[1]:
        raise DatasetShapeError(f"{path}: sidecar lists {len(ids)} ids for N={samples.shape[1]}")
    norm = side.get("normalization")
    return MeasurementDataset(
        samples, ids, subjects,
        NormalizationSpec.from_dict(norm) if norm else None,
        side.get("meta", {}),
    )


def save_csv(dataset, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject"] + dataset.measurement_ids)
        for s, row in zip(dataset.subject_ids, dataset.samples):
            w.writerow([s] + [repr(float(v)) for v in row])


def load_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) < 3:
        raise DatasetFormatError(f"{path}: missing or short header row")
    header = rows[0]
    subjects, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DatasetShapeError(f"{path}:{lineno}: {len(row)} fields, header has {len(header)}")
        subjects.append(row[0])
        try:
            values.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: {exc}") from exc
    if not values:
        raise DatasetShapeError(f"{path}: no samples")
    samples = np.array(values)
    if not np.all(np.isfinite(samples)):
        raise NonFiniteDataError(f"{path}: NaN or infinite entries")
    return MeasurementDataset(samples, header[1:], subjects)


# ----------------------------------------------------------------------------
# cross-validation

@dataclass(frozen=True)
class CvSplit:
    train_subjects: tuple
    validation_subjects: tuple
    test_subjects: tuple


def make_folds(subject_ids, n_folds=5):
    """Rotate one validation and one test subject per fold; the rest train."""
    subjects = sorted(set(np.asarray(subject_ids, dtype=str).tolist()))
    if len(subjects) < 3:
        raise DatasetError(f"need at least 3 subjects for CV, got {len(subjects)}")
    if not 1 <= n_folds <= len(subjects):
        raise DatasetError(f"n_folds={n_folds} with {len(subjects)} subjects")
    folds = []
    for f in range(n_folds):
        val = subjects[f % len(subjects)]
        test = subjects[(f + 1) % len(subjects)]
        train = tuple(s for s in subjects if s not in (val, test))
        folds.append(CvSplit(train, (val,), (test,)))
    return folds


# ----------------------------------------------------------------------------
# synthetic oversampled data

@dataclass(frozen=True)
class SyntheticSpec:
    """Oversampled signals built from ``k`` latent decay signals.

    Each latent is a bi-exponential decay evaluated at its own time point,
    with per-sample rates and fraction. Measurement ``i`` copies latent
    ``groups[i]`` (scaled) plus ``mix_std``-sized contributions of the other
    latents; the first measurement of every group is a pure copy, so those
    ``k`` measurements recover all ``N`` exactly when ``noise_std == 0``.
    """

    n: int = 2000
    N: int = 8
    k: int = 3
    noise_std: float = 0.0
    groups: tuple | None = None
    mix_std: float = 0.0
    fast_rates: tuple = (2.0, 6.0)
    slow_rates: tuple = (0.2, 1.0)
    time_range: tuple = (0.1, 3.0)
    n_subjects: int = 5
    seed: int = 0

    def resolved_groups(self):
        groups = tuple(self.groups) if self.groups is not None else tuple(i % self.k for i in range(self.N))
        if len(groups) != self.N:
            raise ValueError(f"{len(groups)} group labels for N={self.N}")
        if set(groups) != set(range(self.k)):
            raise ValueError("every latent needs at least one measurement")
        return groups

    def designated_subset(self):
        groups = self.resolved_groups()
        return tuple(groups.index(j) for j in range(self.k))

    def to_dict(self):
        d = self.__dict__.copy()
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def synthetic_latents(spec, rng):
    """``(n, k)`` bi-exponential decay latents."""
    taus = np.linspace(*spec.time_range, spec.k)
    fast = rng.uniform(*spec.fast_rates, size=(spec.n, 1))
    slow = rng.uniform(*spec.slow_rates, size=(spec.n, 1))
    frac = rng.uniform(0.2, 0.8, size=(spec.n, 1))
    s0 = rng.uniform(0.6, 1.4, size=(spec.n, 1))
    return s0 * (frac * np.exp(-taus * fast) + (1.0 - frac) * np.exp(-taus * slow))


def mixing_matrix(spec, rng):
    """``(k, N)`` map from latents to measurements."""
    groups = spec.resolved_groups()
    designated = set(spec.designated_subset())
    A = np.zeros((spec.k, spec.N))
    scales = rng.uniform(0.5, 1.5, size=spec.N)
    mix = np.abs(rng.normal(0.0, 1.0, size=(spec.k, spec.N)))  # keeps signals positive
    for i, g in enumerate(groups):
        A[g, i] = scales[i]
        if i not in designated and spec.mix_std > 0:
            others = [j for j in range(spec.k) if j != g]
            A[others, i] += spec.mix_std * mix[others, i]
    return A


def generate_synthetic(spec):
    if spec.k > spec.N or spec.k < 1:
        raise ValueError(f"need 1 <= k <= N, got k={spec.k}, N={spec.N}")
    if spec.noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    rng = np.random.default_rng(spec.seed)
    A = mixing_matrix(spec, rng)
    z = synthetic_latents(spec, rng)
    x = z @ A
    if spec.noise_std > 0:
        x = x + rng.normal(0.0, spec.noise_std, size=x.shape)
    per = -(-spec.n // spec.n_subjects)
    subjects = [f"sub{i // per + 1}" for i in range(spec.n)]
    meta = {
        "synthetic": spec.to_dict(),
        "designated_subset": list(spec.designated_subset()),
    }
    return MeasurementDataset(x, [f"m{j}" for j in range(spec.N)], subjects, None, meta)


def subset_lstsq_mse(samples, subset):
    """MSE of the least-squares linear reconstruction of all columns from ``subset``."""
    X = np.asarray(samples, dtype=np.float64)
    S = X[:, list(subset)]
    coef, *_ = np.linalg.lstsq(S, X, rcond=None)
    resid = X - S @ coef
    return float(np.mean(resid * resid))
