"""Synthetic blob datasets, label-noise injection and the dataset CSV format."""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .rng import check_seed, stream

NOISE_KINDS = ("symmetric", "pair", "instance")


class SpecError(ValueError):
    """Invalid dataset or noise specification; ``field`` names the culprit."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class CsvFormatError(ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


@dataclass(eq=False)
class LabeledDataset:
    """Features with true and noisy labels.

    Arrays are converted to float64 / int64 on construction and validated.
    """

    features: np.ndarray
    true_labels: np.ndarray
    noisy_labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.true_labels = np.ascontiguousarray(self.true_labels, dtype=np.int64)
        self.noisy_labels = np.ascontiguousarray(self.noisy_labels, dtype=np.int64)
        self.class_count = int(self.class_count)
        if self.features.ndim != 2:
            raise SpecError("features", "must be a 2-D matrix")
        n = self.features.shape[0]
        if n < 1:
            raise SpecError("features", "dataset must have at least one row")
        if self.true_labels.shape != (n,) or self.noisy_labels.shape != (n,):
            raise SpecError("labels", f"label vectors must have length {n}")
        if self.class_count < 2:
            raise SpecError("class_count", "need at least 2 classes")
        for name in ("true_labels", "noisy_labels"):
            labels = getattr(self, name)
            if labels.min() < 0 or labels.max() >= self.class_count:
                raise SpecError(name, f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(self.features)):
            raise SpecError("features", "all entries must be finite")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.class_count == other.class_count
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.true_labels, other.true_labels)
            and np.array_equal(self.noisy_labels, other.noisy_labels)
        )

    def with_noisy_labels(self, noisy_labels):
        return LabeledDataset(self.features.copy(), self.true_labels.copy(), noisy_labels, self.class_count)

    def class_counts(self, noisy=False):
        labels = self.noisy_labels if noisy else self.true_labels
        return np.bincount(labels, minlength=self.class_count)


@dataclass(frozen=True)
class BlobSpec:
    class_count: int
    sizes: tuple
    dim: int
    separation: float
    std: float
    seed: int = 0

    def validate(self):
        if int(self.class_count) < 2:
            raise SpecError("class_count", f"must be >= 2, got {self.class_count}")
        if len(self.sizes) != self.class_count:
            raise SpecError("sizes", f"expected {self.class_count} class sizes, got {len(self.sizes)}")
        if any(int(n) < 1 for n in self.sizes):
            raise SpecError("sizes", "every class size must be a positive integer")
        if int(self.dim) < 1:
            raise SpecError("dim", f"must be >= 1, got {self.dim}")
        if not self.separation > 0 or not math.isfinite(self.separation):
            raise SpecError("separation", f"must be a positive real, got {self.separation}")
        if not self.std > 0 or not math.isfinite(self.std):
            raise SpecError("std", f"must be a positive real, got {self.std}")
        try:
            check_seed(self.seed)
        except ValueError as exc:
            raise SpecError("seed", str(exc)) from None


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "symmetric"
    ratio: float = 0.0
    seed: int = 0

    def validate(self):
        if self.kind not in NOISE_KINDS:
            raise SpecError("kind", f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        if not 0.0 <= self.ratio < 1.0:
            raise SpecError("ratio", f"must lie in [0, 1), got {self.ratio}")
        if self.kind == "pair" and self.ratio > 0.5:
            raise SpecError("ratio", "pair noise requires ratio <= 0.5")
        try:
            check_seed(self.seed)
        except ValueError as exc:
            raise SpecError("seed", str(exc)) from None


def blob_centers(spec):
    """Class centers with pairwise distance >= ``spec.separation``.

    For K <= d the centers are a randomly rotated scaled simplex corner set
    (pairwise distance exactly ``separation``); otherwise rejection sampling.
    """
    rng = stream(spec.seed, "blob_centers")
    k, d, sep = spec.class_count, spec.dim, float(spec.separation)
    if k <= d:
        q, _ = np.linalg.qr(rng.standard_normal((d, k)))
        return (sep / math.sqrt(2.0)) * q.T
    # radius grows until K points fit at the requested spacing
    radius = sep * max(1.0, k ** (1.0 / d))
    centers = []
    attempts = 0
    while len(centers) < k:
        cand = rng.uniform(-radius, radius, size=d)
        if all(np.linalg.norm(cand - c) >= sep for c in centers):
            centers.append(cand)
        attempts += 1
        if attempts % 10000 == 0:
            radius *= 1.5
    return np.array(centers)


def generate_blobs(spec, sample_seed=None):
    """Isotropic Gaussian blobs, rows ordered by class.

    Centers depend only on ``spec.seed``; ``sample_seed`` (default ``spec.seed``)
    drives the within-class draws, which lets a test split share the centers.
    """
    spec.validate()
    centers = blob_centers(spec)
    rng = stream(spec.seed if sample_seed is None else sample_seed, "blob_samples")
    sizes = [int(n) for n in spec.sizes]
    labels = np.repeat(np.arange(spec.class_count), sizes)
    noise = rng.standard_normal((labels.size, spec.dim)) * spec.std
    features = centers[labels] + noise
    return LabeledDataset(features, labels, labels.copy(), spec.class_count)


def transition_matrix(kind, ratio, class_count):
    """Expected K x K matrix T[i, j] = P(noisy = j | true = i)."""
    k = class_count
    if kind == "symmetric":
        t = np.full((k, k), ratio / (k - 1))
        np.fill_diagonal(t, 1.0 - ratio)
    elif kind == "pair":
        t = (1.0 - ratio) * np.eye(k)
        t[np.arange(k), (np.arange(k) + 1) % k] += ratio
    else:
        raise SpecError("kind", f"no fixed transition matrix for {kind!r} noise")
    return t


def empirical_transition(true_labels, noisy_labels, class_count):
    counts = np.zeros((class_count, class_count))
    np.add.at(counts, (true_labels, noisy_labels), 1.0)
    rows = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)


def inject_noise(dataset, spec):
    """Corrupt ``noisy_labels`` of a copy of ``dataset`` per ``spec``.

    Flips start from the true labels, so injecting twice does not compound.
    """
    spec.validate()
    if spec.kind == "instance":
        return inject_instance_noise(dataset, spec.ratio, spec.seed)
    rng = stream(spec.seed, "noise")
    y = dataset.true_labels
    k = dataset.class_count
    flip = rng.random(len(y)) < spec.ratio
    noisy = y.copy()
    if spec.kind == "symmetric":
        # uniform over the K-1 wrong classes
        offsets = rng.integers(1, k, size=len(y))
        noisy[flip] = (y[flip] + offsets[flip]) % k
    else:
        noisy[flip] = (y[flip] + 1) % k
    return dataset.with_noisy_labels(noisy)


def _scale_to_mean(raw, target):
    """Multiplier c with mean(clip(c * raw, 0, 1)) == target (bisection)."""
    if target <= 0:
        return 0.0
    lo, hi = 0.0, 1.0
    while np.mean(np.minimum(hi * raw, 1.0)) < target:
        hi *= 2.0
        if hi > 1e12:
            break
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.mean(np.minimum(mid * raw, 1.0)) < target:
            lo = mid
        else:
            hi = mid
    return hi


def instance_flip_probabilities(features, labels, class_count, ratio, seed):
    """Per-sample flip probability and flip target for instance noise.

    Features are projected onto one random direction per class. A sample whose
    strongest wrong-class projection is close to (or beyond) its own-class
    projection gets a larger flip probability; probabilities are scaled so
    their mean is ``ratio``. Both outputs are pure functions of the row.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[1] < 1:
        raise SpecError("dim", "instance noise needs at least one feature column")
    rng = stream(seed, "instance_directions")
    directions = rng.standard_normal((features.shape[1], class_count))
    directions /= np.linalg.norm(directions, axis=0, keepdims=True)
    proj = features @ directions
    rows = np.arange(len(labels))
    own = proj[rows, labels]
    wrong = proj.copy()
    wrong[rows, labels] = -np.inf
    target = np.argmax(wrong, axis=1)
    margin = wrong[rows, target] - own
    spread = margin.std()
    z = (margin - margin.mean()) / (spread if spread > 0 else 1.0)
    raw = 1.0 / (1.0 + np.exp(-z))
    prob = np.minimum(_scale_to_mean(raw, ratio) * raw, 1.0)
    return prob, target


def inject_instance_noise(dataset, ratio, seed):
    if not 0.0 <= ratio < 1.0:
        raise SpecError("ratio", f"must lie in [0, 1), got {ratio}")
    if dataset.dim < 1:
        raise SpecError("dim", "instance noise needs at least one feature column")
    prob, target = instance_flip_probabilities(
        dataset.features, dataset.true_labels, dataset.class_count, ratio, seed
    )
    u = stream(seed, "noise").random(len(dataset))
    noisy = np.where(u < prob, target, dataset.true_labels)
    return dataset.with_noisy_labels(noisy)


def csv_header(dim):
    return [f"feature_{j}" for j in range(dim)] + ["noisy_label", "true_label"]


def save_csv(dataset, path):
    """Write ``dataset``; floats use 17 significant digits so reloads are exact."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(csv_header(dataset.dim))
        for row, noisy, true in zip(dataset.features, dataset.noisy_labels, dataset.true_labels):
            writer.writerow([format(v, ".17g") for v in row] + [int(noisy), int(true)])


def load_csv(path, class_count=None):
    """Read a dataset CSV written by :func:`save_csv`.

    ``class_count`` defaults to ``max(label) + 1``; labels outside
    ``[0, class_count)`` raise :class:`CsvFormatError` naming the line.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(path, 1, "empty file") from None
        dim = len(header) - 2
        if dim < 1 or header != csv_header(dim):
            raise CsvFormatError(path, 1, "malformed header; expected feature_0..feature_{d-1},noisy_label,true_label")
        feats, noisy, true = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != dim + 2:
                raise CsvFormatError(path, lineno, f"expected {dim + 2} fields, got {len(row)}")
            try:
                feats.append([float(v) for v in row[:dim]])
                yn, yt = int(row[dim]), int(row[dim + 1])
            except ValueError as exc:
                raise CsvFormatError(path, lineno, str(exc)) from None
            if not all(math.isfinite(v) for v in feats[-1]):
                raise CsvFormatError(path, lineno, "non-finite feature value")
            for value in (yn, yt):
                if value < 0 or (class_count is not None and value >= class_count):
                    raise CsvFormatError(path, lineno, f"label {value} outside [0, {class_count})")
            noisy.append(yn)
            true.append(yt)
    if not feats:
        raise CsvFormatError(path, 2, "no data rows")
    if class_count is None:
        class_count = max(max(noisy), max(true)) + 1
    return LabeledDataset(np.array(feats), np.array(true), np.array(noisy), class_count)
