"""Synthetic ordinal dataset: a latent score in [1,5] binned into three
classes, with feature geometry that is ordinal along one seeded direction.

Stands in for a clinical rating pipeline at desk scale; binning boundaries
are 2.5 and 3.5, with both boundary values assigned to the middle class.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CapacityError, ContractError, FormatError

MAGIC = b"MOWDS1\n"

BENIGN, UNSURE, MALIGNANT = 0, 1, 2
CLASS_NAMES = ("benign", "unsure", "malignant")


@dataclass(frozen=True)
class OrdinalSample:
    features: np.ndarray
    score: float
    label: int


@dataclass(frozen=True)
class SynthConfig:
    dim: int = 16
    n_per_class: int = 500
    centers: tuple[float, float, float] = (2.0, 3.0, 4.0)
    sigma_score: float = 0.35
    sigma_feature: float = 1.0
    overlap: float = 0.8
    signal_scale: float = 3.5
    seed: int = 0

    def __post_init__(self):
        if self.dim <= 0:
            raise ContractError("SynthConfig: dim must be positive")
        if self.n_per_class <= 0:
            raise ContractError("SynthConfig: n_per_class must be positive")
        if self.sigma_score <= 0 or self.sigma_feature <= 0:
            raise ContractError("SynthConfig: noise scales must be positive")
        if not all(a < b for a, b in zip(self.centers, self.centers[1:])):
            raise ContractError("SynthConfig: centers must be strictly increasing")
        if self.overlap < 0:
            raise ContractError("SynthConfig: overlap must be non-negative")


class Dataset:
    """Column-oriented sample store: features (n,d), scores (n,), labels (n,)."""

    def __init__(self, features: np.ndarray, scores: np.ndarray, labels: np.ndarray):
        features = np.asarray(features, dtype=np.float64)
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.uint8)
        if features.ndim != 2:
            raise ContractError(f"Dataset: features must be 2-D, got {features.shape}")
        if scores.shape != (features.shape[0],) or labels.shape != (features.shape[0],):
            raise ContractError("Dataset: column lengths disagree")
        self.features = features
        self.scores = scores
        self.labels = labels

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def sample(self, i: int) -> OrdinalSample:
        return OrdinalSample(self.features[i], float(self.scores[i]), int(self.labels[i]))

    def class_index(self, num_classes: int = 3) -> dict[int, list[int]]:
        """Class -> all dataset indices of that class, in dataset order."""
        return {c: np.flatnonzero(self.labels == c).tolist() for c in range(num_classes)}

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(self.features[idx].copy(), self.scores[idx].copy(), self.labels[idx].copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (np.array_equal(self.features, other.features)
                and np.array_equal(self.scores, other.scores)
                and np.array_equal(self.labels, other.labels))


def bin_score(score: float) -> int:
    """Bin a rating in [1,5]: below 2.5 benign, above 3.5 malignant,
    the closed interval between them unsure."""
    score = float(score)
    if not 1.0 <= score <= 5.0:
        raise ContractError(f"bin_score: score {score} outside [1, 5]")
    if score < 2.5:
        return BENIGN
    if score <= 3.5:
        return UNSURE
    return MALIGNANT


def generate(config: SynthConfig) -> Dataset:
    """Draw scores around per-class centers, re-bin them, and embed the
    score axis along one random direction in feature space.

    Labels always equal ``bin_score(score)``; near the boundaries the
    realized label can differ from the drawn class, mimicking rater
    ambiguity. The overlap factor stretches the middle class's coordinate
    along the score axis, so the unsure cluster's tails bleed into the
    territory of its neighbors while staying labeled unsure.
    """
    rng = np.random.default_rng(config.seed)
    direction = rng.normal(size=config.dim)
    direction *= config.signal_scale / np.linalg.norm(direction)

    n_total = 3 * config.n_per_class
    features = np.empty((n_total, config.dim))
    scores = np.empty(n_total)
    labels = np.empty(n_total, dtype=np.uint8)
    row = 0
    for center in config.centers:
        for _ in range(config.n_per_class):
            score = float(np.clip(rng.normal(center, config.sigma_score), 1.0, 5.0))
            label = bin_score(score)
            coord = score - 3.0
            if label == UNSURE:
                coord *= 1.0 + config.overlap
            noise = rng.normal(0.0, config.sigma_feature, size=config.dim)
            features[row] = direction * coord + noise
            scores[row] = score
            labels[row] = label
            row += 1
    return Dataset(features, scores, labels)


def generating_direction(config: SynthConfig) -> np.ndarray:
    """The seeded direction ``generate`` used, for diagnostics."""
    rng = np.random.default_rng(config.seed)
    direction = rng.normal(size=config.dim)
    return direction * (config.signal_scale / np.linalg.norm(direction))


def split_train_test(dataset: Dataset, train_frac: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic shuffled split; train gets floor(frac * n) samples."""
    if not 0.0 < train_frac < 1.0:
        raise ContractError(f"split_train_test: train_frac {train_frac} outside (0, 1)")
    order = np.random.default_rng(seed).permutation(len(dataset))
    cut = int(len(dataset) * train_frac)
    return dataset.subset(order[:cut]), dataset.subset(order[cut:])


def require_class_capacity(dataset: Dataset, k: int, num_classes: int = 3) -> None:
    """Every class must keep >= k samples after excluding any one target."""
    counts = np.bincount(dataset.labels, minlength=num_classes)
    for c in range(num_classes):
        if counts[c] < k + 1:
            raise CapacityError(
                f"class {CLASS_NAMES[c] if c < 3 else c} has {counts[c]} samples, "
                f"needs at least {k + 1} for K={k}")


# ---------------------------------------------------------------------------
# file format MOWDS1


def save_dataset(path, dataset: Dataset) -> None:
    n, d = dataset.features.shape
    chunks = [MAGIC, struct.pack("<II", n, d)]
    for i in range(n):
        chunks.append(np.ascontiguousarray(dataset.features[i], dtype="<f8").tobytes())
        chunks.append(struct.pack("<d", dataset.scores[i]))
        chunks.append(struct.pack("<B", int(dataset.labels[i])))
    Path(path).write_bytes(b"".join(chunks))


def load_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"{path}: truncated while reading {what} at byte offset {off}")
        out = blob[off:off + n]
        off += n
        return out

    magic = take(len(MAGIC), "magic")
    if magic != MAGIC:
        if magic[:5] == MAGIC[:5]:
            raise FormatError(f"{path}: unknown dataset format version {magic[5:6]!r}")
        raise FormatError(f"{path}: bad magic, not a MOWDS1 dataset")
    n, d = struct.unpack("<II", take(8, "header"))
    if d == 0 and n > 0:
        raise FormatError(f"{path}: zero feature dimension with {n} samples")
    features = np.empty((n, d))
    scores = np.empty(n)
    labels = np.empty(n, dtype=np.uint8)
    for i in range(n):
        features[i] = np.frombuffer(take(8 * d, f"features of sample {i}"), dtype="<f8")
        scores[i] = struct.unpack("<d", take(8, f"score of sample {i}"))[0]
        labels[i] = take(1, f"label of sample {i}")[0]
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes at offset {off}")
    return Dataset(features, scores, labels)
