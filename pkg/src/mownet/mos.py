"""Meta ordinal sets and the losses built on them.

A meta ordinal set (MOS) aligns one training sample with K samples from
every class, drawn from the training set and excluding the sample itself.
The per-class mean cross-entropies over a MOS are the scalar inputs to
the weight nets; the weighted sum of a sample's log-probabilities is the
meta cross-entropy (MCE) loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .datasynth import CLASS_NAMES, Dataset
from .errors import CapacityError, ContractError, NumericError
from .model import WeightVector, forward_arrays, forward_backbone_batch


@dataclass(frozen=True)
class MetaOrdinalSet:
    """Exactly K dataset indices per class, none equal to the target."""

    per_class_indices: dict[int, tuple[int, ...]]
    target_index: int

    @property
    def num_classes(self) -> int:
        return len(self.per_class_indices)

    @property
    def k(self) -> int:
        return len(next(iter(self.per_class_indices.values())))

    @property
    def size(self) -> int:
        return sum(len(v) for v in self.per_class_indices.values())

    def all_indices(self) -> list[int]:
        out = []
        for c in sorted(self.per_class_indices):
            out.extend(self.per_class_indices[c])
        return out

    def validate(self, labels: np.ndarray, k: int) -> None:
        """Raise ContractError on any size/purity/exclusion violation."""
        for c, idx in self.per_class_indices.items():
            if len(idx) != k:
                raise ContractError(f"MOS class {c}: {len(idx)} indices, expected K={k}")
            if self.target_index in idx:
                raise ContractError(f"MOS class {c} contains the target index {self.target_index}")
            for i in idx:
                if int(labels[i]) != c:
                    raise ContractError(
                        f"MOS class {c} holds index {i} whose label is {int(labels[i])}")
        if self.size != k * self.num_classes:
            raise ContractError("MOS size does not equal C*K")


def sample_mos(class_index: Mapping[int, Sequence[int]], target_index: int, k: int,
               rng: np.random.Generator,
               extra_exclude: Iterable[int] = ()) -> MetaOrdinalSet:
    """Uniform draw without replacement of K indices per class.

    ``extra_exclude`` widens the exclusion beyond the target (used by the
    batch-shared mode, where one MOS must avoid the whole mini-batch).
    """
    if k < 1:
        raise ContractError(f"sample_mos: K must be >= 1, got {k}")
    banned = {int(target_index)} | {int(i) for i in extra_exclude}
    per_class = {}
    for c in sorted(class_index):
        eligible = [i for i in class_index[c] if i not in banned]
        if len(eligible) < k:
            name = CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c)
            raise CapacityError(
                f"class {name} has only {len(eligible)} eligible samples "
                f"after exclusion, needs K={k}")
        chosen = rng.choice(len(eligible), size=k, replace=False)
        per_class[c] = tuple(int(eligible[j]) for j in chosen)
    return MetaOrdinalSet(per_class_indices=per_class, target_index=int(target_index))


@dataclass
class PerClassLossVector:
    """Mean CE over the K meta samples of each class, graph-attached."""

    values: tuple[Tensor, ...]

    def floats(self) -> np.ndarray:
        return np.array([v.item() for v in self.values])

    def __len__(self) -> int:
        return len(self.values)


def _class_rows_ce(theta: ParamSet, rows: np.ndarray, label: int, num_classes: int) -> Tensor:
    """Mean CE of a (K, d) block of samples sharing one true label."""
    pred = forward_backbone_batch(theta, rows)
    onehot = np.zeros((rows.shape[0], num_classes))
    onehot[:, label] = 1.0
    # mean over K*C entries picks (1/(K*C)) * sum of true-class log-probs
    return ad.scale(ad.mean(ad.mul(pred.log_probs, ad.constant(onehot))), -float(num_classes))


def meta_class_losses(theta: ParamSet, mos: MetaOrdinalSet, dataset: Dataset) -> PerClassLossVector:
    """Graph-attached per-class mean CE of the MOS under theta."""
    n_classes = mos.num_classes
    values = []
    for c in sorted(mos.per_class_indices):
        rows = dataset.features[list(mos.per_class_indices[c])]
        values.append(_class_rows_ce(theta, rows, c, n_classes))
    return PerClassLossVector(values=tuple(values))


def meta_class_loss_values(theta: ParamSet, mos: MetaOrdinalSet, dataset: Dataset) -> np.ndarray:
    """Detached per-class mean CE values (plain numpy, no graph)."""
    out = np.empty(mos.num_classes)
    for c in sorted(mos.per_class_indices):
        rows = dataset.features[list(mos.per_class_indices[c])]
        log_probs, _ = forward_arrays(theta, rows)
        out[c] = -log_probs[:, c].mean()
    return out


def mos_mean_ce(theta: ParamSet, mos_list: Sequence[MetaOrdinalSet], dataset: Dataset) -> Tensor:
    """Mean CE over all samples of all given MOS, graph-attached.

    This is the meta objective evaluated at whatever parameters ``theta``
    holds (typically the virtual-step result).
    """
    if not mos_list:
        raise ContractError("mos_mean_ce: empty MOS list")
    n_classes = mos_list[0].num_classes
    rows, labels = [], []
    for mos in mos_list:
        for c in sorted(mos.per_class_indices):
            for i in mos.per_class_indices[c]:
                rows.append(dataset.features[i])
                labels.append(c)
    x = np.asarray(rows)
    pred = forward_backbone_batch(theta, x)
    onehot = np.zeros((len(labels), n_classes))
    onehot[np.arange(len(labels)), labels] = 1.0
    return ad.scale(ad.mean(ad.mul(pred.log_probs, ad.constant(onehot))), -float(n_classes))


def pick_log_prob(log_probs: Tensor, index: int) -> Tensor:
    """Scalar node selecting one component of a length-C log-prob vector."""
    if log_probs.data.ndim != 1:
        raise ContractError(f"pick_log_prob: expected a vector, got {log_probs.shape}")
    onehot = np.zeros(log_probs.shape)
    onehot[index] = 1.0
    return ad.dot(log_probs, ad.constant(onehot))


def mce_loss(log_probs, omega: WeightVector) -> Tensor:
    """Meta cross-entropy: minus the omega-weighted sum of log-probs.

    Differentiable with respect to whatever produced either argument.
    """
    lp = log_probs.log_probs if hasattr(log_probs, "log_probs") else log_probs
    if lp.data.ndim != 1:
        raise ContractError(f"mce_loss: expected a log-prob vector, got {lp.shape}")
    if len(omega.omegas) != lp.data.shape[0]:
        raise ContractError(
            f"mce_loss: {len(omega.omegas)} weights for {lp.data.shape[0]} classes")
    for c, value in enumerate(lp.data):
        if not np.isfinite(value):
            raise NumericError(f"mce_loss: non-finite log-probability at class {c}")
    total = None
    for c, w in enumerate(omega.omegas):
        if not np.isfinite(w.data).all():
            raise NumericError(f"mce_loss: non-finite weight at class {c}")
        term = ad.mul(w, pick_log_prob(lp, c))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, -1.0)
