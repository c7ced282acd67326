"""Backbone classifier (parameters theta) and per-class weight nets (phi).

The backbone is a dense ReLU network ending in log-softmax. Each class c
owns an independent scalar-to-scalar MLP that maps a cross-entropy value
to a weight in (0,1); inputs are routed strictly per class, which is what
several structural-zero gradient properties rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .errors import ContractError


@dataclass(frozen=True)
class BackboneSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = (32,)
    num_classes: int = 3

    def __post_init__(self):
        if self.input_dim <= 0:
            raise ContractError("BackboneSpec: input_dim must be positive")
        if any(h <= 0 for h in self.hidden_dims):
            raise ContractError("BackboneSpec: zero-width hidden layer")
        if self.num_classes < 2:
            raise ContractError("BackboneSpec: need at least 2 classes")


@dataclass(frozen=True)
class WeightNetSpec:
    """Per-class scalar MLPs: 1 -> hidden (ReLU) -> 1 (sigmoid).

    ``init_slope`` and ``init_gate`` shape the starting response
    sigmoid(slope * (loss - gate)): a gentle monotone gate on the loss.
    """

    num_classes: int = 3
    hidden_dim: int = 100
    init_slope: float = 2.0
    init_gate: float = 2.5

    def __post_init__(self):
        if self.hidden_dim <= 0:
            raise ContractError("WeightNetSpec: zero-width hidden layer")
        if self.num_classes < 2:
            raise ContractError("WeightNetSpec: need at least 2 classes")
        if self.init_slope <= 0:
            raise ContractError("WeightNetSpec: init_slope must be positive")


@dataclass
class Prediction:
    """Log class probabilities plus the penultimate-layer activation."""

    log_probs: Tensor
    embedding: Tensor


@dataclass
class WeightVector:
    """Per-class weights, each a scalar graph node in the open (0,1)."""

    omegas: tuple[Tensor, ...]

    def values(self) -> np.ndarray:
        return np.array([w.item() for w in self.omegas])

    def __len__(self) -> int:
        return len(self.omegas)


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_backbone(spec: BackboneSpec, seed: int) -> ParamSet:
    """Deterministic uniform fan-in initialization, biases zero."""
    rng = np.random.default_rng(seed)
    widths = (spec.input_dim, *spec.hidden_dims, spec.num_classes)
    entries = []
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        entries.append((f"layer{i}.weight", _uniform_fan_in(rng, n_in, (n_in, n_out))))
        entries.append((f"layer{i}.bias", np.zeros(n_out)))
    return ParamSet(entries)


def init_weightnets(spec: WeightNetSpec, seed: int) -> ParamSet:
    """One independent 1 -> hidden (ReLU) -> 1 (sigmoid) net per class.

    Every net starts as the same increasing map of the loss,
    sigmoid(init_slope * (loss - init_gate)): low-loss samples get near-zero
    weight, hard ones a growing one. Starting the nets identical keeps any
    early preference between classes out of the initialization; a signed
    symmetric start makes the initial per-class pull direction an accident
    of the seed, which destabilizes small-scale runs. The nets decouple as
    soon as their class-specific updates arrive.
    """
    rng = np.random.default_rng(seed)
    h = spec.hidden_dim
    w1 = rng.uniform(0.1, 1.0, size=h)
    w2 = spec.init_slope * w1 / np.dot(w1, w1)
    entries = []
    for c in range(spec.num_classes):
        entries.append((f"class{c}.w1", w1.copy()))
        entries.append((f"class{c}.b1", np.zeros(h)))
        entries.append((f"class{c}.w2", w2.copy()))
        entries.append((f"class{c}.b2", np.full((), -spec.init_slope * spec.init_gate)))
    return ParamSet(entries)


def backbone_layers(theta: ParamSet) -> list[tuple[Tensor, Tensor]]:
    """(weight, bias) pairs in forward order, recovered from entry names."""
    pairs = []
    i = 0
    while f"layer{i}.weight" in theta:
        pairs.append((theta[f"layer{i}.weight"], theta[f"layer{i}.bias"]))
        i += 1
    if not pairs:
        raise ContractError("backbone_layers: ParamSet holds no layer entries")
    return pairs


def num_weightnet_classes(phi: ParamSet) -> int:
    c = 0
    while f"class{c}.w1" in phi:
        c += 1
    if c == 0:
        raise ContractError("ParamSet holds no weight-net entries")
    return c


def forward_backbone(theta: ParamSet, x) -> Prediction:
    """Graph-attached forward pass for a single feature vector."""
    layers = backbone_layers(theta)
    h = x if isinstance(x, Tensor) else ad.constant(np.asarray(x, dtype=np.float64))
    if h.data.ndim != 1 or h.data.shape[0] != layers[0][0].shape[0]:
        raise ContractError(
            f"forward_backbone: input shape {h.data.shape} does not match "
            f"first layer fan-in {layers[0][0].shape[0]}")
    for w, b in layers[:-1]:
        h = ad.relu(ad.add(ad.matmul(h, w), b))
    embedding = h
    w_out, b_out = layers[-1]
    logits = ad.add(ad.matmul(h, w_out), b_out)
    return Prediction(log_probs=ad.log_softmax(logits), embedding=embedding)


def forward_backbone_batch(theta: ParamSet, x_rows) -> Prediction:
    """Graph-attached forward pass for a (n, input_dim) batch."""
    layers = backbone_layers(theta)
    h = x_rows if isinstance(x_rows, Tensor) else ad.constant(np.asarray(x_rows, dtype=np.float64))
    if h.data.ndim != 2 or h.data.shape[1] != layers[0][0].shape[0]:
        raise ContractError(
            f"forward_backbone_batch: input shape {h.data.shape} does not match "
            f"first layer fan-in {layers[0][0].shape[0]}")
    for w, b in layers[:-1]:
        h = ad.relu(ad.add(ad.matmul(h, w), b))
    embedding = h
    w_out, b_out = layers[-1]
    logits = ad.add(ad.matmul(h, w_out), b_out)
    return Prediction(log_probs=ad.log_softmax(logits, axis=1), embedding=embedding)


def forward_arrays(theta: ParamSet, x_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Plain-numpy batch forward: (log_probs, embeddings), no graph."""
    x_rows = np.asarray(x_rows, dtype=np.float64)
    layers = backbone_layers(theta)
    if x_rows.ndim != 2 or x_rows.shape[1] != layers[0][0].shape[0]:
        raise ContractError(
            f"forward_arrays: input shape {x_rows.shape} does not match "
            f"first layer fan-in {layers[0][0].shape[0]}")
    h = x_rows
    for w, b in layers[:-1]:
        h = np.maximum(h @ w.data + b.data, 0.0)
    w_out, b_out = layers[-1]
    logits = h @ w_out.data + b_out.data
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return log_probs, h


def forward_weightnet(phi: ParamSet, class_index: int, loss_value) -> Tensor:
    """Weight of one class from its own MLP; scalar in (0,1), graph-attached."""
    s = loss_value if isinstance(loss_value, Tensor) else ad.constant(float(loss_value))
    if not s.is_scalar():
        raise ContractError(f"forward_weightnet: loss input must be scalar, got {s.shape}")
    w1 = phi[f"class{class_index}.w1"]
    b1 = phi[f"class{class_index}.b1"]
    w2 = phi[f"class{class_index}.w2"]
    b2 = phi[f"class{class_index}.b2"]
    hidden = ad.relu(ad.add(ad.mul(w1, s), b1))
    return ad.sigmoid(ad.add(ad.dot(w2, hidden), b2))


def forward_weightnets(phi: ParamSet, per_class_losses) -> WeightVector:
    """Route the c-th loss through the c-th MLP only."""
    n_classes = num_weightnet_classes(phi)
    losses = list(per_class_losses)
    if len(losses) != n_classes:
        raise ContractError(
            f"forward_weightnets: got {len(losses)} losses for {n_classes} classes")
    return WeightVector(tuple(forward_weightnet(phi, c, losses[c]) for c in range(n_classes)))


def weightnet_values(phi: ParamSet, loss_value: float) -> np.ndarray:
    """Plain-numpy weights of all classes for one scalar input."""
    n_classes = num_weightnet_classes(phi)
    out = np.empty(n_classes)
    for c in range(n_classes):
        hidden = np.maximum(phi[f"class{c}.w1"].data * loss_value + phi[f"class{c}.b1"].data, 0.0)
        out[c] = expit(phi[f"class{c}.w2"].data @ hidden + phi[f"class{c}.b2"].data)
    return out


def predict_class(theta: ParamSet, x) -> int:
    """Argmax class for one sample; ties resolve to the lowest index."""
    log_probs, _ = forward_arrays(theta, np.asarray(x, dtype=np.float64)[None, :])
    return int(np.argmax(log_probs[0]))


def predict_batch(theta: ParamSet, x_rows: np.ndarray) -> np.ndarray:
    log_probs, _ = forward_arrays(theta, x_rows)
    return np.argmax(log_probs, axis=1)
