"""Alternating bilevel training loop.

One iteration runs three sub-steps on a mini-batch:

1. virtual step: a provisional, graph-recorded SGD update of the backbone
   under the meta-weighted per-class CE terms, with the weights produced
   by the weight nets from detached per-class MOS losses;
2. weight-net update: descend the MOS cross-entropy evaluated at the
   provisional backbone, differentiated through the recorded update
   (either directly through the graph or via the equivalent decomposed
   inner-product form);
3. backbone update: descend the batch-mean MCE with weights recomputed
   from each sample's own CE under the fresh weight nets. This gradient
   deliberately flows through the weight-net inputs as well; that path is
   what anchors the update to the labels.

A plain cross-entropy trainer with the same loop shape, optimizer and
schedule serves as the controlled baseline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import GradMap, ParamSet, Tensor
from .datasynth import Dataset, require_class_capacity
from .errors import ContractError, NumericError
from .model import (BackboneSpec, WeightNetSpec, forward_backbone,
                    forward_backbone_batch, forward_weightnet, init_backbone,
                    init_weightnets)
from .mos import (MetaOrdinalSet, meta_class_loss_values, mos_mean_ce,
                  pick_log_prob, sample_mos)
from .optim import AdamState, adam_step, sgd_step

log = logging.getLogger(__name__)

MOS_MODES = ("per-sample", "batch")
HYPERGRAD_MODES = ("through", "decomposed")
OUTER_OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1e-4
    beta: float = 1e-4
    batch_size: int = 16
    k: int = 1
    num_classes: int = 3
    epochs: int = 100
    lr_decay_factor: float = 0.1
    lr_decay_period: int = 80
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    seed: int = 0
    mos_mode: str = "per-sample"
    hypergrad_mode: str = "through"
    outer_optimizer: str = "sgd"
    hidden_dims: tuple[int, ...] = (32,)
    weightnet_hidden: int = 100
    hypergrad_crosscheck: bool = False

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ContractError("TrainConfig: learning rates must be positive")
        if self.batch_size < 1:
            raise ContractError("TrainConfig: batch_size must be >= 1")
        if self.k < 1:
            raise ContractError("TrainConfig: k must be >= 1")
        if self.epochs < 0:
            raise ContractError("TrainConfig: epochs must be >= 0")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ContractError("TrainConfig: lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_period < 1:
            raise ContractError("TrainConfig: lr_decay_period must be >= 1")
        if self.mos_mode not in MOS_MODES:
            raise ContractError(f"TrainConfig: mos_mode must be one of {MOS_MODES}")
        if self.hypergrad_mode not in HYPERGRAD_MODES:
            raise ContractError(f"TrainConfig: hypergrad_mode must be one of {HYPERGRAD_MODES}")
        if self.outer_optimizer not in OUTER_OPTIMIZERS:
            raise ContractError(f"TrainConfig: outer_optimizer must be one of {OUTER_OPTIMIZERS}")


@dataclass
class StepTrace:
    iteration: int
    epoch: int
    omega_tr: np.ndarray
    omega_meta: np.ndarray
    mce: float
    meta_loss: float
    hypergrad_norm: float


@dataclass
class BaselineStepTrace:
    iteration: int
    epoch: int
    ce: float


@dataclass
class VirtualStep:
    """The provisional backbone plus everything the hypergradient reuses."""

    theta_hat: ParamSet
    omega_nodes: list[list[Tensor]]
    omega_values: np.ndarray
    sample_grads: list[list[GradMap]]
    weight_inputs: np.ndarray
    alpha: float


@dataclass
class PhiUpdate:
    phi_next: ParamSet
    hypergrad: GradMap
    hypergrad_norm: float
    meta_loss: float
    g_alignment: float | None = None


@dataclass
class ThetaUpdate:
    theta_next: ParamSet
    mce: float
    omega_tr: np.ndarray


@dataclass
class TrainResult:
    theta: ParamSet
    phi: ParamSet | None
    trace: list
    snapshots: list[tuple[int, ParamSet, ParamSet | None]] = field(default_factory=list)


def _check_finite_grads(grads: GradMap, where: str) -> None:
    for name, g in grads.items():
        if not np.isfinite(g.data).all():
            raise NumericError(f"{where}: non-finite gradient for parameter {name!r}")


def virtual_step(theta: ParamSet, phi: ParamSet, batch_features: np.ndarray,
                 mos_list: Sequence[MetaOrdinalSet], dataset: Dataset,
                 alpha: float, num_classes: int) -> VirtualStep:
    """Provisional backbone update, recorded so it stays differentiable in phi.

    For every sample i and class c the term is omega[i,c] * grad of the
    class-c negative log-probability of sample i, where omega[i,c] is the
    c-th weight net applied to the detached class-c MOS loss. The gradient
    factors are constants; only the weights carry graph structure.
    """
    n = batch_features.shape[0]
    if n == 0:
        raise ContractError("virtual_step: empty batch")
    if len(mos_list) != n:
        raise ContractError("virtual_step: need one MOS per batch sample")

    sample_grads: list[list[GradMap]] = []
    for i in range(n):
        pred = forward_backbone(theta, batch_features[i])
        grads_i = []
        for c in range(num_classes):
            root = ad.scale(pick_log_prob(pred.log_probs, c), -1.0)
            g = ad.backward(root, theta)
            _check_finite_grads(g, "virtual_step")
            grads_i.append(g)
        sample_grads.append(grads_i)

    omega_nodes: list[list[Tensor]] = []
    weight_inputs = np.empty((n, num_classes))
    for i in range(n):
        weight_inputs[i] = meta_class_loss_values(theta, mos_list[i], dataset)
        omega_nodes.append([forward_weightnet(phi, c, float(weight_inputs[i, c]))
                            for c in range(num_classes)])

    update_entries = []
    for name, _ in theta.items():
        acc = None
        for i in range(n):
            for c in range(num_classes):
                term = ad.mul(omega_nodes[i][c], ad.constant(sample_grads[i][c][name].data))
                acc = term if acc is None else ad.add(acc, term)
        update_entries.append((name, acc))
    theta_hat = sgd_step(theta, GradMap(update_entries), lr=alpha / n, differentiable=True)

    omega_values = np.array([[w.item() for w in row] for row in omega_nodes])
    return VirtualStep(theta_hat=theta_hat, omega_nodes=omega_nodes,
                       omega_values=omega_values, sample_grads=sample_grads,
                       weight_inputs=weight_inputs, alpha=alpha)


def _decomposed_hypergrad(vs: VirtualStep, phi: ParamSet,
                          mos_list: Sequence[MetaOrdinalSet],
                          dataset: Dataset) -> tuple[GradMap, float, float]:
    """Product-form hypergradient: pair each (sample, class) weight's
    sensitivity with the inner product of its recorded gradient factor and
    the meta-loss gradient at the provisional backbone."""
    theta_hat_const = ParamSet([(n, ad.leaf(t.data)) for n, t in vs.theta_hat.items()])
    meta = mos_mean_ce(theta_hat_const, mos_list, dataset)
    h = ad.backward(meta, theta_hat_const)

    n = len(vs.omega_nodes)
    phi_tensors = phi.tensors()
    acc = [np.zeros(t.shape) for t in phi_tensors]
    alignment = 0.0
    for i in range(n):
        for c, omega in enumerate(vs.omega_nodes[i]):
            inner = sum(float(np.vdot(vs.sample_grads[i][c][name].data, h[name].data))
                        for name in h)
            alignment += inner
            coeff = -(vs.alpha / n) * inner
            if coeff == 0.0:
                continue
            for slot, g in zip(acc, ad.grad(omega, phi_tensors)):
                slot += coeff * g
    hyper = GradMap([(name, ad.constant(a)) for (name, _), a in zip(phi.items(), acc)])
    return hyper, ad.forward_eval(meta), alignment


def phi_update(vs: VirtualStep, phi: ParamSet, mos_list: Sequence[MetaOrdinalSet],
               dataset: Dataset, beta: float, mode: str = "through",
               crosscheck: bool = False, crosscheck_tol: float = 1e-8) -> PhiUpdate:
    """Weight-net update by descending the MOS CE at the provisional backbone.

    ``mode`` picks how the hypergradient is computed; with ``crosscheck``
    both routes run and any relative disagreement beyond the tolerance is
    a hard failure.
    """
    if mode not in HYPERGRAD_MODES:
        raise ContractError(f"phi_update: unknown hypergrad mode {mode!r}")
    through_hyper = None
    decomposed = None
    g_alignment = None

    if mode == "through" or crosscheck:
        meta = mos_mean_ce(vs.theta_hat, mos_list, dataset)
        through_hyper = ad.backward(meta, phi)
        meta_value = ad.forward_eval(meta)
    if mode == "decomposed" or crosscheck:
        decomposed = _decomposed_hypergrad(vs, phi, mos_list, dataset)
        meta_value = decomposed[1]
        g_alignment = decomposed[2]
        log.debug("phi_update: sum of meta/train gradient inner products = %.6g", g_alignment)

    if crosscheck:
        a, b = through_hyper.flatten(), decomposed[0].flatten()
        denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-300)
        rel = float(np.linalg.norm(a - b)) / denom
        if rel > crosscheck_tol:
            raise NumericError(
                f"phi_update: hypergradient modes disagree (relative error {rel:.3e} "
                f"> {crosscheck_tol:g})")

    hyper = through_hyper if mode == "through" else decomposed[0]
    _check_finite_grads(hyper, "phi_update")
    phi_next = sgd_step(phi, hyper, lr=beta)
    return PhiUpdate(phi_next=phi_next, hypergrad=hyper, hypergrad_norm=hyper.norm(),
                     meta_loss=meta_value, g_alignment=g_alignment)


def theta_update(theta: ParamSet, phi_next: ParamSet, batch_features: np.ndarray,
                 batch_labels: np.ndarray, alpha: float, num_classes: int,
                 outer_optimizer: str = "sgd", adam_state: AdamState | None = None,
                 adam_betas: tuple[float, float] = (0.9, 0.999), adam_eps: float = 1e-8,
                 weight_decay: float = 0.0) -> ThetaUpdate:
    """Real backbone update under the batch-mean MCE.

    Each sample's own CE is fed to all weight nets; the backbone gradient
    includes the path through those CE inputs, so the true label steers
    the step even though the MCE itself sums over every class.
    """
    n = batch_features.shape[0]
    if n == 0:
        raise ContractError("theta_update: empty batch")
    pred = forward_backbone_batch(theta, batch_features)
    lp = pred.log_probs

    def entry(i: int, c: int) -> Tensor:
        mask = np.zeros((n, num_classes))
        mask[i, c] = 1.0
        return ad.scale(ad.mean(ad.mul(lp, ad.constant(mask))), float(n * num_classes))

    total = None
    omega_tr = np.empty((n, num_classes))
    for i in range(n):
        own_ce = ad.scale(entry(i, int(batch_labels[i])), -1.0)
        for c in range(num_classes):
            omega = forward_weightnet(phi_next, c, own_ce)
            omega_tr[i, c] = omega.item()
            term = ad.mul(omega, entry(i, c))
            total = term if total is None else ad.add(total, term)
    loss = ad.scale(total, -1.0 / n)
    mce_value = ad.forward_eval(loss)
    if not np.isfinite(mce_value):
        raise NumericError("theta_update: non-finite MCE loss")

    grads = ad.backward(loss, theta)
    _check_finite_grads(grads, "theta_update")
    if outer_optimizer == "adam":
        if adam_state is None:
            raise ContractError("theta_update: adam optimizer requires a state")
        theta_next = adam_step(theta, grads, adam_state, lr=alpha, betas=adam_betas,
                               eps=adam_eps, weight_decay=weight_decay)
    else:
        theta_next = sgd_step(theta, grads, lr=alpha)
    return ThetaUpdate(theta_next=theta_next, mce=mce_value, omega_tr=omega_tr)


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def _decayed(value: float, epoch: int, config: TrainConfig) -> float:
    return value * config.lr_decay_factor ** (epoch // config.lr_decay_period)


def sample_batch_mos(class_index: dict[int, list[int]], batch: np.ndarray, k: int,
                     rng: np.random.Generator, mode: str) -> list[MetaOrdinalSet]:
    """Per-sample MOS, or one draw shared by the whole batch."""
    if mode == "per-sample":
        return [sample_mos(class_index, int(i), k, rng) for i in batch]
    shared = sample_mos(class_index, int(batch[0]), k, rng,
                        extra_exclude=(int(i) for i in batch[1:]))
    return [MetaOrdinalSet(per_class_indices=shared.per_class_indices, target_index=int(i))
            for i in batch]


def train(config: TrainConfig, dataset: Dataset,
          mos_observer: Callable[[MetaOrdinalSet], None] | None = None) -> TrainResult:
    """Full training run; deterministic given the config seed.

    ``mos_observer`` sees every sampled MOS (used by invariant audits).
    """
    require_class_capacity(dataset, config.k, config.num_classes)
    theta = init_backbone(BackboneSpec(dataset.dim, config.hidden_dims, config.num_classes),
                          config.seed)
    phi = init_weightnets(WeightNetSpec(config.num_classes, config.weightnet_hidden),
                          config.seed + 1)
    class_index = dataset.class_index(config.num_classes)
    rng = np.random.default_rng(config.seed)
    adam_state = AdamState.for_params(theta) if config.outer_optimizer == "adam" else None

    trace: list[StepTrace] = []
    snapshots: list[tuple[int, ParamSet, ParamSet | None]] = []
    iteration = 0
    for epoch in range(config.epochs):
        alpha_e = _decayed(config.alpha, epoch, config)
        beta_e = _decayed(config.beta, epoch, config)
        order = rng.permutation(len(dataset))
        for batch in _batches(order, config.batch_size):
            mos_list = sample_batch_mos(class_index, batch, config.k, rng, config.mos_mode)
            if mos_observer is not None:
                for m in mos_list:
                    mos_observer(m)
            try:
                vs = virtual_step(theta, phi, dataset.features[batch], mos_list,
                                  dataset, alpha_e, config.num_classes)
                pu = phi_update(vs, phi, mos_list, dataset, beta_e,
                                mode=config.hypergrad_mode,
                                crosscheck=config.hypergrad_crosscheck)
                tu = theta_update(theta, pu.phi_next, dataset.features[batch],
                                  dataset.labels[batch], alpha_e, config.num_classes,
                                  outer_optimizer=config.outer_optimizer,
                                  adam_state=adam_state, adam_betas=config.adam_betas,
                                  adam_eps=config.adam_eps, weight_decay=config.weight_decay)
            except NumericError as err:
                raise NumericError(f"iteration {iteration} (epoch {epoch}): {err}") from err
            trace.append(StepTrace(
                iteration=iteration, epoch=epoch,
                omega_tr=tu.omega_tr.mean(axis=0),
                omega_meta=vs.omega_values.mean(axis=0),
                mce=tu.mce, meta_loss=pu.meta_loss, hypergrad_norm=pu.hypergrad_norm))
            theta, phi = tu.theta_next, pu.phi_next
            iteration += 1
        snapshots.append((epoch, theta.clone(), phi.clone()))
    return TrainResult(theta=theta, phi=phi, trace=trace, snapshots=snapshots)


def train_ce_baseline(config: TrainConfig, dataset: Dataset) -> TrainResult:
    """Per-sample CE with the identical loop shape, optimizer and schedule."""
    theta = init_backbone(BackboneSpec(dataset.dim, config.hidden_dims, config.num_classes),
                          config.seed)
    rng = np.random.default_rng(config.seed)
    adam_state = AdamState.for_params(theta) if config.outer_optimizer == "adam" else None

    trace: list[BaselineStepTrace] = []
    snapshots: list[tuple[int, ParamSet, ParamSet | None]] = []
    iteration = 0
    for epoch in range(config.epochs):
        alpha_e = _decayed(config.alpha, epoch, config)
        order = rng.permutation(len(dataset))
        for batch in _batches(order, config.batch_size):
            n = len(batch)
            pred = forward_backbone_batch(theta, dataset.features[batch])
            onehot = np.zeros((n, config.num_classes))
            onehot[np.arange(n), dataset.labels[batch]] = 1.0
            loss = ad.scale(ad.mean(ad.mul(pred.log_probs, ad.constant(onehot))),
                            -float(config.num_classes))
            value = ad.forward_eval(loss)
            if not np.isfinite(value):
                raise NumericError(f"iteration {iteration} (epoch {epoch}): non-finite CE loss")
            grads = ad.backward(loss, theta)
            _check_finite_grads(grads, f"iteration {iteration}")
            if config.outer_optimizer == "adam":
                theta = adam_step(theta, grads, adam_state, lr=alpha_e,
                                  betas=config.adam_betas, eps=config.adam_eps,
                                  weight_decay=config.weight_decay)
            else:
                theta = sgd_step(theta, grads, lr=alpha_e)
            trace.append(BaselineStepTrace(iteration=iteration, epoch=epoch, ce=value))
            iteration += 1
        snapshots.append((epoch, theta.clone(), None))
    return TrainResult(theta=theta, phi=None, trace=trace, snapshots=snapshots)


# ---------------------------------------------------------------------------
# trace files


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_trace_csv(path, trace: Sequence[StepTrace], num_classes: int) -> None:
    cols = (["iter", "epoch"]
            + [f"omega_tr_c{c}" for c in range(num_classes)]
            + [f"omega_meta_c{c}" for c in range(num_classes)]
            + ["mce", "meta_loss", "hypergrad_norm"])
    lines = [",".join(cols)]
    for row in trace:
        fields = ([str(row.iteration), str(row.epoch)]
                  + [_fmt(v) for v in row.omega_tr]
                  + [_fmt(v) for v in row.omega_meta]
                  + [_fmt(row.mce), _fmt(row.meta_loss), _fmt(row.hypergrad_norm)])
        lines.append(",".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def write_baseline_trace_csv(path, trace: Sequence[BaselineStepTrace]) -> None:
    lines = ["iter,epoch,ce_loss"]
    for row in trace:
        lines.append(f"{row.iteration},{row.epoch},{_fmt(row.ce)}")
    Path(path).write_text("\n".join(lines) + "\n")
