"""Numeric self-checks: randomized finite-difference validation of the
engine's primitives and of the bilevel hypergradient routes.

These suites are the artifact's trust anchor, so each one compares an
autodiff result against an independently coded path (central differences
over the plain-numpy forward pass).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import GradMap, ParamSet, Tensor, grad_check
from .datasynth import Dataset
from .model import BackboneSpec, WeightNetSpec, init_backbone, init_weightnets
from .mos import MetaOrdinalSet, sample_mos
from .trainer import VirtualStep, phi_update, virtual_step


@dataclass
class CheckCase:
    name: str
    error: float
    tol: float
    passed: bool
    detail: str = ""


@dataclass
class SuiteReport:
    title: str
    cases: list[CheckCase] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    @property
    def worst(self) -> float:
        return max((c.error for c in self.cases), default=0.0)

    def failures(self) -> list[CheckCase]:
        return [c for c in self.cases if not c.passed]

    def summary(self, verbose: bool = False) -> str:
        lines = [f"{self.title}: {len(self.cases)} cases, "
                 f"worst error {self.worst:.3e}, "
                 f"{'PASS' if self.passed else 'FAIL'}"]
        shown = self.cases if verbose else self.failures()
        for c in shown:
            mark = "ok" if c.passed else "FAIL"
            extra = f" ({c.detail})" if c.detail else ""
            lines.append(f"  [{mark}] {c.name}: error {c.error:.3e} vs tol {c.tol:g}{extra}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# randomized primitive coverage


def _build_full_coverage_graph(rng: np.random.Generator):
    """A small classifier-shaped graph that exercises every primitive.

    ReLU pre-activations are forced away from the kink so that central
    differences stay valid at step 1e-5.
    """
    b = int(rng.integers(2, 5))
    n = int(rng.integers(2, 6))
    m = int(rng.integers(2, 6))
    p = int(rng.integers(2, 5))
    x = rng.normal(size=(b, n))
    for _ in range(200):
        w1 = rng.normal(size=(n, m)) * 0.8
        b1 = rng.normal(size=m) * 0.5
        pre = x @ w1 + b1
        if np.abs(pre).min() > 1e-3:
            break
    w2 = rng.normal(size=(m, p)) * 0.8
    b2 = rng.normal(size=p) * 0.5
    labels = rng.integers(0, p, size=b)
    onehot = np.zeros((b, p))
    onehot[np.arange(b), labels] = 1.0
    gate = rng.normal(size=(b, m))
    k1 = float(rng.uniform(0.3, 1.7))
    use_vector_tail = bool(rng.integers(0, 2))

    params = ParamSet([
        ("w1", ad.leaf(w1)), ("b1", ad.leaf(b1)),
        ("w2", ad.leaf(w2)), ("b2", ad.leaf(b2)),
    ])

    def builder() -> Tensor:
        hidden = ad.relu(ad.add(ad.matmul(ad.constant(x), params["w1"]), params["b1"]))
        logits = ad.add(ad.matmul(hidden, params["w2"]), params["b2"])
        ce = ad.scale(ad.mean(ad.mul(ad.log_softmax(logits, axis=1), ad.constant(onehot))),
                      -float(p))
        squashed = ad.sigmoid(ad.mul(hidden, ad.constant(gate)))
        tail = ad.mean(squashed, axis=0 if use_vector_tail else None)
        if use_vector_tail:
            tail = ad.mean(tail)
        return ad.add(ce, ad.scale(tail, k1))

    return builder, params


def autodiff_fd_suite(n_graphs: int = 200, seed: int = 0, fd_step: float = 1e-5,
                      tol: float = 1e-6) -> SuiteReport:
    """Backward pass vs central differences on randomized small graphs."""
    report = SuiteReport(title="autodiff finite-difference suite")
    rng = np.random.default_rng(seed)
    for g in range(n_graphs):
        builder, params = _build_full_coverage_graph(rng)
        check = grad_check(builder, params, fd_step=fd_step, tol=tol)
        worst = check.max_rel_err
        report.cases.append(CheckCase(
            name=f"graph_{g:03d}", error=worst, tol=tol, passed=worst <= tol))
    return report


# ---------------------------------------------------------------------------
# bilevel instances and the hypergradient oracle


@dataclass
class BilevelInstance:
    dataset: Dataset
    theta: ParamSet
    phi: ParamSet
    batch: np.ndarray
    mos_list: list[MetaOrdinalSet]
    alpha: float
    num_classes: int


def random_bilevel_instance(seed: int, num_classes: int = 3, k: int = 1,
                            max_batch: int = 4) -> BilevelInstance:
    """A small random problem: backbone under 50 parameters, tiny weight nets."""
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 4))
    hidden = (int(rng.integers(2, 4)),) if rng.integers(0, 2) else ()
    n_per_class = k + 2
    n = num_classes * n_per_class
    features = rng.normal(size=(n, d))
    labels = np.repeat(np.arange(num_classes), n_per_class).astype(np.uint8)
    scores = np.array([2.0, 3.0, 4.0])[labels]
    dataset = Dataset(features, scores, labels)

    theta = init_backbone(BackboneSpec(d, hidden, num_classes), int(rng.integers(1 << 30)))
    assert theta.num_values() <= 50
    phi = init_weightnets(WeightNetSpec(num_classes, int(rng.integers(2, 5))),
                          int(rng.integers(1 << 30)))
    # scatter phi away from the structured init so the checks cover
    # generic weight-net parameters, signs and all
    phi = ParamSet([(n, ad.leaf(t.data + rng.normal(0.0, 0.6, size=t.shape)))
                    for n, t in phi.items()])
    batch_n = int(rng.integers(1, max_batch + 1))
    batch = rng.choice(n, size=batch_n, replace=False)
    class_index = dataset.class_index(num_classes)
    mos_list = [sample_mos(class_index, int(i), k, rng) for i in batch]
    alpha = float(rng.uniform(0.2, 0.8))
    return BilevelInstance(dataset=dataset, theta=theta, phi=phi, batch=batch,
                           mos_list=mos_list, alpha=alpha, num_classes=num_classes)


def _numpy_forward_logp(theta_data: dict[str, np.ndarray], x_rows: np.ndarray) -> np.ndarray:
    h = x_rows
    i = 0
    while f"layer{i + 1}.weight" in theta_data:
        h = np.maximum(h @ theta_data[f"layer{i}.weight"] + theta_data[f"layer{i}.bias"], 0.0)
        i += 1
    logits = h @ theta_data[f"layer{i}.weight"] + theta_data[f"layer{i}.bias"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _numpy_weightnet(phi: ParamSet, c: int, s: float) -> float:
    hidden = np.maximum(phi[f"class{c}.w1"].data * s + phi[f"class{c}.b1"].data, 0.0)
    return float(expit(phi[f"class{c}.w2"].data @ hidden + phi[f"class{c}.b2"].data))


def finite_difference_hypergrad(inst: BilevelInstance, vs: VirtualStep,
                                step: float = 1e-5) -> GradMap:
    """Central differences of the meta objective through a re-executed
    virtual step, entirely on the plain-numpy forward path.

    The gradient factors of the recorded update do not depend on the
    weight nets, so the re-execution reuses them and re-derives only the
    weights, the provisional parameters, and the MOS cross-entropy.
    """
    n = len(inst.batch)
    meta_rows, meta_labels = [], []
    for mos in inst.mos_list:
        for c in sorted(mos.per_class_indices):
            for i in mos.per_class_indices[c]:
                meta_rows.append(inst.dataset.features[i])
                meta_labels.append(c)
    meta_x = np.asarray(meta_rows)
    meta_y = np.asarray(meta_labels)
    theta_data = {name: t.data for name, t in inst.theta.items()}

    def objective() -> float:
        hat = {name: arr.copy() for name, arr in theta_data.items()}
        for i in range(n):
            for c in range(inst.num_classes):
                omega = _numpy_weightnet(inst.phi, c, float(vs.weight_inputs[i, c]))
                for name in hat:
                    hat[name] -= (inst.alpha / n) * omega * vs.sample_grads[i][c][name].data
        logp = _numpy_forward_logp(hat, meta_x)
        return float(-logp[np.arange(len(meta_y)), meta_y].mean())

    entries = []
    for name, tensor in inst.phi.items():
        flat = tensor.data.reshape(-1)
        out = np.empty(flat.shape)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            f_plus = objective()
            flat[j] = orig - step
            f_minus = objective()
            flat[j] = orig
            out[j] = (f_plus - f_minus) / (2.0 * step)
        entries.append((name, ad.constant(out.reshape(tensor.shape))))
    return GradMap(entries)


def _norm_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b)) / max(float(np.linalg.norm(a)),
                                              float(np.linalg.norm(b)), 1.0)


def hypergrad_equivalence_suite(n_instances: int = 50, seed: int = 0,
                                pair_tol: float = 1e-8, fd_tol: float = 1e-5,
                                fd_step: float = 1e-5,
                                decomposed_transform: Callable[[np.ndarray], np.ndarray] | None = None,
                                ) -> SuiteReport:
    """Triple agreement on random bilevel instances: graph route vs
    decomposed route vs finite differences of the meta objective.

    ``decomposed_transform`` exists for fault-injection tests; it maps the
    flattened decomposed hypergradient before comparison.
    """
    report = SuiteReport(title="hypergradient equivalence suite")
    for j in range(n_instances):
        inst = random_bilevel_instance(seed * 100003 + j)
        vs = virtual_step(inst.theta, inst.phi, inst.dataset.features[inst.batch],
                          inst.mos_list, inst.dataset, inst.alpha, inst.num_classes)
        through = phi_update(vs, inst.phi, inst.mos_list, inst.dataset, beta=0.1,
                             mode="through").hypergrad.flatten()
        decomposed = phi_update(vs, inst.phi, inst.mos_list, inst.dataset, beta=0.1,
                                mode="decomposed").hypergrad.flatten()
        if decomposed_transform is not None:
            decomposed = decomposed_transform(decomposed)
        fd = finite_difference_hypergrad(inst, vs, step=fd_step).flatten()

        pair_err = _norm_rel_err(through, decomposed)
        fd_err = max(_norm_rel_err(through, fd), _norm_rel_err(decomposed, fd))
        report.cases.append(CheckCase(
            name=f"instance_{j:03d}_pair", error=pair_err, tol=pair_tol,
            passed=pair_err <= pair_tol, detail="through vs decomposed"))
        report.cases.append(CheckCase(
            name=f"instance_{j:03d}_fd", error=fd_err, tol=fd_tol,
            passed=fd_err <= fd_tol, detail="both vs central differences"))
    return report
