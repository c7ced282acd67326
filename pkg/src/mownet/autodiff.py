"""Reverse-mode automatic differentiation over dense float64 tensors.

The primitive set is deliberately small: matmul, add, mul, scale, relu,
sigmoid, log_softmax, mean. Everything else in the package (losses,
parameter updates recorded for re-differentiation) is composed from these.
Graphs are built eagerly; an operation whose inputs carry no gradient
requirement produces a plain constant, so no-grad evaluation costs nothing
beyond the numpy arithmetic.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, ShapeError

Array = np.ndarray


def _as_array(value) -> Array:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """A float64 array plus an optional record of the op that produced it.

    ``_vjps`` holds ``(input_tensor, fn)`` pairs where ``fn`` maps the
    output gradient to that input's gradient contribution. Tensors whose
    inputs require no gradient are stored as constants with an empty
    record, which is what makes detached evaluation cheap.
    """

    __slots__ = ("data", "requires_grad", "op", "_vjps")

    def __init__(self, data, requires_grad: bool = False, op: str | None = None,
                 vjps: Sequence[tuple["Tensor", Callable[[Array], Array]]] = ()):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._vjps = tuple(vjps)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def is_scalar(self) -> bool:
        return self.data.size == 1

    def item(self) -> float:
        if not self.is_scalar():
            raise ContractError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __repr__(self) -> str:
        tag = self.op or ("leaf" if self.requires_grad else "const")
        return f"Tensor({tag}, shape={self.shape})"


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def leaf(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else constant(value)


def _node(data: Array, op: str, vjps: Iterable[tuple[Tensor, Callable[[Array], Array]]]) -> Tensor:
    live = tuple((t, fn) for t, fn in vjps if t.requires_grad)
    if not live:
        return Tensor(data, requires_grad=False, op=op)
    return Tensor(data, requires_grad=True, op=op, vjps=live)


def _reduce_to(grad: Array, shape: tuple[int, ...]) -> Array:
    # Sum a numpy-broadcast gradient back down to the operand's shape.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a, b)
    data = a.data + b.data
    return _node(data, "add", [
        (a, lambda g, sh=a.shape: _reduce_to(g, sh)),
        (b, lambda g, sh=b.shape: _reduce_to(g, sh)),
    ])


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("mul", a, b)
    data = a.data * b.data
    return _node(data, "mul", [
        (a, lambda g, o=b.data, sh=a.shape: _reduce_to(g * o, sh)),
        (b, lambda g, o=a.data, sh=b.shape: _reduce_to(g * o, sh)),
    ])


def scale(a, k: float) -> Tensor:
    a = _lift(a)
    k = float(k)
    return _node(a.data * k, "scale", [(a, lambda g: g * k)])


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul: only 1-D/2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    data = ad @ bd

    def grad_a(g, ad=ad, bd=bd):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd)
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g
        return g * bd

    def grad_b(g, ad=ad, bd=bd):
        if ad.ndim == 2 and bd.ndim == 2:
            return ad.T @ g
        if ad.ndim == 2 and bd.ndim == 1:
            return ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return np.outer(ad, g)
        return g * ad

    return _node(data, "matmul", [(a, grad_a), (b, grad_b)])


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), "relu", [(a, lambda g, m=mask: g * m)])


def sigmoid(a) -> Tensor:
    a = _lift(a)
    y = expit(a.data)
    return _node(y, "sigmoid", [(a, lambda g, y=y: g * y * (1.0 - y))])


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    if a.data.ndim not in (1, 2):
        raise ShapeError(f"log_softmax: only 1-D/2-D inputs, got {a.shape}")
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def grad_a(g, y=y, axis=axis):
        return g - np.exp(y) * g.sum(axis=axis, keepdims=True)

    return _node(y, "log_softmax", [(a, grad_a)])


def mean(a, axis: int | None = None) -> Tensor:
    a = _lift(a)
    if axis is None:
        n = a.data.size
        data = np.asarray(a.data.mean())

        def grad_a(g, shape=a.shape, n=n):
            return np.full(shape, float(g) / n)

        return _node(data, "mean", [(a, grad_a)])
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"mean: axis {axis} out of range for shape {a.shape}")
    n = a.shape[axis]
    data = a.data.mean(axis=axis)

    def grad_axis(g, shape=a.shape, axis=axis, n=n):
        return np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy()

    return _node(data, "mean", [(a, grad_axis)])


# ---------------------------------------------------------------------------
# compositions used throughout the package


def sum_all(a) -> Tensor:
    a = _lift(a)
    return scale(mean(a), float(a.size))


def dot(a, b) -> Tensor:
    """Inner product of two same-shape tensors as a scalar graph node."""
    return sum_all(mul(a, b))


# ---------------------------------------------------------------------------
# parameter collections


class ParamSet:
    """Ordered, named collection of gradient-bearing tensors.

    Iteration order is insertion order and is part of the contract:
    ``flatten``/``unflatten`` and every optimizer walk entries in this
    order, which keeps whole-training determinism trivial.
    """

    def __init__(self, entries: Mapping[str, Tensor | Array] | Iterable[tuple[str, Tensor | Array]]):
        items = entries.items() if isinstance(entries, Mapping) else entries
        self._entries: dict[str, Tensor] = {}
        for name, value in items:
            if name in self._entries:
                raise ContractError(f"duplicate parameter name {name!r}")
            t = value if isinstance(value, Tensor) else leaf(value)
            if not t.requires_grad:
                raise ContractError(f"parameter {name!r} must require gradients")
            self._entries[name] = t

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> list[tuple[str, Tensor]]:
        return list(self._entries.items())

    def tensors(self) -> list[Tensor]:
        return list(self._entries.values())

    def num_values(self) -> int:
        return sum(t.size for t in self._entries.values())

    def clone(self) -> "ParamSet":
        """Fresh leaf tensors with copied data, detached from any graph."""
        return ParamSet([(n, leaf(t.data.copy())) for n, t in self._entries.items()])

    def flatten(self) -> Array:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self._entries.values()])

    def unflatten(self, vec: Array) -> "ParamSet":
        vec = _as_array(vec)
        if vec.shape != (self.num_values(),):
            raise ContractError(
                f"unflatten: expected {self.num_values()} values, got shape {vec.shape}")
        out, offset = [], 0
        for name, t in self._entries.items():
            n = t.size
            out.append((name, leaf(vec[offset:offset + n].reshape(t.shape).copy())))
            offset += n
        return ParamSet(out)

    def data_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in self._entries.items():
            h.update(name.encode())
            h.update(str(t.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def __repr__(self) -> str:
        return f"ParamSet({self.names()})"


class GradMap:
    """Gradients keyed exactly like the ParamSet they were taken against."""

    def __init__(self, entries: Iterable[tuple[str, Tensor]]):
        self._entries = dict(entries)

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> list[tuple[str, Tensor]]:
        return list(self._entries.items())

    def flatten(self) -> Array:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self._entries.values()])

    def norm(self) -> float:
        return float(np.linalg.norm(self.flatten()))

    def matches(self, params: ParamSet) -> bool:
        return self.names() == params.names()

    def __repr__(self) -> str:
        return f"GradMap({self.names()})"


def _require_match(params: ParamSet, grads: GradMap, op: str) -> None:
    if grads.names() != params.names():
        raise ContractError(f"{op}: gradient keys {grads.names()} do not match "
                            f"parameter keys {params.names()}")


# ---------------------------------------------------------------------------
# evaluation and backward pass


def forward_eval(graph_root: Tensor) -> float:
    """Value of a scalar graph root; the graph stays alive for backward."""
    if not isinstance(graph_root, Tensor):
        raise ContractError("forward_eval: root must be a Tensor")
    if not graph_root.is_scalar():
        raise ContractError(f"forward_eval: root must be scalar, got shape {graph_root.shape}")
    return float(graph_root.data.reshape(()))


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative post-order; graphs can hold long add-chains.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._vjps:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(root: Tensor, targets: Sequence[Tensor]) -> list[Array]:
    """Gradients of a scalar root with respect to arbitrary graph tensors.

    Targets absent from the graph get exact zeros. Repeated calls on the
    same retained graph return identical results; nothing accumulates.
    """
    if not root.is_scalar():
        raise ContractError(f"backward: root must be scalar, got shape {root.shape}")
    acc: dict[int, Array] = {id(root): np.ones(root.shape)}
    if root.requires_grad:
        for node in reversed(_topo_order(root)):
            g = acc.get(id(node))
            if g is None:
                continue
            for parent, vjp in node._vjps:
                contrib = vjp(g)
                prev = acc.get(id(parent))
                acc[id(parent)] = contrib if prev is None else prev + contrib
    return [acc.get(id(t), np.zeros(t.shape)) for t in targets]


def backward(graph_root: Tensor, wrt: ParamSet) -> GradMap:
    """Exact reverse-mode gradients of a scalar root w.r.t. a ParamSet."""
    grads = grad(graph_root, wrt.tensors())
    return GradMap([(name, constant(g)) for (name, _), g in zip(wrt.items(), grads)])


# ---------------------------------------------------------------------------
# finite-difference validation


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    flagged: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    fd_step: float
    tol: float

    @property
    def passed(self) -> bool:
        return not any(e.flagged for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def summary(self) -> str:
        lines = [f"grad_check: fd_step={self.fd_step:g} tol={self.tol:g}"]
        for e in self.entries:
            mark = "FAIL" if e.flagged else "ok"
            lines.append(f"  {e.name}: max_rel_err={e.max_rel_err:.3e} [{mark}]")
        return "\n".join(lines)


def _rel_err(a: float, b: float) -> float:
    # Relative above 1.0, absolute below: standard finite-difference hybrid,
    # keeps near-zero gradients from exploding the ratio.
    return abs(a - b) / max(abs(a), abs(b), 1.0)


def grad_check(builder: Callable[[], Tensor], wrt: ParamSet,
               fd_step: float = 1e-5, tol: float = 1e-6) -> GradCheckReport:
    """Compare backward() against central finite differences.

    ``builder`` must rebuild the same scalar graph from the current data of
    the ``wrt`` tensors on every call; the check perturbs those tensors in
    place and restores them.
    """
    r1, r2 = builder(), builder()
    v1, v2 = forward_eval(r1), forward_eval(r2)
    if v1 != v2:
        raise ContractError(
            f"grad_check: non-deterministic builder ({v1!r} != {v2!r} on identical inputs)")
    analytic = backward(r1, wrt)

    entries = []
    for name, tensor in wrt.items():
        a = analytic[name].data
        worst = 0.0
        flat = tensor.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + fd_step
            f_plus = forward_eval(builder())
            flat[i] = orig - fd_step
            f_minus = forward_eval(builder())
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * fd_step)
            worst = max(worst, _rel_err(float(a_flat[i]), numeric))
        entries.append(GradCheckEntry(name=name, max_rel_err=worst, flagged=worst > tol))
    return GradCheckReport(entries=entries, fd_step=fd_step, tol=tol)
