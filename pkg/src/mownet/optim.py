"""Parameter update steps: plain SGD (optionally graph-recorded) and Adam.

Both steps return a new ParamSet and never mutate their input; the
recorded variant of the SGD step is what lets the meta objective be
differentiated through a provisional update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import GradMap, ParamSet, Tensor
from .errors import ContractError


def sgd_step(params: ParamSet, grads: GradMap, lr: float,
             differentiable: bool = False) -> ParamSet:
    """New ParamSet with entries ``p - lr * g``.

    With ``differentiable=True`` the subtraction is built from graph ops,
    so the result stays differentiable with respect to anything upstream
    of the gradient tensors (and of the parameters themselves).
    """
    ad._require_match(params, grads, "sgd_step")
    if differentiable:
        return ParamSet([(n, ad.add(p, ad.scale(grads[n], -lr))) for n, p in params.items()])
    return ParamSet([(n, ad.leaf(p.data - lr * grads[n].data)) for n, p in params.items()])


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: ParamSet) -> "AdamState":
        return cls(m={n: np.zeros(t.shape) for n, t in params.items()},
                   v={n: np.zeros(t.shape) for n, t in params.items()})


def adam_step(params: ParamSet, grads: GradMap, state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.0) -> ParamSet:
    """One Adam step with decoupled weight decay; state is updated in place."""
    ad._require_match(params, grads, "adam_step")
    if set(state.m) != set(params.names()):
        raise ContractError("adam_step: optimizer state keyed for a different ParamSet")
    b1, b2 = betas
    state.step += 1
    t = state.step
    out = []
    for name, p in params.items():
        g = grads[name].data
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / (1.0 - b1 ** t)
        v_hat = state.v[name] / (1.0 - b2 ** t)
        new = p.data - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * weight_decay * p.data
        out.append((name, ad.leaf(new)))
    return ParamSet(out)
