"""Adam with per-group learning rates."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class ParamGroup:
    params: list
    lr: float


@dataclass
class Adam:
    """Bias-corrected Adam over groups of tensors.

    ``groups`` is a sequence of ``(tensors, lr)`` pairs. Every tensor must hold
    a gradient when :meth:`step` runs.
    """

    groups: Sequence
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: dict = field(default_factory=dict, init=False)

    def __post_init__(self):
        self.groups = [g if isinstance(g, ParamGroup) else ParamGroup(list(g[0]), float(g[1]))
                       for g in self.groups]
        seen = set()
        for g in self.groups:
            for p in g.params:
                if id(p) in seen:
                    raise ContractError("a tensor appears in more than one parameter group")
                seen.add(id(p))
                p.requires_grad = True
                self.state[id(p)] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))

    @property
    def params(self) -> list:
        return [p for g in self.groups for p in g.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        missing = [p.name or repr(p) for p in self.params if p.grad is None]
        if missing:
            raise ContractError(f"adam step: no gradient for {', '.join(missing[:5])}")
        for g in self.groups:
            for p in g.params:
                adam_update(p, p.grad, self.state[id(p)], g.lr, self.beta1, self.beta2, self.eps)


def adam_update(p: Tensor, grad: np.ndarray, st: AdamState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam update of ``p``."""
    if grad.shape != p.shape:
        raise ContractError(f"gradient shape {grad.shape} does not match parameter {p.shape}")
    st.step += 1
    st.m *= beta1
    st.m += (1 - beta1) * grad
    st.v *= beta2
    st.v += (1 - beta2) * grad * grad
    mhat = st.m / (1 - beta1 ** st.step)
    vhat = st.v / (1 - beta2 ** st.step)
    p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)


def adam_step(params: Iterable[Tensor], grads: Iterable[np.ndarray], states: Iterable[AdamState],
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Functional form: update each parameter from an explicit gradient."""
    for p, g, st in zip(params, grads, states):
        if g is None:
            raise ContractError("adam step: missing gradient")
        adam_update(p, g, st, lr, beta1, beta2, eps)
