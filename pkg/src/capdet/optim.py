"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from capdet.tensor import ShapeError, Tensor


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """Return updated parameter arrays; ``state`` is advanced in place.

    Parameters whose gradient is missing are returned untouched (same object).
    """
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam: grad {g.shape} does not match param {name} {p.shape}")
        g = g.astype(np.float32, copy=False)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ShapeError(f"adam: state {m.shape} does not match param {name} {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        state.m[name] = m.astype(np.float32)
        state.v[name] = v.astype(np.float32)
        mhat = m / bc1
        vhat = v / bc2
        out[name] = (p - lr * mhat / (np.sqrt(vhat) + eps)).astype(np.float32)
    return out


class Adam:
    """Stateful wrapper that updates :class:`Tensor` parameters by name."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.betas = (beta1, beta2)
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items()}
        new = adam_step(arrays, grads, self.state, self.lr, *self.betas, self.eps)
        for k, p in self.params.items():
            p.data = new[k]
