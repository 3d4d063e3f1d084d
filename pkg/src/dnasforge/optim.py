"""SGD with momentum and Adam, as step functions over parallel lists plus small wrappers."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


def sgd_momentum_step(params: Sequence[Tensor], grads: Sequence, state: dict, lr: float,
                      momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """``v <- mu v + g``; ``p <- p - lr v``. A ``None`` gradient leaves p and v alone.

    ``weight_decay`` adds ``wd * p`` to ``g`` first (L2 regularisation).
    """
    bufs = state.setdefault("v", [np.zeros(p.shape) for p in params])
    for p, g, v in zip(params, grads, bufs):
        if g is None:
            continue
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p.data
        p.data -= lr * v


def adam_step(params: Sequence[Tensor], grads: Sequence, state: dict, lr: float,
              betas: tuple = (0.9, 0.999), eps: float = 1e-8) -> None:
    """Adam with bias-corrected first and second moments."""
    b1, b2 = betas
    m = state.setdefault("m", [np.zeros(p.shape) for p in params])
    v = state.setdefault("v", [np.zeros(p.shape) for p in params])
    state["t"] = t = state.get("t", 0) + 1
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for p, g, mi, vi in zip(params, grads, m, v):
        if g is None:
            continue
        mi *= b1
        mi += (1.0 - b1) * g
        vi *= b2
        vi += (1.0 - b2) * g * g
        p.data -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


class _Optimizer:
    def __init__(self, params: Sequence[Tensor]):
        self.params = list(params)
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict:
        """Flat ``name -> array`` view for checkpoints."""
        out = {}
        for k, v in self.state.items():
            if isinstance(v, list):
                out.update({f"{k}/{i}": a for i, a in enumerate(v)})
            else:
                out[k] = np.asarray(v)
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        state: dict = {}
        for name, a in arrays.items():
            if "/" in name:
                k, i = name.split("/")
                state.setdefault(k, {})[int(i)] = np.array(a, dtype=np.float64)
            else:
                state[name] = int(a)
        for k, v in list(state.items()):
            if isinstance(v, dict):
                state[k] = [v[i] for i in range(len(v))]
        self.state = state


class SGD(_Optimizer):
    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        super().__init__(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay

    def step(self) -> None:
        sgd_momentum_step(self.params, [p.grad for p in self.params], self.state, self.lr,
                          self.momentum, self.weight_decay)


class Adam(_Optimizer):
    def __init__(self, params, lr: float, betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        super().__init__(params)
        self.lr, self.betas, self.eps = lr, tuple(betas), eps

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr, self.betas, self.eps)
