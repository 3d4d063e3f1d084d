"""Fake quantisation with straight-through gradients.

``q_k`` snaps values in [0, 1] to the grid ``i / (2**k - 1)``. Weights go
through a DoReFa-style tanh normalisation before snapping; activations are
clipped to a learnable ``[0, alpha]`` (PACT) and then snapped. Bit width 32
means "leave untouched".
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .tensor import Tensor, as_tensor, div, tabs, tanh, tmax

FULL_PRECISION = 32
ALPHA_INIT = 10.0
ALPHA_MIN = 1e-3
_TOL = 1e-9


@dataclass
class QuantConfig:
    weight_bits: int = FULL_PRECISION
    act_bits: int = FULL_PRECISION
    pact_alpha: float = ALPHA_INIT

    def __post_init__(self):
        for name in ("weight_bits", "act_bits"):
            check_bits(getattr(self, name))
        if self.pact_alpha <= 0:
            raise DomainError("pact_alpha must be positive")


def check_bits(k: int) -> int:
    k = int(k)
    if not (1 <= k <= 8 or k == FULL_PRECISION):
        raise DomainError(f"bit width must be in 1..8 or 32, got {k}")
    return k


def q_k_array(x, k: int) -> np.ndarray:
    """Nearest point of ``{i / (2**k - 1)}``; exact half-steps round away from zero."""
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= k <= 8:
        raise DomainError(f"q_k needs 1 <= k <= 8, got {k}")
    if x.size and (x.min() < -_TOL or x.max() > 1 + _TOL):
        raise DomainError(f"q_k input outside [0, 1]: [{x.min()}, {x.max()}]")
    n = 2 ** k - 1
    s = np.clip(x, 0.0, 1.0) * n
    return np.floor(s + 0.5) / n  # s >= 0, so floor(s + .5) is half-away-from-zero


def q_k(x: float, k: int) -> float:
    return float(q_k_array(x, k))


# Frozen-rounding hook: while active, each straight-through rounding call
# either records its offset (quantised - input) or replays a recorded one.
# Replaying turns the network into a smooth function whose exact gradient is
# the straight-through gradient, which lets finite differences check it.
_frozen = None


@contextlib.contextmanager
def frozen_rounding(offsets: list | None = None):
    """Record (``offsets is None``) or replay rounding offsets in call order.

    Yields the offset list.
    """
    global _frozen
    prev = _frozen
    state = {"offsets": [] if offsets is None else offsets, "replay": offsets is not None, "i": 0}
    _frozen = state
    try:
        yield state["offsets"]
    finally:
        _frozen = prev


def _rounded(data: np.ndarray, fn) -> np.ndarray:
    if _frozen is not None and _frozen["replay"]:
        off = _frozen["offsets"][_frozen["i"]]
        _frozen["i"] += 1
        return data + off
    out = fn(data)
    if _frozen is not None:
        _frozen["offsets"].append(out - data)
    return out


def _ste_round(t: Tensor, k: int) -> Tensor:
    """q_k in the forward pass, identity in the backward pass."""
    return Tensor._make(_rounded(t.data, lambda v: q_k_array(v, k)), (t,), lambda g: (g,), f"ste_round{k}")


def dorefa_weights(w: Tensor, k: int) -> Tensor:
    """``2 q_k(tanh(w) / (2 max|tanh(w)|) + 0.5) - 1``, values in [-1, 1].

    k = 32 returns ``w`` itself. An all-zero weight maps to all zeros.
    """
    k = check_bits(k)
    w = as_tensor(w)
    if w.size == 0:
        raise ValueError("dorefa_weights: empty weight tensor")
    if k == FULL_PRECISION:
        return w
    t = tanh(w)
    m = tmax(tabs(t))
    if m.data == 0.0:
        return Tensor._make(np.zeros(w.shape), (w,), lambda g: (np.zeros(w.shape),), "dorefa_zero")
    u = div(t, m * 2.0) + 0.5
    return _ste_round(u, k) * 2.0 - 1.0


def pact_clip(x: Tensor, alpha: Tensor) -> Tensor:
    """``0.5 (|x| - |x - alpha| + alpha)``, i.e. clamp(x, 0, alpha).

    d/dx is 1 on 0 < x < alpha, d/dalpha is 1 where x >= alpha.
    """
    x, alpha = as_tensor(x), as_tensor(alpha)
    a = float(np.asarray(alpha.data).reshape(-1)[0])
    if a <= 0:
        raise DomainError(f"pact alpha must be positive, got {a}")
    out = np.clip(x.data, 0.0, a)  # equals the abs form exactly, without its rounding error
    pass_mask = (x.data > 0) & (x.data < a)
    top_mask = x.data >= a
    ashape = alpha.shape

    def backward(g):
        gx = g * pass_mask if x.requires_grad else None
        ga = np.full(ashape, (g * top_mask).sum()) if alpha.requires_grad else None
        return gx, ga

    return Tensor._make(out, (x, alpha), backward, "pact_clip")


def pact_quantize(y: Tensor, alpha: Tensor, k: int) -> Tensor:
    """``q_k(y / alpha) * alpha`` with a straight-through gradient in ``y``.

    The rounding offset is treated as a constant, so no gradient reaches
    alpha through this step (alpha learns through ``pact_clip``).
    """
    k = check_bits(k)
    y, alpha = as_tensor(y), as_tensor(alpha)
    a = float(np.asarray(alpha.data).reshape(-1)[0])
    if a <= 0:
        raise DomainError(f"pact alpha must be positive, got {a}")
    if k == FULL_PRECISION:
        return y
    out = _rounded(y.data, lambda v: q_k_array(v / a, k) * a)
    return Tensor._make(out, (y,), lambda g: (g,), f"pact_quantize{k}")


def pact(x: Tensor, alpha: Tensor, k: int) -> Tensor:
    """Clip to [0, alpha] then quantise to k bits."""
    return pact_quantize(pact_clip(x, alpha), alpha, k)


def project_alpha(alpha: Tensor) -> None:
    """Keep a learnable clip bound at or above ``ALPHA_MIN`` after an update."""
    np.maximum(alpha.data, ALPHA_MIN, out=alpha.data)


__all__ = [
    "QuantConfig", "q_k", "q_k_array", "dorefa_weights", "pact_clip", "pact_quantize",
    "pact", "project_alpha", "frozen_rounding", "FULL_PRECISION", "ALPHA_INIT",
]
