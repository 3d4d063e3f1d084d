"""Finite-difference gradient checking shared by the test modules."""
import numpy as np

from dnasforge import functional as F
from dnasforge import tensor as T
from dnasforge.tensor import Tensor

EPS = 1e-5
TOL = 1e-4


def grad_error(f, tensors, eps=EPS):
    """Largest ``|analytic - central difference| / max(1, |analytic|)`` over all entries.

    ``f`` maps the list of tensors to a scalar tensor.
    """
    for t in tensors:
        t.grad = None
    f(tensors).backward()
    worst = 0.0
    for t in tensors:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        numeric = np.zeros(t.shape)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = float(f(tensors).data)
            flat[i] = old - eps
            down = float(f(tensors).data)
            flat[i] = old
            numeric.reshape(-1)[i] = (up - down) / (2 * eps)
        err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst


def leaf(rng, shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


# (name, function of leaf tensors, leaf shapes); each is checked through a random projection
OP_CASES = [
    ("add", lambda a, b: T.add(a, b), [(3, 4), (4,)]),
    ("mul", lambda a, b: T.mul(a, b), [(3, 4), (3, 1)]),
    ("div", lambda a, b: T.div(a, T.exp(b)), [(3, 4), (3, 4)]),
    ("sub", lambda a, b: a - b, [(2, 3), (2, 3)]),
    ("scale", lambda a: T.scale(a, -2.5), [(5,)]),
    ("power", lambda a: T.power(T.exp(a), 1.7), [(5,)]),
    ("exp", lambda a: T.exp(a), [(5,)]),
    ("log", lambda a: T.log(T.exp(a) + 1.0), [(5,)]),
    ("tanh", lambda a: T.tanh(a), [(5,)]),
    ("abs", lambda a: T.tabs(a), [(6,)]),
    ("relu", lambda a: T.relu(a), [(6,)]),
    ("sum_axis", lambda a: T.tsum(a, axis=1), [(3, 4)]),
    ("mean", lambda a: T.mean(a, axis=0, keepdims=True), [(3, 4)]),
    ("max", lambda a: T.tmax(a), [(7,)]),
    ("reshape", lambda a: T.reshape(a, (4, 3)), [(3, 4)]),
    ("transpose", lambda a: T.transpose(a, (1, 0)), [(3, 4)]),
    ("getitem", lambda a: a[1:, ::2], [(3, 4)]),
    ("stack", lambda a, b: T.stack([a, b], 1), [(3,), (3,)]),
    ("concat", lambda a, b: T.concat([a, b], 0), [(2, 3), (4, 3)]),
    ("softmax", lambda a: T.softmax(a), [(3, 5)]),
    ("avgpool", lambda a: F.global_avgpool(a), [(2, 3, 4, 4)]),
    ("maxpool2", lambda a: F.maxpool2(a), [(2, 2, 5, 4)]),
    ("linear", lambda a, w, b: F.linear(a, w, b), [(3, 4), (4, 2), (2,)]),
]


def composed_net(kind: str, seed: int = 0):
    """A small network of real blocks plus a fixed batch; returns (blocks, x, labels).

    ``kind`` is ``plain`` (conv-BN-ReLU + MBConv), ``shift`` (shift blocks) or
    ``quant`` (DoReFa/PACT basic blocks at 4 and 2 bits).
    """
    from dnasforge.blocks import ConvBNReLU, Head, MBConvBlock, QuantBasicBlock, ShiftBlock
    from dnasforge.rng import Rng

    shape = (2, 6, 6)
    stem = ConvBNReLU(shape, 4)
    s = stem.out_shape
    if kind == "plain":
        body = [MBConvBlock(s, 4, expansion=2, kernel=3), MBConvBlock(s, 6, kernel=3, stride=2)]
    elif kind == "shift":
        body = [ShiftBlock(s, 4, expansion=2), ShiftBlock(s, 6, stride=2)]
    elif kind == "quant":
        body = [QuantBasicBlock(s, 4, weight_bits=4, act_bits=4),
                QuantBasicBlock(s, 6, stride=2, weight_bits=2, act_bits=2)]
    else:
        raise ValueError(kind)
    blocks = [stem, *body, Head(body[-1].out_shape, 3)]
    rng = Rng(seed)
    for b in blocks:
        b.reset_parameters(rng)
    data = np.random.default_rng(seed)
    return blocks, data.normal(size=(4, *shape)), np.array([0, 1, 2, 1])


def composed_grad_error(kind: str, seed: int = 0) -> float:
    """Finite-difference check over every parameter of ``composed_net(kind)``.

    Quantised rounding offsets are recorded once and replayed on every
    evaluation, so the check sees the straight-through gradient.
    """
    from dnasforge.functional import softmax_cross_entropy
    from dnasforge.quant import frozen_rounding

    blocks, x, y = composed_net(kind, seed)
    params = [p for b in blocks for p in b.parameters()]

    def run():
        h = Tensor(x)
        for b in blocks:
            h = b.forward(h, train=True)
        return softmax_cross_entropy(h, y)

    with frozen_rounding() as offsets:
        run()

    def f(_):
        with frozen_rounding(offsets):
            return run()

    return grad_error(f, params)
