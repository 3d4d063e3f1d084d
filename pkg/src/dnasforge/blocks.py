"""Parameterised layers and the candidate blocks a supernet is built from.

Every block maps a (C, H, W) input to a fixed output shape, carries a
``BlockKey`` for latency lookup, lists its convolution/fc layers as
``LayerConfig`` rows for cost accounting, and owns its weights.
"""
from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .cost import BlockKey, LayerConfig
from .errors import ShapeError
from .quant import ALPHA_INIT, FULL_PRECISION, dorefa_weights, pact
from .rng import Rng
from .tensor import Tensor, add_same, parameter, relu, reshape


class Module:
    """Owner of named parameters, buffers and child modules."""

    def __init__(self):
        self._params: dict = {}
        self._buffers: dict = {}
        self._children: dict = {}

    def add_param(self, name: str, value) -> Tensor:
        t = parameter(value)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value) -> np.ndarray:
        arr = np.array(value, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def add_child(self, name: str, mod: "Module") -> "Module":
        self._children[name] = mod
        return mod

    def named_parameters(self, prefix: str = "") -> Iterator:
        for n, p in self._params.items():
            yield prefix + n, p
        for cn, c in self._children.items():
            yield from c.named_parameters(f"{prefix}{cn}.")

    def named_buffers(self, prefix: str = "") -> Iterator:
        for n, b in self._buffers.items():
            yield prefix + n, b
        for cn, c in self._children.items():
            yield from c.named_buffers(f"{prefix}{cn}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator:
        yield self
        for c in self._children.values():
            yield from c.modules()

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def reset_parameters(self, rng: Rng) -> None:
        for c in self._children.values():
            c.reset_parameters(rng)

    def state_dict(self, prefix: str = "") -> dict:
        out = {n: p.data.copy() for n, p in self.named_parameters(prefix)}
        out.update({n: b.copy() for n, b in self.named_buffers(prefix)})
        return out

    def load_state_dict(self, state: dict, prefix: str = "") -> None:
        for n, p in self.named_parameters(prefix):
            if state[n].shape != p.shape:
                raise ShapeError(f"{n}: stored shape {state[n].shape} != {p.shape}")
            p.data[...] = state[n]
        for n, b in self.named_buffers(prefix):
            b[...] = state[n]


class Conv2d(Module):
    """Bias-free convolution; weights pass through DoReFa when ``weight_bits < 32``."""

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, groups: int = 1,
                 weight_bits: int = FULL_PRECISION):
        super().__init__()
        if cin % groups or cout % groups:
            raise ShapeError(f"Conv2d channels ({cin}, {cout}) not divisible by groups={groups}")
        self.cin, self.cout, self.k, self.stride, self.groups = cin, cout, k, stride, groups
        self.pad = k // 2
        self.weight_bits = weight_bits
        self.weight = self.add_param("weight", np.zeros((cout, cin // groups, k, k)))

    def reset_parameters(self, rng: Rng) -> None:
        fan_in = self.cin // self.groups * self.k * self.k
        self.weight.data[...] = rng.normal(0.0, math.sqrt(2.0 / fan_in), self.weight.shape)

    def forward(self, x: Tensor) -> Tensor:
        w = self.weight if self.weight_bits == FULL_PRECISION else dorefa_weights(self.weight, self.weight_bits)
        return F.conv2d(x, w, self.stride, self.pad, self.groups)

    def out_size(self, size: int) -> int:
        return F.conv_output_size(size, self.k, self.stride, self.pad)

    def layer_config(self, out_size: int) -> LayerConfig:
        if self.groups == 1:
            variant = "pointwise" if self.k == 1 else "spatial"
            return LayerConfig(variant, self.cin, self.cout, self.k, out_size)
        if self.groups == self.cin == self.cout:
            return LayerConfig("depthwise", self.cin, self.cout, self.k, out_size, 1, self.groups)
        return LayerConfig("group", self.cin, self.cout, self.k, out_size, 1, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = self.add_param("gamma", np.ones(channels))
        self.beta = self.add_param("beta", np.zeros(channels))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels))
        self.running_var = self.add_buffer("running_var", np.ones(channels))

    def reset_parameters(self, rng: Rng) -> None:
        self.gamma.data[...] = 1.0
        self.beta.data[...] = 0.0
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0

    def forward(self, x: Tensor, train: bool) -> Tensor:
        return F.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             train, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, fin: int, fout: int):
        super().__init__()
        self.fin, self.fout = fin, fout
        self.weight = self.add_param("weight", np.zeros((fin, fout)))
        self.bias = self.add_param("bias", np.zeros(fout))

    def reset_parameters(self, rng: Rng) -> None:
        self.weight.data[...] = rng.normal(0.0, math.sqrt(1.0 / self.fin), self.weight.shape)
        self.bias.data[...] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Activation(Module):
    """ReLU at full precision, PACT clip + quantise below 32 bits."""

    def __init__(self, act_bits: int = FULL_PRECISION):
        super().__init__()
        self.act_bits = act_bits
        if act_bits != FULL_PRECISION:
            self.alpha = self.add_param("alpha", np.array([ALPHA_INIT]))

    def reset_parameters(self, rng: Rng) -> None:
        if self.act_bits != FULL_PRECISION:
            self.alpha.data[...] = ALPHA_INIT

    def forward(self, x: Tensor) -> Tensor:
        if self.act_bits == FULL_PRECISION:
            return relu(x)
        return pact(x, self.alpha, self.act_bits)


# blocks ------------------------------------------------------------------------

class Block(Module):
    """Base class; subclasses set ``in_shape``, ``out_shape`` and ``key``."""

    block_type = "block"
    weight_bits = FULL_PRECISION
    act_bits = FULL_PRECISION

    def __init__(self, in_shape: tuple):
        super().__init__()
        self.in_shape = tuple(int(v) for v in in_shape)
        self.out_shape = self.in_shape
        self.key: Optional[BlockKey] = None

    def forward(self, x: Tensor, train: bool = True) -> Tensor:
        raise NotImplementedError

    def layer_configs(self) -> list:
        return []

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.key})"


class SkipBlock(Block):
    """Identity; also the 0-bit "skip this block" precision choice."""

    block_type = "skip"
    weight_bits = 0
    act_bits = 0

    def __init__(self, in_shape: tuple, precision: Optional[tuple] = None):
        super().__init__(in_shape)
        self.key = BlockKey("skip", self.in_shape, self.in_shape[0], precision=precision)

    def forward(self, x: Tensor, train: bool = True) -> Tensor:
        return x


class ZeroBlock(Block):
    """Outputs zeros of the input's shape; a degenerate candidate for search tests."""

    block_type = "zero"

    def __init__(self, in_shape: tuple):
        super().__init__(in_shape)
        self.key = BlockKey("zero", self.in_shape, self.in_shape[0])

    def forward(self, x: Tensor, train: bool = True) -> Tensor:
        return Tensor(np.zeros(x.shape))


class ConvBNReLU(Block):
    """K x K conv -> BN -> ReLU; used for stems."""

    block_type = "conv"

    def __init__(self, in_shape: tuple, out_ch: int, k: int = 3, stride: int = 1):
        super().__init__(in_shape)
        c, h, w = self.in_shape
        self.conv = self.add_child("conv", Conv2d(c, out_ch, k, stride))
        self.bn = self.add_child("bn", BatchNorm2d(out_ch))
        self.out_shape = (out_ch, self.conv.out_size(h), self.conv.out_size(w))
        self.key = BlockKey("conv", self.in_shape, out_ch, stride, 1, k, 1)

    def forward(self, x, train=True):
        return relu(self.bn.forward(self.conv.forward(x), train))

    def layer_configs(self):
        return [self.conv.layer_config(self.out_shape[1])]


class MBConvBlock(Block):
    """1x1 (groups g) -> BN -> ReLU -> KxK depthwise -> BN -> ReLU -> 1x1 (groups g) -> BN.

    A channel shuffle follows each grouped 1x1 conv; the input is added back
    when stride is 1 and the channel count is unchanged.
    """

    block_type = "mbconv"

    def __init__(self, in_shape: tuple, out_ch: int, expansion: int = 1, kernel: int = 3,
                 groups: int = 1, stride: int = 1):
        super().__init__(in_shape)
        c, h, w = self.in_shape
        mid = int(c * expansion)
        if c % groups or mid % groups or out_ch % groups:
            raise ShapeError(f"mbconv: channels {c}->{mid}->{out_ch} not divisible by groups={groups}")
        self.groups, self.expansion, self.kernel, self.stride = groups, expansion, kernel, stride
        self.mid = mid
        self.pw1 = self.add_child("pw1", Conv2d(c, mid, 1, 1, groups))
        self.bn1 = self.add_child("bn1", BatchNorm2d(mid))
        self.dw = self.add_child("dw", Conv2d(mid, mid, kernel, stride, mid))
        self.bn2 = self.add_child("bn2", BatchNorm2d(mid))
        self.pw2 = self.add_child("pw2", Conv2d(mid, out_ch, 1, 1, groups))
        self.bn3 = self.add_child("bn3", BatchNorm2d(out_ch))
        self.out_shape = (out_ch, self.dw.out_size(h), self.dw.out_size(w))
        self.residual = stride == 1 and out_ch == c
        self.key = BlockKey("mbconv", self.in_shape, out_ch, stride, expansion, kernel, groups)

    def forward(self, x, train=True):
        h = self.pw1.forward(x)
        if self.groups > 1:
            h = F.channel_shuffle(h, self.groups)
        h = relu(self.bn1.forward(h, train))
        h = relu(self.bn2.forward(self.dw.forward(h), train))
        h = self.pw2.forward(h)
        if self.groups > 1:
            h = F.channel_shuffle(h, self.groups)
        h = self.bn3.forward(h, train)
        return add_same(h, x) if self.residual else h

    def layer_configs(self):
        _, h, _ = self.in_shape
        f = self.out_shape[1]
        return [self.pw1.layer_config(h), self.dw.layer_config(f), self.pw2.layer_config(f)]


class ShiftBlock(Block):
    """Conv-shift-conv: BN -> ReLU -> 1x1 -> BN -> ReLU -> shift(3) -> 1x1 (strided)."""

    block_type = "shift"

    def __init__(self, in_shape: tuple, out_ch: int, expansion: int = 1, stride: int = 1,
                 shift_kernel: int = 3):
        super().__init__(in_shape)
        c, h, w = self.in_shape
        mid = int(c * expansion)
        self.stride, self.expansion, self.shift_kernel = stride, expansion, shift_kernel
        self.bn0 = self.add_child("bn0", BatchNorm2d(c))
        self.pw1 = self.add_child("pw1", Conv2d(c, mid, 1))
        self.bn1 = self.add_child("bn1", BatchNorm2d(mid))
        self.pw2 = self.add_child("pw2", Conv2d(mid, out_ch, 1, stride))
        self.mid = mid
        self.out_shape = (out_ch, self.pw2.out_size(h), self.pw2.out_size(w))
        self.residual = stride == 1 and out_ch == c
        self.key = BlockKey("shift", self.in_shape, out_ch, stride, expansion, shift_kernel, 1)

    def forward(self, x, train=True):
        h = self.pw1.forward(relu(self.bn0.forward(x, train)))
        h = relu(self.bn1.forward(h, train))
        h = self.pw2.forward(F.shift(h, self.shift_kernel))
        return add_same(h, x) if self.residual else h

    def layer_configs(self):
        _, h, _ = self.in_shape
        return [self.pw1.layer_config(h),
                LayerConfig("shift", self.mid, self.mid, self.shift_kernel, h),
                self.pw2.layer_config(self.out_shape[1])]


class QuantBasicBlock(Block):
    """Residual basic block (two 3x3 convs) with one precision for the whole block.

    Weights use DoReFa at ``weight_bits``; below 32 activation bits the ReLUs
    become PACT clip + quantise. A 1x1 projection shortcut (same precision)
    is used when the shape changes.
    """

    block_type = "basic"

    def __init__(self, in_shape: tuple, out_ch: int, stride: int = 1,
                 weight_bits: int = FULL_PRECISION, act_bits: int = FULL_PRECISION):
        super().__init__(in_shape)
        c, h, w = self.in_shape
        self.weight_bits, self.act_bits, self.stride = weight_bits, act_bits, stride
        self.conv1 = self.add_child("conv1", Conv2d(c, out_ch, 3, stride, weight_bits=weight_bits))
        self.bn1 = self.add_child("bn1", BatchNorm2d(out_ch))
        self.act1 = self.add_child("act1", Activation(act_bits))
        self.conv2 = self.add_child("conv2", Conv2d(out_ch, out_ch, 3, 1, weight_bits=weight_bits))
        self.bn2 = self.add_child("bn2", BatchNorm2d(out_ch))
        self.act2 = self.add_child("act2", Activation(act_bits))
        self.out_shape = (out_ch, self.conv1.out_size(h), self.conv1.out_size(w))
        self.projection = stride != 1 or out_ch != c
        if self.projection:
            self.proj = self.add_child("proj", Conv2d(c, out_ch, 1, stride, weight_bits=weight_bits))
            self.proj_bn = self.add_child("proj_bn", BatchNorm2d(out_ch))
        self.key = BlockKey("basic", self.in_shape, out_ch, stride, 1, 3, 1, (weight_bits, act_bits))

    def forward(self, x, train=True):
        h = self.act1.forward(self.bn1.forward(self.conv1.forward(x), train))
        h = self.bn2.forward(self.conv2.forward(h), train)
        sc = self.proj_bn.forward(self.proj.forward(x), train) if self.projection else x
        return self.act2.forward(add_same(h, sc))

    def layer_configs(self):
        f = self.out_shape[1]
        rows = [self.conv1.layer_config(f), self.conv2.layer_config(f)]
        if self.projection:
            rows.append(self.proj.layer_config(f))
        return rows


class Head(Block):
    """Optional 1x1 conv -> BN -> ReLU, then global average pooling or flatten, then fc."""

    block_type = "head"

    def __init__(self, in_shape: tuple, num_classes: int, conv_channels: Optional[int] = None,
                 pool: str = "avg"):
        super().__init__(in_shape)
        if pool not in ("avg", "flatten"):
            raise ValueError(f"pool must be 'avg' or 'flatten', got {pool!r}")
        c, h, w = self.in_shape
        self.pool = pool
        self.conv_channels = conv_channels
        if conv_channels:
            self.conv = self.add_child("conv", Conv2d(c, conv_channels, 1))
            self.bn = self.add_child("bn", BatchNorm2d(conv_channels))
            c = conv_channels
        self.feat_ch = c
        features = c if pool == "avg" else c * h * w
        self.fc = self.add_child("fc", Linear(features, num_classes))
        self.out_shape = (num_classes,)
        kind = f"head_{pool}" + (f"_c{conv_channels}" if conv_channels else "")
        self.key = BlockKey(kind, self.in_shape, num_classes)

    def forward(self, x, train=True):
        if self.conv_channels:
            x = relu(self.bn.forward(self.conv.forward(x), train))
        if self.pool == "avg":
            x = F.global_avgpool(x)
        else:
            x = reshape(x, (x.shape[0], -1))
        return self.fc.forward(x)

    def layer_configs(self):
        _, h, w = self.in_shape
        rows = []
        if self.conv_channels:
            rows.append(self.conv.layer_config(h))
        if self.pool == "avg":
            rows.append(LayerConfig("avgpool", self.feat_ch, self.feat_ch, h, 1))
        rows.append(LayerConfig("fc", self.fc.fin, self.fc.fout))
        return rows
