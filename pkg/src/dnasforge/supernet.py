"""Stochastic supernet: candidate blocks per layer, architecture logits, soft and hard execution."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .blocks import Block, Head
from .cost import LatencyTable, expected_latency, net_latency
from .errors import DomainError, ShapeError
from .rng import Rng
from .tensor import Tensor, as_tensor, getitem, parameter, softmax


def theta_probs(theta) -> np.ndarray:
    """Softmax of a logit vector (max-subtracted)."""
    t = np.asarray(as_tensor(theta).data, dtype=np.float64)
    e = np.exp(t - t.max())
    return e / e.sum()


def gumbel_soft_mask(theta: Tensor, tau: float, rng: Optional[Rng] = None,
                     noise: Optional[np.ndarray] = None) -> Tensor:
    """``softmax((theta + g) / tau)`` with fresh Gumbel(0, 1) noise ``g``.

    Differentiable in ``theta``; the noise is a constant. Pass ``noise`` to
    pin ``g`` (tests).
    """
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    theta = as_tensor(theta)
    if noise is None:
        noise = rng.gumbel(theta.shape)
    return softmax((theta + np.asarray(noise, dtype=np.float64)) * (1.0 / tau))


def gumbel_soft_mask_batch(theta: np.ndarray, tau: float, noise: np.ndarray) -> np.ndarray:
    """Row-wise ``softmax((theta + noise) / tau)`` for a (draws, K) noise array, no graph."""
    z = (np.asarray(theta)[None, :] + noise) / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class FixedLayer:
    name: str
    block: Block


@dataclass
class SearchLayer:
    name: str
    candidates: list
    theta: Tensor = None

    def __post_init__(self):
        if len(self.candidates) < 2:
            raise ValueError(f"search layer {self.name} needs at least two candidates")
        if self.theta is None:
            self.theta = parameter(np.zeros(len(self.candidates)))
        if self.theta.shape != (len(self.candidates),):
            raise ValueError(f"theta of {self.name} has shape {self.theta.shape}, "
                             f"expected ({len(self.candidates)},)")


@dataclass
class ArchitectureSample:
    """One concrete choice per searchable layer.

    ``fixed_keys`` lists the non-searchable blocks so latency totals include them.
    """

    indices: list
    keys: list
    fixed_keys: list = field(default_factory=list)
    theta_snapshot: str = ""
    seed: Optional[int] = None

    @property
    def signature(self) -> tuple:
        return tuple(self.keys)

    def to_dict(self) -> dict:
        return {"layers": [{"index": int(i), "key": k} for i, k in zip(self.indices, self.keys)],
                "fixed_keys": list(self.fixed_keys),
                "theta_snapshot": self.theta_snapshot,
                "seed": self.seed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "ArchitectureSample":
        layers = doc["layers"]
        return cls([int(l["index"]) for l in layers], [str(l["key"]) for l in layers],
                   list(doc.get("fixed_keys", [])), doc.get("theta_snapshot", ""), doc.get("seed"))

    @classmethod
    def from_json(cls, text: str) -> "ArchitectureSample":
        return cls.from_dict(json.loads(text))


class SuperNet:
    """Chain of fixed and searchable layers followed by a classifier head."""

    def __init__(self, layers: Sequence, head: Head, in_shape: tuple, name: str = "supernet",
                 rng: Optional[Rng] = None):
        self.layers = list(layers)
        self.head = head
        self.in_shape = tuple(in_shape)
        self.name = name
        self.check_shapes()
        self.reset_parameters(rng or Rng(0))

    # structure ----------------------------------------------------------------

    @property
    def search_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, SearchLayer)]

    @property
    def fixed_blocks(self) -> list:
        return [l.block for l in self.layers if isinstance(l, FixedLayer)] + [self.head]

    @property
    def fixed_keys(self) -> list:
        return [str(b.key) for b in self.fixed_blocks]

    def candidate_keys(self) -> list:
        return [[str(c.key) for c in l.candidates] for l in self.search_layers]

    def all_blocks(self) -> list:
        out = []
        for l in self.layers:
            out.extend(l.candidates if isinstance(l, SearchLayer) else [l.block])
        out.append(self.head)
        return out

    def named_blocks(self) -> list:
        out = []
        for l in self.layers:
            if isinstance(l, SearchLayer):
                out.extend((f"{l.name}/{i}", c) for i, c in enumerate(l.candidates))
            else:
                out.append((l.name, l.block))
        out.append(("head", self.head))
        return out

    def space_size(self) -> int:
        return math.prod(len(l.candidates) for l in self.search_layers)

    def check_shapes(self) -> None:
        """Symbolic shape propagation; every candidate of a layer must agree."""
        shape = self.in_shape
        for l in self.layers:
            blocks = l.candidates if isinstance(l, SearchLayer) else [l.block]
            for b in blocks:
                if b.in_shape != shape:
                    raise ShapeError(f"{l.name}: block {b.key} expects input {b.in_shape}, got {shape}")
            outs = {b.out_shape for b in blocks}
            if len(outs) != 1:
                raise ShapeError(f"{l.name}: candidates disagree on output shape {sorted(outs)}")
            shape = outs.pop()
        if self.head.in_shape != shape:
            raise ShapeError(f"head expects {self.head.in_shape}, got {shape}")

    # parameters -----------------------------------------------------------------

    def thetas(self) -> list:
        return [l.theta for l in self.search_layers]

    def named_weights(self) -> list:
        out = []
        for name, b in self.named_blocks():
            out.extend(b.named_parameters(f"{name}."))
        return out

    def weights(self) -> list:
        return [p for _, p in self.named_weights()]

    def named_buffers(self) -> list:
        out = []
        for name, b in self.named_blocks():
            out.extend(b.named_buffers(f"{name}."))
        return out

    def reset_parameters(self, rng: Rng) -> None:
        for _, b in self.named_blocks():
            b.reset_parameters(rng)

    def reset_theta(self) -> None:
        for t in self.thetas():
            t.data[...] = 0.0
            t.grad = None

    def state_dict(self) -> dict:
        out = {n: p.data.copy() for n, p in self.named_weights()}
        out.update({n: b.copy() for n, b in self.named_buffers()})
        out.update({f"{l.name}.theta": l.theta.data.copy() for l in self.search_layers})
        return out

    def load_state_dict(self, state: dict) -> None:
        for n, p in self.named_weights():
            p.data[...] = state[n]
        for n, b in self.named_buffers():
            b[...] = state[n]
        for l in self.search_layers:
            l.theta.data[...] = state[f"{l.name}.theta"]

    def theta_snapshot(self) -> str:
        h = hashlib.sha256()
        for t in self.thetas():
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()[:16]

    # execution ---------------------------------------------------------------------

    def _check_input(self, x: Tensor) -> None:
        if tuple(x.shape[1:]) != self.in_shape:
            raise ShapeError(f"input shape {x.shape[1:]} does not match supernet input {self.in_shape}")

    def forward_soft(self, x, tau: float, rng: Optional[Rng] = None, train: bool = True,
                     masks: Optional[Sequence] = None) -> tuple:
        """Run every candidate; each layer outputs the mask-weighted sum.

        Masks are drawn with ``gumbel_soft_mask`` unless given. Returns
        ``(logits, masks)`` so the same masks can weight the cost terms.
        """
        x = as_tensor(x)
        self._check_input(x)
        slayers = self.search_layers
        if masks is None:
            masks = [gumbel_soft_mask(l.theta, tau, rng) for l in slayers]
        else:
            masks = [as_tensor(m) for m in masks]
            if len(masks) != len(slayers):
                raise ValueError(f"{len(masks)} masks for {len(slayers)} searchable layers")
        it = iter(masks)
        for l in self.layers:
            if isinstance(l, FixedLayer):
                x = l.block.forward(x, train)
                continue
            m = next(it)
            y = None
            for i, c in enumerate(l.candidates):
                term = c.forward(x, train) * getitem(m, i)
                y = term if y is None else y + term
            x = y
        return self.head.forward(x, train), masks

    def forward_hard(self, arch: ArchitectureSample, x, train: bool = True) -> Tensor:
        """Run only the selected candidate of each searchable layer."""
        x = as_tensor(x)
        self._check_input(x)
        slayers = self.search_layers
        if len(arch.indices) != len(slayers):
            raise ValueError(f"architecture has {len(arch.indices)} choices for {len(slayers)} layers")
        it = iter(arch.indices)
        for l in self.layers:
            if isinstance(l, FixedLayer):
                x = l.block.forward(x, train)
                continue
            i = int(next(it))
            if not 0 <= i < len(l.candidates):
                raise IndexError(f"{l.name}: candidate index {i} out of range 0..{len(l.candidates) - 1}")
            x = l.candidates[i].forward(x, train)
        return self.head.forward(x, train)

    def active_blocks(self, arch: ArchitectureSample) -> list:
        blocks = []
        it = iter(arch.indices)
        for l in self.layers:
            blocks.append(l.block if isinstance(l, FixedLayer) else l.candidates[int(next(it))])
        blocks.append(self.head)
        return blocks

    # architectures ---------------------------------------------------------------

    def arch_from_indices(self, indices: Sequence[int], seed: Optional[int] = None) -> ArchitectureSample:
        slayers = self.search_layers
        if len(indices) != len(slayers):
            raise ValueError(f"{len(indices)} choices for {len(slayers)} searchable layers")
        keys = []
        for l, i in zip(slayers, indices):
            if not 0 <= int(i) < len(l.candidates):
                raise IndexError(f"{l.name}: candidate index {i} out of range")
            keys.append(str(l.candidates[int(i)].key))
        return ArchitectureSample([int(i) for i in indices], keys, self.fixed_keys,
                                  self.theta_snapshot(), seed)

    def sample_arch(self, rng: Rng) -> ArchitectureSample:
        """Draw one index per layer from softmax(theta) via Gumbel-argmax."""
        idx = [int(np.argmax(l.theta.data + rng.gumbel(l.theta.shape))) for l in self.search_layers]
        return self.arch_from_indices(idx, rng.seed)

    def argmax_arch(self) -> ArchitectureSample:
        """Highest-logit candidate per layer; ties go to the lowest index."""
        return self.arch_from_indices([int(np.argmax(l.theta.data)) for l in self.search_layers])

    def one_hot_masks(self, arch: ArchitectureSample) -> list:
        out = []
        for l, i in zip(self.search_layers, arch.indices):
            m = np.zeros(len(l.candidates))
            m[i] = 1.0
            out.append(Tensor(m))
        return out

    def prob_masks(self) -> list:
        return [Tensor(theta_probs(l.theta)) for l in self.search_layers]

    # latency helpers ------------------------------------------------------------------

    def expected_latency(self, masks: Sequence, table: LatencyTable) -> Tensor:
        return expected_latency(masks, self.candidate_keys(), table, self.fixed_keys)

    def net_latency(self, arch: ArchitectureSample, table: LatencyTable) -> float:
        return net_latency(arch, table)


def forward_soft(net: SuperNet, x, tau: float, rng: Rng, train: bool = True, masks=None):
    return net.forward_soft(x, tau, rng, train, masks)


def forward_hard(net: SuperNet, arch: ArchitectureSample, x, train: bool = True) -> Tensor:
    return net.forward_hard(arch, x, train)


def sample_arch(net: SuperNet, rng: Rng) -> ArchitectureSample:
    return net.sample_arch(rng)


def argmax_arch(net: SuperNet) -> ArchitectureSample:
    return net.argmax_arch()
