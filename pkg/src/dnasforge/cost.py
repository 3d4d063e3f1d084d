"""Analytic layer costs, latency lookup tables and differentiable cost terms.

MACs and FLOPs are the same quantity here; reports label them ``macs``.
"""
from __future__ import annotations

import json
import math
import types
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import DomainError, LUTFormatError, MissingKeyError
from .tensor import Tensor, as_tensor

VARIANTS = ("spatial", "spatially_separable", "pointwise", "group", "depthwise",
            "shift", "maxpool", "avgpool", "fc")
_ZERO_COST = ("shift", "maxpool", "avgpool")


@dataclass(frozen=True)
class LayerConfig:
    """Shape of one layer for cost accounting.

    ``F`` is the output spatial size, ``G`` the group count. For ``fc``
    layers ``M``/``N`` are the input/output features and ``F`` is 1.
    """

    variant: str
    M: int
    N: int
    K: int = 1
    F: int = 1
    B: int = 1
    G: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown layer variant {self.variant!r}")
        for name in ("M", "N", "K", "F", "B", "G"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"LayerConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.variant == "pointwise" and self.K != 1:
            raise ValueError("pointwise layers have K = 1")
        if self.variant == "depthwise" and not (self.N == self.M and self.G == self.M):
            raise ValueError("depthwise layers need N = M and G = M")
        if self.variant == "group" and (self.M % self.G or self.N % self.G):
            raise ValueError(f"group conv channels ({self.M}, {self.N}) not divisible by G={self.G}")


def params_of(layer: LayerConfig) -> int:
    v, M, N, K, G = layer.variant, layer.M, layer.N, layer.K, layer.G
    if v == "spatial":
        return M * N * K * K
    if v == "spatially_separable":
        return M * N * K
    if v in ("pointwise", "fc"):
        return M * N
    if v == "group":
        return M * N * K * K // G
    if v == "depthwise":
        return M * K * K
    return 0


def macs_of(layer: LayerConfig) -> int:
    if layer.variant in _ZERO_COST:
        return 0
    if layer.variant == "fc":
        return layer.B * layer.M * layer.N
    return layer.B * layer.F * layer.F * params_of(layer)


def activation_elems(layer: LayerConfig) -> int:
    return layer.B * (layer.M + layer.N) * layer.F * layer.F


def arithmetic_intensity(layer: LayerConfig) -> float:
    macs = macs_of(layer)
    if macs == 0:
        return 0.0
    return macs / (params_of(layer) + activation_elems(layer))


def table_2_2() -> list:
    """The ten reference configurations: five variants at an early and a late layer.

    Early: M = N = 32, F = 112, K = 3. Late: M = N = 512, F = 7, K = 3.
    B = 1 and the group variant uses G = 4.
    """
    rows = []
    for pos, (c, f) in (("early", (32, 112)), ("late", (512, 7))):
        rows += [
            ("spatial", pos, LayerConfig("spatial", c, c, 3, f)),
            ("spatially_separable", pos, LayerConfig("spatially_separable", c, c, 3, f)),
            ("pointwise", pos, LayerConfig("pointwise", c, c, 1, f)),
            ("group", pos, LayerConfig("group", c, c, 3, f, 1, 4)),
            ("depthwise", pos, LayerConfig("depthwise", c, c, 3, f, 1, c)),
        ]
    order = {v: i for i, v in enumerate(VARIANTS)}
    return sorted(rows, key=lambda r: (order[r[0]], r[1] != "early"))


# block keys and latency tables ------------------------------------------------

@dataclass(frozen=True)
class BlockKey:
    block_type: str
    in_shape: tuple
    out_channels: int
    stride: int = 1
    expansion: float = 1
    kernel: int = 1
    groups: int = 1
    precision: Optional[tuple] = None

    def __str__(self) -> str:
        c, h, w = self.in_shape
        s = (f"{self.block_type}|in={c}x{h}x{w}|out={self.out_channels}|s={self.stride}"
             f"|e={self.expansion:g}|k={self.kernel}|g={self.groups}")
        if self.precision is not None:
            s += f"|p={self.precision[0]}x{self.precision[1]}"
        return s


KeyLike = Union[BlockKey, str]


class LatencyTable:
    """Immutable map from canonical block-key strings to latency in microseconds."""

    def __init__(self, entries: Mapping[KeyLike, float], device: str = "synthetic", note: str = ""):
        clean = {}
        for k, v in entries.items():
            v = float(v)
            if not (math.isfinite(v) and v > 0):
                raise LUTFormatError(f"latency for {k} must be a positive finite number, got {v}")
            clean[str(k)] = v
        self._entries = types.MappingProxyType(dict(sorted(clean.items())))
        self.device = device
        self.note = note

    @property
    def entries(self) -> Mapping[str, float]:
        return self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key) -> bool:
        return str(key) in self._entries

    def __getitem__(self, key: KeyLike) -> float:
        try:
            return self._entries[str(key)]
        except KeyError:
            raise MissingKeyError(f"no latency entry for block {key}") from None

    def __eq__(self, other) -> bool:
        return isinstance(other, LatencyTable) and dict(self._entries) == dict(other._entries) \
            and self.device == other.device

    def missing(self, keys: Iterable[KeyLike]) -> list:
        """Keys of ``keys`` that have no entry, sorted."""
        return sorted({str(k) for k in keys if str(k) not in self._entries})

    def covers(self, keys: Iterable[KeyLike]) -> bool:
        return not self.missing(keys)

    def scaled(self, factors: Mapping[KeyLike, float], note: str = "") -> "LatencyTable":
        """Copy with selected entries multiplied by the given factors."""
        new = dict(self._entries)
        for k, f in factors.items():
            new[str(k)] = self[k] * f
        return LatencyTable(new, self.device, note or self.note)

    def to_json(self) -> str:
        doc = {"device": self.device,
               "entries": [{"key": k, "latency_us": v} for k, v in self._entries.items()]}
        if self.note:
            doc["note"] = self.note
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "LatencyTable":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise LUTFormatError(f"LUT is not valid JSON: {exc}") from None
        if not isinstance(doc, dict) or not isinstance(doc.get("device"), str) \
                or not isinstance(doc.get("entries"), list):
            raise LUTFormatError('LUT must be an object with "device" (string) and "entries" (list)')
        entries = {}
        for i, e in enumerate(doc["entries"]):
            if not isinstance(e, dict) or not isinstance(e.get("key"), str) \
                    or not isinstance(e.get("latency_us"), (int, float)) or isinstance(e.get("latency_us"), bool):
                raise LUTFormatError(f"LUT entry {i} must have a string key and numeric latency_us")
            if e["key"] in entries:
                raise LUTFormatError(f"duplicate LUT key {e['key']!r}")
            entries[e["key"]] = e["latency_us"]
        return cls(entries, doc["device"], doc.get("note", ""))

    @classmethod
    def load(cls, path) -> "LatencyTable":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def block_latency_model(layers: Sequence[LayerConfig], model: str = "analytic_macs") -> float:
    """Synthetic latency of a block made of ``layers``, with a 1 us floor."""
    macs = sum(macs_of(lc) for lc in layers)
    lat = macs / 1e6 + 1.0
    if model == "macs_plus_memory":
        lat += sum(params_of(lc) + activation_elems(lc) for lc in layers) / 1e5
    elif model != "analytic_macs":
        raise ValueError(f"unknown latency model {model!r}")
    return lat


def synth_lut(space, model: str = "analytic_macs", device: str = "") -> LatencyTable:
    """Synthetic latency table covering every block a supernet can instantiate."""
    entries = {}
    for block in space.all_blocks():
        entries[str(block.key)] = block_latency_model(block.layer_configs(), model)
    return LatencyTable(entries, device or f"synthetic-{model}",
                        note=f"synth_lut model={model}")


# latency and cost terms -------------------------------------------------------

def _fsum(parts: Sequence[Tensor]) -> Tensor:
    """Correctly rounded (hence order independent) sum of scalar tensors."""
    parts = [as_tensor(p) for p in parts]
    total = math.fsum(float(p.data) for p in parts)
    return Tensor._make(np.asarray(total), parts, lambda g: tuple(g for _ in parts), "fsum")


def _check_simplex(masks) -> None:
    for l, m in enumerate(masks):
        d = np.asarray(as_tensor(m).data)
        if d.ndim != 1 or (d < 0).any() or abs(d.sum() - 1.0) > 1e-6:
            raise DomainError(f"mask of layer {l} is not a probability vector: {d}")


def mask_weighted_cost(masks: Sequence, coeffs: Sequence[Sequence[float]], constant: float = 0.0) -> Tensor:
    """``constant + sum_l sum_i m[l][i] * coeffs[l][i]``; differentiable in the masks."""
    if len(masks) != len(coeffs):
        raise ValueError(f"{len(masks)} masks for {len(coeffs)} layers")
    parts = [Tensor(constant)]
    for m, c in zip(masks, coeffs):
        m = as_tensor(m)
        c = np.asarray(c, dtype=np.float64)
        if m.shape != c.shape:
            raise ValueError(f"mask shape {m.shape} does not match {c.shape} coefficients")
        parts.append((m * c).sum())
    return _fsum(parts)


def net_latency(arch, table: LatencyTable) -> float:
    """Sum of table latencies over the fixed and selected blocks of ``arch``."""
    return math.fsum([table[k] for k in arch.fixed_keys] + [table[k] for k in arch.keys])


def expected_latency(masks: Sequence, keys: Sequence[Sequence[KeyLike]], table: LatencyTable,
                     fixed_keys: Sequence[KeyLike] = ()) -> Tensor:
    """Mask-weighted latency; with one-hot masks this equals ``net_latency`` exactly."""
    _check_simplex(masks)
    coeffs = [[table[k] for k in layer] for layer in keys]
    fixed = math.fsum(table[k] for k in fixed_keys)
    return mask_weighted_cost(masks, coeffs, fixed)


def _block_params(block) -> int:
    return sum(params_of(lc) for lc in block.layer_configs())


def _block_macs(block) -> int:
    return sum(macs_of(lc) for lc in block.layer_configs())


def size_coefficients(space) -> list:
    """Per-candidate ``#params x weight bits`` (0 for a skipped block)."""
    return [[float(_block_params(b) * b.weight_bits) for b in layer.candidates]
            for layer in space.search_layers]


def flop_coefficients(space) -> list:
    """Per-candidate ``#MACs x weight bits x activation bits``."""
    return [[float(_block_macs(b) * b.weight_bits * b.act_bits) for b in layer.candidates]
            for layer in space.search_layers]


def quant_size_cost(masks: Sequence, space) -> Tensor:
    """Model size in bits of the searchable blocks, weighted by the masks."""
    return mask_weighted_cost(masks, size_coefficients(space))


def quant_flop_cost(masks: Sequence, space) -> Tensor:
    """Bit-weighted MAC count of the searchable blocks, weighted by the masks."""
    return mask_weighted_cost(masks, flop_coefficients(space))


def cost_weighting(cost, beta: float, gamma: float):
    """``beta * ln(cost) ** gamma``; ``cost`` may be a float or a scalar tensor."""
    if beta <= 0 or gamma < 0:
        raise DomainError(f"cost_weighting needs beta > 0 and gamma >= 0, got {beta}, {gamma}")
    value = float(as_tensor(cost).data) if isinstance(cost, Tensor) else float(cost)
    if not value > 1.0:
        raise DomainError(f"cost must exceed 1 for a positive log, got {value}")
    if isinstance(cost, Tensor):
        return (cost.log() ** gamma) * beta
    return beta * math.log(value) ** gamma


def calibrate_beta(initial_cost: float, gamma: float) -> float:
    """Coefficient that makes ``cost_weighting(initial_cost, beta, gamma) == 1``."""
    if not initial_cost > 1.0:
        raise DomainError(f"initial cost must exceed 1, got {initial_cost}")
    return math.log(initial_cost) ** (-gamma)


# reports ------------------------------------------------------------------------

def _sig6(x: float) -> float:
    return float(f"{x:.6g}")


def layer_row(name: str, lc: LayerConfig) -> dict:
    return {"name": name, "variant": lc.variant, "M": lc.M, "N": lc.N, "K": lc.K, "F": lc.F,
            "B": lc.B, "G": lc.G, "params": params_of(lc), "macs": macs_of(lc),
            "activation_elems": activation_elems(lc),
            "arithmetic_intensity": _sig6(arithmetic_intensity(lc))}


@dataclass
class CostReport:
    rows: list = field(default_factory=list)
    totals: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "totals": self.totals}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def format(self) -> str:
        has_lat = any("latency_us" in r for r in self.rows)
        head = f"{'name':<40} {'params':>12} {'macs':>14} {'acts':>12} {'AI':>10}"
        if has_lat:
            head += f" {'lat_us':>12}"
        lines = [head]
        for r in self.rows + [dict(self.totals, name="TOTAL")]:
            line = (f"{r['name'][:40]:<40} {r['params']:>12,} {r['macs']:>14,} "
                    f"{r['activation_elems']:>12,} {r['arithmetic_intensity']:>10.6g}")
            if has_lat:
                line += f" {r.get('latency_us', float('nan')):>12.6g}"
            lines.append(line)
        return "\n".join(lines)


def _totals(rows) -> dict:
    params = sum(r["params"] for r in rows)
    macs = sum(r["macs"] for r in rows)
    acts = sum(r["activation_elems"] for r in rows)
    tot = {"params": params, "macs": macs, "activation_elems": acts,
           "arithmetic_intensity": _sig6(macs / (params + acts)) if macs else 0.0}
    if rows and all("latency_us" in r for r in rows):
        tot["latency_us"] = math.fsum(r["latency_us"] for r in rows)
    return tot


def table_2_2_report() -> CostReport:
    rows = [layer_row(f"{v}/{pos}", lc) for v, pos, lc in table_2_2()]
    return CostReport(rows, _totals(rows))


def block_report(named_blocks: Sequence[tuple], table: Optional[LatencyTable] = None) -> CostReport:
    """One row per (name, block), each with its per-layer breakdown under ``layers``."""
    rows = []
    for name, block in named_blocks:
        layers = [layer_row(f"{name}.{i}", lc) for i, lc in enumerate(block.layer_configs())]
        row = {"name": name, "key": str(block.key)}
        row.update({k: v for k, v in _totals(layers).items() if k != "latency_us"})
        if not layers:
            row.update(params=0, macs=0, activation_elems=0, arithmetic_intensity=0.0)
        row["layers"] = layers
        if table is not None:
            row["latency_us"] = table[block.key]
        rows.append(row)
    return CostReport(rows, _totals(rows))
