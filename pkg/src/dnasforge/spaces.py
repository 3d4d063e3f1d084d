"""Search-space builders: FBNet-style layer-wise spaces and mixed-precision spaces.

A space definition file is a JSON document with ``"schema": 1`` and a
``"kind"`` of ``fbnet``, ``mixed_precision`` or ``backbone``; see
``space_from_dict`` for the fields of each kind.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from .blocks import (ConvBNReLU, Head, MBConvBlock, QuantBasicBlock, ShiftBlock, SkipBlock,
                     ZeroBlock)
from .errors import ConfigError, ShapeError
from .quant import FULL_PRECISION
from .rng import Rng
from .supernet import FixedLayer, SearchLayer, SuperNet

SPACE_SCHEMA = 1


@dataclass(frozen=True)
class MicroBlockSpec:
    """One candidate block type. ``kind`` is mbconv, shift, skip or zero."""

    name: str
    expansion: int = 1
    kernel: int = 3
    groups: int = 1
    kind: str = "mbconv"

    @property
    def is_skip(self) -> bool:
        return self.kind == "skip"


FBNET_MICRO = (
    MicroBlockSpec("k3_e1", 1, 3, 1),
    MicroBlockSpec("k3_e1_g2", 1, 3, 2),
    MicroBlockSpec("k3_e3", 3, 3, 1),
    MicroBlockSpec("k3_e6", 6, 3, 1),
    MicroBlockSpec("k5_e1", 1, 5, 1),
    MicroBlockSpec("k5_e1_g2", 1, 5, 2),
    MicroBlockSpec("k5_e3", 3, 5, 1),
    MicroBlockSpec("k5_e6", 6, 5, 1),
    MicroBlockSpec("skip", kind="skip"),
)
MICRO_BY_NAME = {m.name: m for m in FBNET_MICRO}
MICRO_BY_NAME["shift_e1"] = MicroBlockSpec("shift_e1", 1, 3, 1, "shift")
MICRO_BY_NAME["shift_e3"] = MicroBlockSpec("shift_e3", 3, 3, 1, "shift")
MICRO_BY_NAME["zero"] = MicroBlockSpec("zero", kind="zero")

DESK_MICRO = (MICRO_BY_NAME["k3_e1"], MICRO_BY_NAME["k5_e1"], MICRO_BY_NAME["k3_e3"])


@dataclass(frozen=True)
class MacroRow:
    """``block`` is ``conv3x3``, ``TBS`` (to be searched), ``conv1x1``, ``avgpool``, ``flatten`` or ``fc``."""

    block: str
    f: Optional[int] = None
    n: int = 1
    s: int = 1


@dataclass(frozen=True)
class MacroSpec:
    rows: tuple
    input_shape: tuple  # (C, H, W)

    def __post_init__(self):
        for r in self.rows:
            if r.s not in (1, 2):
                raise ValueError(f"stride must be 1 or 2, got {r.s}")
            if r.block not in ("conv3x3", "TBS", "conv1x1", "avgpool", "flatten", "fc"):
                raise ValueError(f"unknown macro block {r.block!r}")


FBNET_MACRO = MacroSpec((
    MacroRow("conv3x3", 16, 1, 2),
    MacroRow("TBS", 16, 1, 1),
    MacroRow("TBS", 24, 4, 2),
    MacroRow("TBS", 32, 4, 2),
    MacroRow("TBS", 64, 4, 2),
    MacroRow("TBS", 112, 4, 1),
    MacroRow("TBS", 184, 4, 2),
    MacroRow("TBS", 352, 1, 1),
    MacroRow("conv1x1", 1504, 1, 1),
    MacroRow("avgpool"),
    MacroRow("fc", 1000),
), (3, 224, 224))

# Channel widths are arbitrary desk-scale choices.
DESK_MACRO = MacroSpec((
    MacroRow("conv3x3", 8, 1, 2),
    MacroRow("TBS", 16, 2, 1),
    MacroRow("TBS", 24, 2, 2),
    MacroRow("TBS", 32, 2, 2),
    MacroRow("conv1x1", 64, 1, 1),
    MacroRow("avgpool"),
    MacroRow("fc", 10),
), (3, 32, 32))


def build_block(spec: MicroBlockSpec, in_shape: tuple, out_ch: int, stride: int = 1):
    """Instantiate one candidate block."""
    if spec.kind in ("skip", "zero"):
        if stride != 1 or out_ch != in_shape[0]:
            raise ShapeError(f"{spec.name} needs stride 1 and unchanged channels, "
                             f"got {in_shape[0]}->{out_ch}, stride {stride}")
        return SkipBlock(in_shape) if spec.kind == "skip" else ZeroBlock(in_shape)
    if spec.kind == "shift":
        return build_shift_block(in_shape, out_ch, stride, spec.expansion)
    if spec.kind != "mbconv":
        raise ValueError(f"unknown block kind {spec.kind!r}")
    return MBConvBlock(in_shape, out_ch, spec.expansion, spec.kernel, spec.groups, stride)


def build_shift_block(in_shape: tuple, out_ch: int, stride: int = 1, expansion: int = 1):
    return ShiftBlock(in_shape, out_ch, expansion, stride)


def scale_channels(f: int, width_scale: float, multiple: int = 1) -> int:
    c = max(1, math.ceil(f * width_scale - 1e-9))
    return int(math.ceil(c / multiple) * multiple)


def fbnet_space(macro: MacroSpec = DESK_MACRO, micro: Sequence[MicroBlockSpec] = DESK_MICRO,
                width_scale: float = 1.0, input_res: Optional[int] = None,
                rng: Optional[Rng] = None, name: str = "fbnet") -> SuperNet:
    """Layer-wise supernet: fixed stem and head, every TBS repeat is a searchable layer.

    Skip-like candidates are dropped on layers that change stride or width.
    Channel counts are scaled by ``width_scale`` and rounded up to a multiple
    of the largest group count among the candidates.
    """
    c, h, w = macro.input_shape
    if input_res:
        h = w = int(input_res)
    shape = (c, h, w)
    mult = max([m.groups for m in micro] + [1])
    layers, head, tail = [], None, []
    stage = 0
    for row in macro.rows:
        if row.block == "conv3x3":
            blk = ConvBNReLU(shape, scale_channels(row.f, width_scale, mult), 3, row.s)
            layers.append(FixedLayer(f"stem{len(layers)}", blk))
            shape = blk.out_shape
        elif row.block == "TBS":
            stage += 1
            out = scale_channels(row.f, width_scale, mult)
            for r in range(row.n):
                stride = row.s if r == 0 else 1
                cands = [build_block(m, shape, out, stride) for m in micro
                         if not (m.kind in ("skip", "zero") and (stride != 1 or out != shape[0]))]
                lname = f"s{stage}_l{r}"
                if len(cands) == 1:
                    layers.append(FixedLayer(lname, cands[0]))
                else:
                    layers.append(SearchLayer(lname, cands))
                shape = cands[0].out_shape
        else:
            tail.append(row)
    conv_ch = None
    pool = "avg"
    classes = None
    for row in tail:
        if row.block == "conv1x1":
            conv_ch = scale_channels(row.f, width_scale, 1)
        elif row.block == "flatten":
            pool = "flatten"
        elif row.block == "fc":
            classes = row.f
    if classes is None:
        raise ValueError("macro spec needs an fc row")
    head = Head(shape, classes, conv_ch, pool)
    return SuperNet(layers, head, (c, h, w), name, rng)


def toy_space(candidates: Sequence[str] = ("k3_e1", "skip", "zero"), layers: int = 3,
              channels: int = 8, in_shape: tuple = (1, 8, 8), num_classes: int = 4,
              rng: Optional[Rng] = None) -> SuperNet:
    """Small chain for brute-force comparisons: stem, ``layers`` searchable layers, flatten + fc."""
    macro = MacroSpec((MacroRow("conv3x3", channels, 1, 1), MacroRow("TBS", channels, layers, 1),
                       MacroRow("flatten"), MacroRow("fc", num_classes)), tuple(in_shape))
    return fbnet_space(macro, [MICRO_BY_NAME[c] for c in candidates], rng=rng, name="toy")


# mixed precision -------------------------------------------------------------------

@dataclass(frozen=True)
class PrecisionSpec:
    """Per-block precision choices.

    ``weight`` mode: ``choices`` are weight bit widths (0 = skip the block).
    ``joint`` mode: ``choices`` are (weight, activation) pairs.
    """

    choices: tuple
    mode: str = "weight"

    def __post_init__(self):
        if self.mode not in ("weight", "joint"):
            raise ValueError(f"precision mode must be 'weight' or 'joint', got {self.mode!r}")
        for c in self.pairs():
            for b in c:
                if b != 0 and not (1 <= b <= 8 or b == FULL_PRECISION):
                    raise ValueError(f"invalid bit width {b}")

    def pairs(self) -> list:
        if self.mode == "weight":
            return [(int(b), FULL_PRECISION if b else 0) for b in self.choices]
        return [(int(a), int(b)) for a, b in self.choices]


@dataclass(frozen=True)
class Backbone:
    """Small residual network: stem conv, basic blocks, head. Blocks are (out_channels, stride)."""

    in_shape: tuple = (1, 8, 8)
    stem_channels: int = 8
    blocks: tuple = ((8, 1), (8, 1), (16, 2), (16, 1), (32, 2), (32, 1))
    num_classes: int = 4
    head_pool: str = "flatten"


TOY_BACKBONE = Backbone()


def mixed_precision_space(backbone: Backbone = TOY_BACKBONE,
                          precision: PrecisionSpec = PrecisionSpec((1, 2, 4, 8, 32)),
                          rng: Optional[Rng] = None) -> SuperNet:
    """One searchable layer per basic block, one candidate per precision.

    The stem and the classifier stay at full precision. Precision 0 becomes
    an identity skip, offered only where the block keeps its shape.
    """
    stem = ConvBNReLU(backbone.in_shape, backbone.stem_channels, 3, 1)
    layers = [FixedLayer("stem", stem)]
    shape = stem.out_shape
    for i, (out, stride) in enumerate(backbone.blocks):
        cands = []
        for wb, ab in precision.pairs():
            if wb == 0:
                if stride != 1 or out != shape[0]:
                    continue
                cands.append(SkipBlock(shape, (0, 0)))
            else:
                cands.append(QuantBasicBlock(shape, out, stride, wb, ab))
        name = f"b{i}"
        layers.append(SearchLayer(name, cands) if len(cands) > 1 else FixedLayer(name, cands[0]))
        shape = cands[0].out_shape
    head = Head(shape, backbone.num_classes, None, backbone.head_pool)
    return SuperNet(layers, head, backbone.in_shape, "mixed_precision", rng)


def backbone_net(backbone: Backbone = TOY_BACKBONE, rng: Optional[Rng] = None) -> SuperNet:
    """The unquantised backbone as a supernet with no searchable layers."""
    stem = ConvBNReLU(backbone.in_shape, backbone.stem_channels, 3, 1)
    layers = [FixedLayer("stem", stem)]
    shape = stem.out_shape
    for i, (out, stride) in enumerate(backbone.blocks):
        blk = QuantBasicBlock(shape, out, stride)
        layers.append(FixedLayer(f"b{i}", blk))
        shape = blk.out_shape
    head = Head(shape, backbone.num_classes, None, backbone.head_pool)
    return SuperNet(layers, head, backbone.in_shape, "backbone", rng)


# space definition files --------------------------------------------------------------

def _macro_from(doc) -> MacroSpec:
    return MacroSpec(tuple(MacroRow(r["block"], r.get("f"), r.get("n", 1), r.get("s", 1))
                           for r in doc["rows"]), tuple(doc["input_shape"]))


def _micro_from(items) -> list:
    out = []
    for m in items:
        if isinstance(m, str):
            if m not in MICRO_BY_NAME:
                raise ConfigError(f"unknown micro block {m!r}")
            out.append(MICRO_BY_NAME[m])
        else:
            out.append(MicroBlockSpec(m["name"], m.get("expansion", 1), m.get("kernel", 3),
                                      m.get("groups", 1), m.get("kind", "mbconv")))
    return out


def _backbone_from(doc) -> Backbone:
    if doc is None:
        return TOY_BACKBONE
    return Backbone(tuple(doc.get("in_shape", TOY_BACKBONE.in_shape)),
                    doc.get("stem_channels", TOY_BACKBONE.stem_channels),
                    tuple(tuple(b) for b in doc.get("blocks", TOY_BACKBONE.blocks)),
                    doc.get("num_classes", TOY_BACKBONE.num_classes),
                    doc.get("head_pool", TOY_BACKBONE.head_pool))


def space_from_dict(doc: dict, rng: Optional[Rng] = None) -> SuperNet:
    """Build a supernet from a parsed space file.

    Kinds:
      * ``fbnet``: ``macro`` ({"rows": [...], "input_shape": [C,H,W]} or the
        names ``"desk"``/``"fbnet"``), ``micro`` (list of names or objects),
        ``width_scale``, ``input_res``.
      * ``toy``: ``candidates``, ``layers``, ``channels``, ``in_shape``, ``num_classes``.
      * ``mixed_precision``: ``backbone`` object, ``precision``
        ({"mode": "weight"|"joint", "choices": [...]}).
      * ``backbone``: ``backbone`` object; no searchable layers.
    """
    if doc.get("schema") != SPACE_SCHEMA:
        raise ConfigError(f"space file needs \"schema\": {SPACE_SCHEMA}")
    kind = doc.get("kind")
    if kind == "fbnet":
        macro = doc.get("macro", "desk")
        macro = {"desk": DESK_MACRO, "fbnet": FBNET_MACRO}[macro] if isinstance(macro, str) else _macro_from(macro)
        micro = doc.get("micro", [m.name for m in DESK_MICRO])
        micro = [m.name for m in FBNET_MICRO] if micro == "fbnet" else micro
        return fbnet_space(macro, _micro_from(micro), doc.get("width_scale", 1.0),
                           doc.get("input_res"), rng)
    if kind == "toy":
        return toy_space(tuple(doc.get("candidates", ("k3_e1", "skip", "zero"))), doc.get("layers", 3),
                         doc.get("channels", 8), tuple(doc.get("in_shape", (1, 8, 8))),
                         doc.get("num_classes", 4), rng)
    if kind == "mixed_precision":
        p = doc.get("precision", {"mode": "weight", "choices": [1, 2, 4, 8, 32]})
        choices = tuple(tuple(c) if isinstance(c, list) else c for c in p["choices"])
        return mixed_precision_space(_backbone_from(doc.get("backbone")),
                                     PrecisionSpec(choices, p.get("mode", "weight")), rng)
    if kind == "backbone":
        return backbone_net(_backbone_from(doc.get("backbone")), rng)
    raise ConfigError(f"unknown space kind {kind!r}")


def load_space(path, rng: Optional[Rng] = None) -> SuperNet:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    return space_from_dict(doc, rng)
