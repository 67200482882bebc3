"""Parameter, FLOP and shape semantics for every module kind used by the configs.

Counting conventions:

* ``Conv`` is a bias-free convolution followed by batch norm (2 scalars per
  output channel) and an activation (no parameters).
* FLOPs are 2 x multiply-accumulates of convolutions only; batch norm,
  activations, pooling, upsampling and concatenation are free.
* ``layers`` counts leaf modules after expanding composite blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional, Sequence, Union

from archbench.catalog.shapes import TensorShape, conv_output_shape, pool_output_shape
from archbench.errors import (
    ArityMismatch,
    ChannelMismatch,
    IndivisibleChannels,
    UnknownModule,
)

REG_MAX = 16
GHOST_RATIO = 2
GHOST_CHEAP_KERNEL = 5

Shape = Union[TensorShape, tuple[TensorShape, ...]]


class ModuleKind(str, Enum):
    Conv = "Conv"
    C2f = "C2f"
    Bottleneck = "Bottleneck"
    SPPF = "SPPF"
    Upsample = "Upsample"
    Concat = "Concat"
    Detect = "Detect"
    GhostConv = "GhostConv"
    GhostBottleneck = "GhostBottleneck"
    C3Ghost = "C3Ghost"
    Index = "Index"
    TorchBackbone = "TorchBackbone"
    MaxPool = "MaxPool"

    @classmethod
    def lookup(cls, name: str) -> "ModuleKind":
        """Resolve a config module name, accepting the usual ``nn.`` aliases."""
        key = _ALIASES.get(name, name)
        try:
            return cls(key)
        except ValueError:
            raise UnknownModule(f"unknown module {name!r}") from None

    @property
    def schema(self) -> "ArgSchema":
        return ARG_SCHEMAS[self]


_ALIASES = {
    "nn.Upsample": "Upsample",
    "nn.MaxPool2d": "MaxPool",
    "MaxPool2d": "MaxPool",
    "TorchVision": "TorchBackbone",
}


@dataclass(frozen=True)
class ArgSchema:
    names: tuple[str, ...]
    defaults: tuple[Any, ...]
    channel_args: tuple[int, ...] = ()
    min_inputs: int = 1
    max_inputs: Optional[int] = 1
    absorbs_repeats: bool = False

    def bind(self, args: Sequence[Any]) -> dict[str, Any]:
        if len(args) > len(self.names):
            raise ArityMismatch(f"expected at most {len(self.names)} args, got {len(args)}")
        n_required = len(self.names) - len(self.defaults)
        if len(args) < n_required:
            raise ArityMismatch(f"expected at least {n_required} args, got {len(args)}")
        values = list(args) + list(self.defaults[len(args) - n_required:])
        return dict(zip(self.names, values))


ARG_SCHEMAS: dict[ModuleKind, ArgSchema] = {
    ModuleKind.Conv: ArgSchema(("c2", "k", "s", "p", "g", "d"), (1, 1, None, 1, 1), channel_args=(0,)),
    ModuleKind.C2f: ArgSchema(("c2", "shortcut", "g", "e"), (False, 1, 0.5), channel_args=(0,), absorbs_repeats=True),
    ModuleKind.Bottleneck: ArgSchema(("c2", "shortcut", "g", "k", "e"), (True, 1, (3, 3), 0.5), channel_args=(0,)),
    ModuleKind.SPPF: ArgSchema(("c2", "k"), (5,), channel_args=(0,)),
    ModuleKind.Upsample: ArgSchema(("size", "scale", "mode"), (None, 2, "nearest")),
    ModuleKind.Concat: ArgSchema(("dim",), (1,), min_inputs=2, max_inputs=None),
    ModuleKind.Detect: ArgSchema(("nc",), (), min_inputs=1, max_inputs=None),
    ModuleKind.GhostConv: ArgSchema(("c2", "k", "s", "g"), (1, 1, 1), channel_args=(0,)),
    ModuleKind.GhostBottleneck: ArgSchema(("c2", "k", "s"), (3, 1), channel_args=(0,)),
    ModuleKind.C3Ghost: ArgSchema(("c2", "shortcut", "g", "e"), (True, 1, 0.5), channel_args=(0,), absorbs_repeats=True),
    ModuleKind.Index: ArgSchema(("c2", "index"), ()),
    ModuleKind.TorchBackbone: ArgSchema(
        ("c2", "model", "weights", "unwrap", "truncate", "split"), ("DEFAULT", True, 2, True)
    ),
    ModuleKind.MaxPool: ArgSchema(("k", "s"), (None,)),
}


@dataclass(frozen=True)
class ModuleStats:
    params: int
    flops: int
    out_shape: Shape
    layers: int = 1

    def __post_init__(self):
        if self.params < 0 or self.flops < 0:
            raise ValueError("params and flops must be non-negative")


class _Cost:
    """Running params/flops/leaf totals for composite blocks."""

    def __init__(self):
        self.params = 0
        self.flops = 0
        self.layers = 0

    def add(self, stats: ModuleStats) -> Shape:
        self.params += stats.params
        self.flops += stats.flops
        self.layers += stats.layers
        return stats.out_shape

    def result(self, out_shape: Shape) -> ModuleStats:
        return ModuleStats(self.params, self.flops, out_shape, self.layers)


def conv_stats(
    in_shape: TensorShape,
    c2: int,
    k: int = 1,
    s: int = 1,
    g: int = 1,
    *,
    bn: bool = True,
    bias: bool = False,
) -> ModuleStats:
    """One convolution leaf, optionally with batch norm and/or bias."""
    c1 = in_shape.channels
    if c1 % g or c2 % g:
        raise IndivisibleChannels(f"channels {c1}->{c2} not divisible by groups {g}")
    out = conv_output_shape(in_shape, c2, k, s)
    macs_per_px = (c1 // g) * k * k * c2
    params = macs_per_px + (2 * c2 if bn else 0) + (c2 if bias else 0)
    return ModuleStats(params, 2 * macs_per_px * out.area, out)


def dwconv_stats(in_shape: TensorShape, c2: int, k: int = 1, s: int = 1) -> ModuleStats:
    return conv_stats(in_shape, c2, k, s, g=math.gcd(in_shape.channels, c2))


def ghost_module_stats(
    c_in: int,
    n_out: int,
    k: int,
    d: int,
    s_ratio: int,
    in_shape: TensorShape,
    stride: int = 1,
) -> ModuleStats:
    """Ghost module: ``m = n_out / s_ratio`` intrinsic maps from a primary conv,
    the remaining ``n_out - m`` from depthwise ``d x d`` cheap operations.
    """
    if s_ratio < 2:
        raise ValueError(f"s_ratio must be >= 2, got {s_ratio}")
    if n_out % s_ratio:
        raise IndivisibleChannels(f"n_out={n_out} not divisible by s_ratio={s_ratio}")
    if in_shape.channels != c_in:
        raise ChannelMismatch(f"ghost module expects {c_in} input channels, got {in_shape.channels}")
    m = n_out // s_ratio
    primary = conv_stats(in_shape, m, k, stride)
    hw = primary.out_shape.area
    cheap_weights = (s_ratio - 1) * m * d * d
    params = primary.params + cheap_weights + 2 * (n_out - m)
    flops = primary.flops + 2 * cheap_weights * hw
    return ModuleStats(params, flops, primary.out_shape.with_channels(n_out), layers=2)


def ghostconv_stats(in_shape: TensorShape, c2: int, k: int = 1, s: int = 1) -> ModuleStats:
    return ghost_module_stats(in_shape.channels, c2, k, GHOST_CHEAP_KERNEL, GHOST_RATIO, in_shape, stride=s)


def bottleneck_stats(
    in_shape: TensorShape, c2: int, k: Sequence[int] = (3, 3), e: float = 0.5, g: int = 1
) -> ModuleStats:
    cost = _Cost()
    hidden = int(c2 * e)
    x = cost.add(conv_stats(in_shape, hidden, k[0], 1))
    x = cost.add(conv_stats(x, c2, k[1], 1, g))
    return cost.result(x)


def c2f_stats(in_shape: TensorShape, c2: int, n: int = 1, e: float = 0.5) -> ModuleStats:
    cost = _Cost()
    h = int(c2 * e)
    x = cost.add(conv_stats(in_shape, 2 * h, 1, 1))
    branch = x.with_channels(h)
    for _ in range(n):
        branch = cost.add(bottleneck_stats(branch, h, (3, 3), e=1.0))
    x = cost.add(conv_stats(x.with_channels((2 + n) * h), c2, 1, 1))
    return cost.result(x)


def sppf_stats(in_shape: TensorShape, c2: int, k: int = 5) -> ModuleStats:
    cost = _Cost()
    hidden = in_shape.channels // 2
    x = cost.add(conv_stats(in_shape, hidden, 1, 1))
    x = pool_output_shape(x, k, 1)
    cost.layers += 1
    x = cost.add(conv_stats(x.with_channels(4 * hidden), c2, 1, 1))
    return cost.result(x)


def ghost_bottleneck_stats(in_shape: TensorShape, c2: int, k: int = 3, s: int = 1) -> ModuleStats:
    cost = _Cost()
    hidden = c2 // 2
    x = cost.add(ghostconv_stats(in_shape, hidden, 1, 1))
    if s == 2:
        x = cost.add(dwconv_stats(x, hidden, k, s))
    x = cost.add(ghostconv_stats(x, c2, 1, 1))
    if s == 2:
        y = cost.add(dwconv_stats(in_shape, in_shape.channels, k, s))
        cost.add(conv_stats(y, c2, 1, 1))
    elif in_shape.channels != c2:
        raise ChannelMismatch(f"identity shortcut needs c1 == c2, got {in_shape.channels} != {c2}")
    return cost.result(x)


def c3ghost_stats(in_shape: TensorShape, c2: int, n: int = 1, e: float = 0.5) -> ModuleStats:
    cost = _Cost()
    hidden = int(c2 * e)
    a = cost.add(conv_stats(in_shape, hidden, 1, 1))
    cost.add(conv_stats(in_shape, hidden, 1, 1))
    for _ in range(n):
        a = cost.add(ghost_bottleneck_stats(a, hidden))
    x = cost.add(conv_stats(a.with_channels(2 * hidden), c2, 1, 1))
    return cost.result(x)


def detect_hidden_widths(p3_channels: int, nc: int, reg_max: int = REG_MAX) -> tuple[int, int]:
    """(box branch width, class branch width) of the anchor-free head."""
    return max(16, p3_channels // 4, 4 * reg_max), max(p3_channels, min(nc, 100))


def detect_stats(in_shapes: Sequence[TensorShape], nc: int, reg_max: int = REG_MAX) -> ModuleStats:
    c_box, c_cls = detect_hidden_widths(in_shapes[0].channels, nc, reg_max)
    cost = _Cost()
    outs = []
    for x in in_shapes:
        b = cost.add(conv_stats(x, c_box, 3))
        b = cost.add(conv_stats(b, c_box, 3))
        cost.add(conv_stats(b, 4 * reg_max, 1, bn=False, bias=True))
        c = cost.add(conv_stats(x, c_cls, 3))
        c = cost.add(conv_stats(c, c_cls, 3))
        cost.add(conv_stats(c, nc, 1, bn=False, bias=True))
        outs.append(x.with_channels(4 * reg_max + nc))
    # Distribution-integral projection: reg_max fixed weights applied to 4 sides per anchor.
    anchors = sum(x.area for x in in_shapes)
    cost.params += reg_max
    cost.flops += 2 * reg_max * 4 * anchors
    cost.layers += 1
    return cost.result(tuple(outs))


def _check_arity(kind: ModuleKind, in_shapes: Sequence[TensorShape]) -> None:
    schema = kind.schema
    n = len(in_shapes)
    if n < schema.min_inputs or (schema.max_inputs is not None and n > schema.max_inputs):
        want = f"{schema.min_inputs}" if schema.max_inputs == schema.min_inputs else f">= {schema.min_inputs}"
        raise ArityMismatch(f"{kind.value} takes {want} inputs, got {n}")


def _single(kind: ModuleKind, args: Sequence[Any], x: TensorShape, **context) -> ModuleStats:
    a = kind.schema.bind(args)
    if kind is ModuleKind.Conv:
        return conv_stats(x, a["c2"], a["k"], a["s"], a["g"])
    if kind is ModuleKind.Bottleneck:
        return bottleneck_stats(x, a["c2"], a["k"], a["e"], a["g"])
    if kind is ModuleKind.SPPF:
        return sppf_stats(x, a["c2"], a["k"])
    if kind is ModuleKind.Upsample:
        scale = int(a["scale"])
        return ModuleStats(0, 0, TensorShape(x.channels, x.height * scale, x.width * scale))
    if kind is ModuleKind.GhostConv:
        return ghostconv_stats(x, a["c2"], a["k"], a["s"])
    if kind is ModuleKind.GhostBottleneck:
        return ghost_bottleneck_stats(x, a["c2"], a["k"], a["s"])
    if kind is ModuleKind.MaxPool:
        k = a["k"]
        return ModuleStats(0, 0, pool_output_shape(x, k, a["s"] or k))
    if kind is ModuleKind.TorchBackbone:
        from archbench.catalog.backbones import backbone_template, template_stats

        template = backbone_template(str(a["model"]))
        stats = template_stats(template, template.deepest_tap, x)
        if stats.out_shape.channels != a["c2"]:
            raise ChannelMismatch(
                f"{template.name} ends with {stats.out_shape.channels} channels, config declares {a['c2']}"
            )
        return stats
    if kind is ModuleKind.Index:
        from archbench.catalog.backbones import template_stats

        template = context.get("template")
        image = context.get("image_shape")
        if template is None or image is None:
            raise ArityMismatch("Index must be fed by a TorchBackbone layer")
        tap = template_stats(template, int(a["index"]), image).out_shape
        if tap.channels != a["c2"]:
            raise ChannelMismatch(
                f"{template.name} tap {a['index']} has {tap.channels} channels, config declares {a['c2']}"
            )
        return ModuleStats(0, 0, tap)
    raise UnknownModule(f"no single-input semantics for {kind.value}")


def module_stats(
    kind: Union[ModuleKind, str],
    args: Sequence[Any],
    in_shapes: Sequence[TensorShape],
    repeats: int = 1,
    **context: Any,
) -> ModuleStats:
    """Params, FLOPs and output shape of one config layer.

    ``repeats`` is absorbed by C2f/C3Ghost as their internal bottleneck count;
    every other kind is chained ``repeats`` times. ``Index`` layers need the
    ``template`` and ``image_shape`` of their feeding backbone as context.
    """
    if isinstance(kind, str):
        kind = ModuleKind.lookup(kind)
    _check_arity(kind, in_shapes)
    if repeats < 1:
        raise ArityMismatch(f"repeat count must be >= 1, got {repeats}")

    if kind is ModuleKind.Concat:
        first = in_shapes[0]
        for other in in_shapes[1:]:
            if (other.height, other.width) != (first.height, first.width):
                raise ChannelMismatch(
                    f"Concat inputs disagree on extent: {first} vs {other}"
                )
        return ModuleStats(0, 0, first.with_channels(sum(s.channels for s in in_shapes)))
    if kind is ModuleKind.Detect:
        (nc,) = kind.schema.bind(args).values()
        return detect_stats(in_shapes, int(nc))
    if kind.schema.absorbs_repeats:
        a = kind.schema.bind(args)
        if kind is ModuleKind.C2f:
            return c2f_stats(in_shapes[0], a["c2"], repeats, a["e"])
        return c3ghost_stats(in_shapes[0], a["c2"], repeats, a["e"])

    cost = _Cost()
    x = in_shapes[0]
    for _ in range(repeats):
        x = cost.add(_single(kind, args, x, **context))
    return cost.result(x)
