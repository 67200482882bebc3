"""Classification backbones as stage tables, tappable by published layer index."""

from __future__ import annotations

import functools
from dataclasses import dataclass
from importlib import resources
from typing import Optional

import yaml

from archbench.catalog.modules import ModuleStats, _Cost, conv_stats
from archbench.catalog.shapes import TensorShape, pool_output_shape
from archbench.errors import UnknownBackbone, UnknownTap

BACKBONES = ("resnet18", "vgg16", "efficientnetv2_s")
_ALIASES = {"efficientnet_v2_s": "efficientnetv2_s", "efficientnetv2": "efficientnetv2_s"}
BLOCK_KINDS = ("conv", "conv_relu", "maxpool", "basic", "fused_mbconv", "mbconv")


@dataclass(frozen=True)
class Stage:
    block: str
    repeats: int
    channels: int
    stride: int
    kernel: int = 3
    expand: int = 1
    tap: Optional[int] = None


@dataclass(frozen=True)
class BackboneTemplate:
    name: str
    stages: tuple[Stage, ...]
    input_channels: int = 3

    @property
    def taps(self) -> dict[int, int]:
        """Published layer index -> position of the stage it exposes."""
        return {st.tap: i for i, st in enumerate(self.stages) if st.tap is not None}

    @property
    def deepest_tap(self) -> int:
        return max(self.taps, key=lambda t: self.taps[t])

    def tap_strides(self) -> dict[int, int]:
        strides, total = {}, 1
        for st in self.stages:
            total *= st.stride
            if st.tap is not None:
                strides[st.tap] = total
        return strides


@functools.lru_cache(maxsize=None)
def backbone_template(name: str) -> BackboneTemplate:
    key = _ALIASES.get(name, name)
    if key not in BACKBONES:
        raise UnknownBackbone(f"unknown backbone {name!r}; expected one of {', '.join(BACKBONES)}")
    text = resources.files("archbench.data.backbones").joinpath(f"{key}.yaml").read_text("utf-8")
    doc = yaml.safe_load(text)
    stages = tuple(Stage(**row) for row in doc["stages"])
    for st in stages:
        if st.block not in BLOCK_KINDS:
            raise ValueError(f"{key}: unknown block kind {st.block!r}")
    return BackboneTemplate(doc["name"], stages, doc.get("input_channels", 3))


def _block(st: Stage, x: TensorShape, stride: int) -> ModuleStats:
    c, k = st.channels, st.kernel
    if st.block == "conv":
        return conv_stats(x, c, k, stride)
    if st.block == "conv_relu":
        return conv_stats(x, c, k, stride, bn=False, bias=True)
    if st.block == "maxpool":
        return ModuleStats(0, 0, pool_output_shape(x, k, stride))

    cost = _Cost()
    if st.block == "basic":
        y = cost.add(conv_stats(x, c, k, stride))
        y = cost.add(conv_stats(y, c, k, 1))
        if stride != 1 or x.channels != c:
            cost.add(conv_stats(x, c, 1, stride))
        return cost.result(y)
    if st.block == "fused_mbconv":
        if st.expand == 1:
            return conv_stats(x, c, k, stride)
        y = cost.add(conv_stats(x, x.channels * st.expand, k, stride))
        y = cost.add(conv_stats(y, c, 1, 1))
        return cost.result(y)
    if st.block == "mbconv":
        hidden = x.channels * st.expand
        y = cost.add(conv_stats(x, hidden, 1, 1))
        y = cost.add(conv_stats(y, hidden, k, stride, g=hidden))
        # Squeeze-excitation acts on pooled 1x1 vectors: parameters count, FLOPs
        # follow the zero-cost pooling convention.
        squeeze = max(1, x.channels // 4)
        cost.params += 2 * hidden * squeeze + squeeze + hidden
        cost.layers += 2
        y = cost.add(conv_stats(y, c, 1, 1))
        return cost.result(y)
    raise ValueError(f"unknown block kind {st.block!r}")


def template_stats(template: BackboneTemplate, upto_tap: int, in_shape: TensorShape) -> ModuleStats:
    """Cumulative cost of every stage up to and including the tapped one."""
    taps = template.taps
    if upto_tap not in taps:
        raise UnknownTap(f"{template.name} has no tap {upto_tap}; available {sorted(taps)}")
    cost = _Cost()
    x = in_shape
    for st in template.stages[: taps[upto_tap] + 1]:
        for i in range(st.repeats):
            x = cost.add(_block(st, x, st.stride if i == 0 else 1))
    return cost.result(x)
