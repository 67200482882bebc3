"""YOLO-style model configuration files: parsing, scaling and validation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, NamedTuple, Optional, Sequence, Union

import yaml

from archbench.catalog.backbones import backbone_template
from archbench.catalog.modules import ModuleKind
from archbench.errors import (
    BadFromIndex,
    MalformedDocument,
    MissingField,
    UnknownBackbone,
    UnknownModule,
    UnknownScale,
)

ROUNDING_UNIT = 8
DEFAULT_SCALE = "n"
CANONICAL_KEYS = ("nc", "scales", "backbone", "head")

From = Union[int, tuple[int, ...]]


class Scale(NamedTuple):
    depth: float
    width: float
    max_channels: int


IDENTITY_SCALE = Scale(1.0, 1.0, 2**31)


@dataclass(frozen=True)
class LayerEntry:
    """One ``[from, number, module, args]`` row.

    ``module`` keeps the spelling used in the file (``nn.Upsample`` stays
    ``nn.Upsample``); ``kind`` is the resolved catalog member.
    """

    from_: From
    number: int
    module: str
    args: tuple[Any, ...] = ()
    line: Optional[int] = field(default=None, compare=False)

    @property
    def kind(self) -> ModuleKind:
        return ModuleKind.lookup(self.module)

    @property
    def sources(self) -> tuple[int, ...]:
        return self.from_ if isinstance(self.from_, tuple) else (self.from_,)

    def resolved_inputs(self, index: int) -> tuple[int, ...]:
        """Absolute producer indices; ``-1`` at index 0 is the image input."""
        return tuple(index + f if f < 0 else f for f in self.sources)

    def as_list(self) -> list[Any]:
        src = list(self.from_) if isinstance(self.from_, tuple) else self.from_
        return [src, self.number, self.module, list(self.args)]


@dataclass(frozen=True)
class ModelSpec:
    nc: int
    scales: dict[str, Scale]
    backbone: tuple[LayerEntry, ...]
    head: tuple[LayerEntry, ...]
    name: str = "model"
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def layers(self) -> tuple[LayerEntry, ...]:
        return self.backbone + self.head

    def line_of(self, index: Optional[int]) -> Optional[int]:
        if index is None or not 0 <= index < len(self.layers):
            return None
        return self.layers[index].line


@dataclass(frozen=True)
class ScaledModelSpec(ModelSpec):
    scale_key: Optional[str] = None
    scale: Scale = IDENTITY_SCALE


@dataclass(frozen=True)
class Finding:
    kind: str
    layer: int
    message: str
    blocking: bool = False

    def __str__(self) -> str:
        return self.message


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.findings

    @property
    def blocking(self) -> tuple[Finding, ...]:
        return tuple(f for f in self.findings if f.blocking)

    def messages(self) -> list[str]:
        return [f.message for f in self.findings]


# -- parsing ---------------------------------------------------------------


def _yaml_line(exc: yaml.YAMLError) -> Optional[int]:
    mark = getattr(exc, "problem_mark", None)
    return mark.line + 1 if mark is not None else None


def _reject_yaml_extensions(text: str) -> None:
    try:
        for tok in yaml.scan(text, Loader=yaml.SafeLoader):
            if isinstance(tok, (yaml.AnchorToken, yaml.AliasToken, yaml.TagToken)):
                what = type(tok).__name__.replace("Token", "").lower()
                raise MalformedDocument(
                    f"YAML {what}s are not supported in model configs", line=tok.start_mark.line + 1
                )
    except yaml.YAMLError as exc:
        raise MalformedDocument(f"invalid YAML: {exc}", line=_yaml_line(exc)) from None


def _layer_lines(text: str) -> dict[str, list[int]]:
    root = yaml.compose(text, Loader=yaml.SafeLoader)
    lines: dict[str, list[int]] = {}
    if isinstance(root, yaml.MappingNode):
        for key, value in root.value:
            if key.value in ("backbone", "head") and isinstance(value, yaml.SequenceNode):
                lines[key.value] = [item.start_mark.line + 1 for item in value.value]
    return lines


def _parse_scale(key: str, value: Any) -> Scale:
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise MalformedDocument(f"scale {key!r} must be [depth, width, max_channels]")
    depth, width, max_channels = value
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise MalformedDocument(f"scale {key!r} must be numeric")
    if depth <= 0 or width <= 0 or max_channels < 1:
        raise MalformedDocument(f"scale {key!r} must be positive")
    return Scale(float(depth), float(width), int(max_channels))


def _parse_from(raw: Any, where: str) -> From:
    if isinstance(raw, bool):
        raise MalformedDocument(f"{where}: 'from' must be an integer or list of integers")
    if isinstance(raw, int):
        return raw
    if isinstance(raw, list) and raw and all(isinstance(f, int) and not isinstance(f, bool) for f in raw):
        return tuple(raw)
    raise MalformedDocument(f"{where}: 'from' must be an integer or list of integers")


def _resolve_arg(value: Any, nc: int) -> Any:
    if value == "nc":
        return nc
    if value == "None":
        return None
    if isinstance(value, list):
        return tuple(_resolve_arg(v, nc) for v in value)
    return value


def _parse_layer(raw: Any, index: int, nc: int, line: Optional[int]) -> LayerEntry:
    where = f"layer {index}"
    at = {"layer": index, "line": line}
    if not isinstance(raw, list) or len(raw) != 4:
        raise MalformedDocument(f"{where}: expected [from, number, module, args]", **at)
    src, number, module, args = raw
    if isinstance(number, bool) or not isinstance(number, int) or number < 1:
        raise MalformedDocument(f"{where}: repeat count must be an integer >= 1", **at)
    if not isinstance(module, str):
        raise MalformedDocument(f"{where}: module name must be a string", **at)
    try:
        ModuleKind.lookup(module)
    except UnknownModule as exc:
        raise UnknownModule(f"{where}: {exc}", **at) from None
    if args is None:
        args = []
    if not isinstance(args, list):
        raise MalformedDocument(f"{where}: args must be a list", **at)
    try:
        src = _parse_from(src, where)
    except MalformedDocument as exc:
        raise MalformedDocument(str(exc), **at) from None
    entry = LayerEntry(src, number, module, tuple(_resolve_arg(a, nc) for a in args), line)
    for f, resolved in zip(entry.sources, entry.resolved_inputs(index)):
        if resolved >= index or resolved < -1 or (f < 0 and resolved < 0 and index > 0):
            raise BadFromIndex(f"{where}: 'from' index {f} does not refer to an earlier layer", **at)
    return entry


def parse_model_config(text: str, name: str = "model") -> ModelSpec:
    """Parse a YOLO model YAML document into a :class:`ModelSpec`.

    Layer order is preserved, ``nc`` inside args is substituted, and unknown
    top-level keys are kept in ``metadata``.
    """
    _reject_yaml_extensions(text)
    try:
        doc = yaml.safe_load(text)
        lines = _layer_lines(text)
    except yaml.YAMLError as exc:
        raise MalformedDocument(f"invalid YAML: {exc}", line=_yaml_line(exc)) from None
    if not isinstance(doc, dict):
        raise MalformedDocument("model config must be a mapping at top level")

    for key in ("nc", "backbone", "head"):
        if doc.get(key) is None:
            raise MissingField(f"model config has no {key!r}")
    nc = doc["nc"]
    if isinstance(nc, bool) or not isinstance(nc, int) or nc < 1:
        raise MalformedDocument(f"nc must be a positive integer, got {nc!r}")
    scales_raw = doc.get("scales") or {}
    if not isinstance(scales_raw, dict):
        raise MalformedDocument("scales must be a mapping")
    scales = {str(k): _parse_scale(str(k), v) for k, v in scales_raw.items()}

    sections = {}
    offset = 0
    for section in ("backbone", "head"):
        rows = doc[section]
        if not isinstance(rows, list) or not rows:
            raise MissingField(f"{section!r} must be a non-empty list of layers")
        section_lines = lines.get(section, [])
        sections[section] = tuple(
            _parse_layer(row, offset + i, nc, section_lines[i] if i < len(section_lines) else None)
            for i, row in enumerate(rows)
        )
        offset += len(rows)

    metadata = {k: v for k, v in doc.items() if k not in CANONICAL_KEYS}
    return ModelSpec(nc, scales, sections["backbone"], sections["head"], str(metadata.get("name", name)), metadata)


def load_model_config(path: Union[str, Path]) -> ModelSpec:
    path = Path(path)
    return parse_model_config(path.read_text(encoding="utf-8"), name=path.stem)


def _flow(value: Any) -> str:
    return yaml.safe_dump(value, default_flow_style=True, width=math.inf).strip()


def _plain(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def serialize_model_spec(spec: ModelSpec) -> str:
    """Canonical YAML: nc, scales, backbone, head, then any extra metadata."""
    out = [f"nc: {spec.nc}"]
    if spec.scales:
        scales = {"scales": {k: list(v) for k, v in spec.scales.items()}}
        out.append(yaml.safe_dump(scales, sort_keys=False, default_flow_style=None).rstrip())
    for section in ("backbone", "head"):
        out.append(f"{section}:")
        for entry in getattr(spec, section):
            out.append(f"  - {_flow(_plain(entry.as_list()))}")
    text = "\n".join(out) + "\n"
    if spec.metadata:
        text += yaml.safe_dump(_plain(spec.metadata), sort_keys=False, default_flow_style=False)
    return text


# -- scaling ---------------------------------------------------------------


def round_to_unit(value: float, unit: int = ROUNDING_UNIT) -> int:
    """Nearest multiple of ``unit``, never below ``unit``."""
    return max(unit, int(value + unit / 2) // unit * unit)


def scale_channels(c: int, scale: Scale) -> int:
    return round_to_unit(min(c, scale.max_channels) * scale.width)


def scale_repeats(n: int, depth: float) -> int:
    return max(1, round(n * depth))


def _scale_entry(entry: LayerEntry, scale: Scale) -> LayerEntry:
    args = list(entry.args)
    for pos in entry.kind.schema.channel_args:
        if pos < len(args) and isinstance(args[pos], int) and not isinstance(args[pos], bool):
            args[pos] = scale_channels(args[pos], scale)
    return replace(entry, number=scale_repeats(entry.number, scale.depth), args=tuple(args))


def resolve_scale(spec: ModelSpec, scale_key: Optional[str] = None) -> ScaledModelSpec:
    """Apply one scale row: repeats ``max(1, round(n * depth))`` and channel
    args ``round_to_unit(min(c, max_channels) * width)``.
    """
    if scale_key is None:
        if not spec.scales:
            scale, scale_key = IDENTITY_SCALE, None
        elif len(spec.scales) == 1:
            scale_key, scale = next(iter(spec.scales.items()))
        elif DEFAULT_SCALE in spec.scales:
            scale_key, scale = DEFAULT_SCALE, spec.scales[DEFAULT_SCALE]
        else:
            raise UnknownScale(f"no scale given and no default {DEFAULT_SCALE!r} among {sorted(spec.scales)}")
    else:
        if scale_key not in spec.scales:
            raise UnknownScale(f"unknown scale {scale_key!r}; available {sorted(spec.scales)}")
        scale = spec.scales[scale_key]
    return ScaledModelSpec(
        nc=spec.nc,
        scales=spec.scales,
        backbone=tuple(_scale_entry(e, scale) for e in spec.backbone),
        head=tuple(_scale_entry(e, scale) for e in spec.head),
        name=spec.name,
        metadata=spec.metadata,
        scale_key=scale_key,
        scale=scale,
    )


# -- validation ------------------------------------------------------------


def _index_finding(i: int, entry: LayerEntry, layers: Sequence[LayerEntry]) -> Optional[Finding]:
    inputs = entry.resolved_inputs(i)
    if len(inputs) != 1 or inputs[0] < 0 or layers[inputs[0]].kind is not ModuleKind.TorchBackbone:
        return Finding("index-source", i, f"Index layer {i} is not fed by a backbone layer", True)
    source = layers[inputs[0]]
    if len(source.args) < 2 or len(entry.args) < 2:
        return Finding("index-tap", i, f"Index layer {i} or its backbone lacks required args", True)
    try:
        template = backbone_template(str(source.args[1]))
    except UnknownBackbone:
        return Finding("index-tap", i, f"layer {inputs[0]} names unknown backbone {source.args[1]!r}", True)
    tap = entry.args[1]
    if tap not in template.taps:
        return Finding("index-tap", i, f"Index layer {i} tap {tap} outside backbone {template.name}", True)
    return None


def validate_model_spec(spec: ModelSpec) -> ValidationReport:
    """Structural lint; problems are returned as findings, never raised."""
    layers = spec.layers
    last = len(layers) - 1
    findings: list[Finding] = []
    consumed: set[int] = set()
    for i, entry in enumerate(layers):
        consumed.update(entry.resolved_inputs(i))

    for i, entry in enumerate(layers):
        try:
            kind = entry.kind
        except UnknownModule:
            findings.append(Finding("unknown-module", i, f"unknown module {entry.module!r} at layer {i}", True))
            continue
        if i != last and i not in consumed:
            findings.append(Finding("unreachable", i, f"unreachable layer {i}"))
        if kind is ModuleKind.Detect and i != last:
            findings.append(Finding("detect-not-last", i, f"Detect at layer {i} is not the last layer", True))
        if kind is ModuleKind.Concat and len(entry.sources) < 2:
            findings.append(Finding("degenerate-concat", i, f"degenerate concat at layer {i}", True))
        if kind is ModuleKind.Index:
            finding = _index_finding(i, entry, layers)
            if finding:
                findings.append(finding)
    return ValidationReport(tuple(findings))
