"""Compute-graph construction, shape propagation and model summaries."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Optional, Union

from archbench.catalog.backbones import backbone_template
from archbench.catalog.modules import ModuleKind, ModuleStats, Shape, module_stats
from archbench.catalog.shapes import TensorShape
from archbench.config import ScaledModelSpec, load_model_config, resolve_scale, validate_model_spec
from archbench.errors import (
    ArchbenchError,
    ChannelMismatch,
    ConfigError,
    MissingDetect,
    MultipleDetect,
    ShapeConflict,
    ShapeError,
)

DEFAULT_INPUT = TensorShape(3, 640, 640)
IMAGE = -1


@dataclass(frozen=True)
class LayerNode:
    index: int
    kind: ModuleKind
    args: tuple[Any, ...]
    inputs: tuple[int, ...]
    repeats: int = 1
    out_shape: Optional[Shape] = None
    stats: Optional[ModuleStats] = None


@dataclass(frozen=True)
class ComputeGraph:
    nodes: tuple[LayerNode, ...]
    input_shape: TensorShape
    detect_taps: tuple[int, ...]

    @property
    def detect(self) -> LayerNode:
        return self.nodes[-1]

    def tap_strides(self) -> tuple[int, ...]:
        """Downsampling factor of each Detect input relative to the image."""
        return tuple(self.input_shape.height // self.nodes[i].out_shape.height for i in self.detect_taps)


@dataclass(frozen=True)
class LayerRow:
    index: int
    kind: str
    params: int
    flops: int
    out_shape: Shape


@dataclass(frozen=True)
class ModelSummary:
    name: str
    layer_count: int
    total_params: int
    total_flops: int
    per_layer: tuple[LayerRow, ...]

    @property
    def params_m(self) -> float:
        return self.total_params / 1e6

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9


def build_graph(spec: ScaledModelSpec, input_shape: TensorShape = DEFAULT_INPUT) -> ComputeGraph:
    """Resolve ``from`` indices into a DAG and annotate every node with shapes and costs."""
    layers = spec.layers
    detects = [i for i, e in enumerate(layers) if e.kind is ModuleKind.Detect]
    if not detects:
        raise MissingDetect(f"{spec.name}: model has no Detect layer")
    if len(detects) > 1:
        raise MultipleDetect(f"{spec.name}: Detect appears at layers {detects}", layer=detects[1])
    if detects[0] != len(layers) - 1:
        raise MissingDetect(f"{spec.name}: Detect at layer {detects[0]} must be the last layer", layer=detects[0])

    nodes = tuple(
        LayerNode(i, e.kind, tuple(e.args), e.resolved_inputs(i), e.number) for i, e in enumerate(layers)
    )
    graph = ComputeGraph(nodes, input_shape, nodes[-1].inputs)
    return propagate_shapes(graph)


def _backbone_context(graph: ComputeGraph, node: LayerNode) -> dict[str, Any]:
    if node.kind is not ModuleKind.Index or len(node.inputs) != 1 or node.inputs[0] == IMAGE:
        return {}
    source = graph.nodes[node.inputs[0]]
    if source.kind is not ModuleKind.TorchBackbone:
        return {}
    return {"template": backbone_template(str(source.args[1])), "image_shape": graph.input_shape}


def propagate_shapes(graph: ComputeGraph) -> ComputeGraph:
    """Annotate each node with ``out_shape`` and ``stats``; idempotent."""
    done: list[LayerNode] = []
    for node in graph.nodes:
        in_shapes = []
        for j in node.inputs:
            shape = graph.input_shape if j == IMAGE else done[j].out_shape
            if not isinstance(shape, TensorShape):
                raise ShapeConflict(f"layer {node.index} consumes multi-output layer {j}", layer=node.index)
            in_shapes.append(shape)
        try:
            stats = module_stats(node.kind, node.args, in_shapes, node.repeats, **_backbone_context(graph, node))
        except ChannelMismatch as exc:
            cls = ShapeConflict if node.kind is ModuleKind.Concat else type(exc)
            raise cls(f"layer {node.index} ({node.kind.value}): {exc}", layer=node.index) from None
        except ArchbenchError as exc:
            if exc.layer is not None:
                raise
            raise type(exc)(f"layer {node.index} ({node.kind.value}): {exc}", layer=node.index) from None
        done.append(replace(node, out_shape=stats.out_shape, stats=stats))

    out = replace(graph, nodes=tuple(done))
    extents = [out.nodes[i].out_shape.height for i in out.detect_taps]
    if any(a <= b for a, b in zip(extents, extents[1:])):
        raise ShapeConflict(
            f"Detect inputs must have strictly decreasing extents, got {extents}", layer=len(done) - 1
        )
    return out


def _leaf_count(node: LayerNode) -> int:
    # Index layers only select an existing feature map; the backbone owns its leaves.
    return 0 if node.kind is ModuleKind.Index else node.stats.layers


def summarize(graph: ComputeGraph, name: str = "model") -> ModelSummary:
    rows = tuple(
        LayerRow(n.index, n.kind.value, n.stats.params, n.stats.flops, n.out_shape) for n in graph.nodes
    )
    return ModelSummary(
        name=name,
        layer_count=sum(_leaf_count(n) for n in graph.nodes),
        total_params=sum(r.params for r in rows),
        total_flops=sum(r.flops for r in rows),
        per_layer=rows,
    )


def analyze_model(
    path: Union[str, Path],
    input_shape: TensorShape = DEFAULT_INPUT,
    scale_key: Optional[str] = None,
) -> ModelSummary:
    """Load, scale, validate, build and summarize one model config file."""
    spec = resolve_scale(load_model_config(path), scale_key)
    blocking = validate_model_spec(spec).blocking
    if blocking:
        raise ConfigError("; ".join(f.message for f in blocking), layer=blocking[0].layer)
    return summarize(build_graph(spec, input_shape), spec.name)


# -- comparison tables ------------------------------------------------------

CSV_COLUMNS = ("model", "params_m", "layers", "gflops")


@dataclass(frozen=True)
class ComparisonRow:
    model: str
    params: int
    layers: int
    flops: int

    @property
    def params_m(self) -> str:
        return f"{self.params / 1e6:.2f}"

    @property
    def gflops(self) -> str:
        return f"{self.flops / 1e9:.1f}"


@dataclass(frozen=True)
class ComparisonTable:
    rows: tuple[ComparisonRow, ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow([r.model, r.params_m, r.layers, r.gflops])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["| Model | Params (M) | Layers | GFLOPs |", "|---|---:|---:|---:|"]
        lines += [f"| {r.model} | {r.params_m} | {r.layers} | {r.gflops} |" for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        models = [
            {
                "model": r.model,
                "params": r.params,
                "params_m": r.params_m,
                "layers": r.layers,
                "flops": r.flops,
                "gflops": r.gflops,
            }
            for r in self.rows
        ]
        return json.dumps({"schema_version": 1, "models": models}, indent=2) + "\n"

    def render(self, fmt: str) -> str:
        return {"csv": self.to_csv, "md": self.to_markdown, "json": self.to_json}[fmt]()


def compare_models(summaries: Iterable[ModelSummary]) -> ComparisonTable:
    rows = tuple(ComparisonRow(s.name, s.total_params, s.layer_count, s.total_flops) for s in summaries)
    if not rows:
        raise ValueError("compare_models needs at least one summary")
    return ComparisonTable(rows)


def read_comparison_csv(text: str) -> list[dict[str, str]]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ShapeError(f"comparison CSV must have columns {','.join(CSV_COLUMNS)}")
    return list(reader)


__all__ = [
    "ComparisonRow",
    "ComparisonTable",
    "ComputeGraph",
    "DEFAULT_INPUT",
    "LayerNode",
    "LayerRow",
    "ModelSummary",
    "analyze_model",
    "build_graph",
    "compare_models",
    "propagate_shapes",
    "read_comparison_csv",
    "summarize",
]
