"""Module-kind semantics: shapes, parameter counts and FLOPs."""

from archbench.catalog.backbones import (
    BACKBONES,
    BackboneTemplate,
    Stage,
    backbone_template,
    template_stats,
)
from archbench.catalog.modules import (
    REG_MAX,
    ArgSchema,
    ModuleKind,
    ModuleStats,
    conv_stats,
    detect_hidden_widths,
    ghost_module_stats,
    module_stats,
)
from archbench.catalog.shapes import TensorShape, conv_output_shape, pool_output_shape

__all__ = [
    "BACKBONES",
    "REG_MAX",
    "ArgSchema",
    "BackboneTemplate",
    "ModuleKind",
    "ModuleStats",
    "Stage",
    "TensorShape",
    "backbone_template",
    "conv_output_shape",
    "conv_stats",
    "detect_hidden_widths",
    "ghost_module_stats",
    "module_stats",
    "pool_output_shape",
    "template_stats",
]
