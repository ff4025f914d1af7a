"""Convolutional layers whose pruned filters are rebuilt as cheap spatial
transformations of retained template filters."""

from .cost import (
    CostReport,
    LayerCost,
    dense_layer_cost,
    flops_reduction,
    network_report,
    params_reduction,
    template_layer_cost,
)
from .data import Dataset, augment, load_cifar10_binary, make_synthetic_dataset
from .errors import CheckpointError, GeometryError, ShapeError, TransformError
from .layer import TemplateConvLayer, from_dense
from .pruning import (
    PruneSchedule,
    PruningPlan,
    SaliencyMeasure,
    apply_plan,
    build_plan,
    filter_saliency,
    rate_at_epoch,
    templates_for_rate,
)
from .tensor import (
    ConvGeometry,
    Tensor4,
    bilinear_sample,
    conv2d_reference,
    gather_offsets,
)
from .transforms import (
    AffineTransform,
    RotationTransform,
    ScalarTransform,
    TransformFamily,
    apply_to_kernel,
    fit_scalar,
    identity_transform,
    transform_macs_per_position,
)

__all__ = [
    "AffineTransform", "CheckpointError", "ConvGeometry", "CostReport",
    "Dataset", "GeometryError", "LayerCost", "PruneSchedule", "PruningPlan",
    "RotationTransform", "SaliencyMeasure", "ScalarTransform", "ShapeError",
    "TemplateConvLayer", "Tensor4", "TransformError", "TransformFamily",
    "apply_plan", "apply_to_kernel", "augment", "bilinear_sample",
    "build_plan", "conv2d_reference", "dense_layer_cost", "filter_saliency",
    "fit_scalar", "flops_reduction", "from_dense", "gather_offsets",
    "identity_transform", "load_cifar10_binary", "make_synthetic_dataset",
    "network_report", "params_reduction", "rate_at_epoch",
    "template_layer_cost", "templates_for_rate", "transform_macs_per_position",
]
