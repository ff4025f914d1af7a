"""Saliency measurement, template scheduling, and network conversion.

Pruning here is generalized: instead of zeroing pruned filters, each
pruned output is rebuilt as a cheap transformation of a retained template.
Selection is nested across the schedule: once a filter is pruned it never
returns, so each step selects from the previously kept set.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ShapeError
from .layer import from_dense
from .nn import DenseConv, Network, TemplateConv
from .tensor import Tensor4
from .transforms import TransformFamily, identity_transform


class SaliencyMeasure(Enum):
    MAGNITUDE = "mag"
    TAYLOR_FO = "taylor"


def filter_saliency(measure: SaliencyMeasure, weight: Tensor4,
                    grad: Tensor4 | None = None) -> np.ndarray:
    """Per-filter importance: L1 norm, or |sum(weight * grad)| per filter."""
    wd = weight.data
    if measure is SaliencyMeasure.MAGNITUDE:
        return np.sum(np.abs(wd), axis=(1, 2, 3))
    if grad is None:
        raise ShapeError("gradient-based saliency requires accumulated grads")
    gd = grad.data
    if gd.shape != wd.shape:
        raise ShapeError(
            f"grad dims {gd.shape} do not match weight dims {wd.shape}")
    return np.abs(np.sum(wd * gd, axis=(1, 2, 3)))


@dataclass(frozen=True)
class PruneSchedule:
    """Linear ramp to the target pruning rate over the first ramp epochs."""

    target_rate: float
    ramp_epochs: int = 40
    min_templates: int = 8

    def __post_init__(self):
        if not 0.0 <= self.target_rate < 1.0:
            raise ValueError(f"target rate {self.target_rate} outside [0, 1)")
        if self.ramp_epochs < 1:
            raise ValueError("ramp must span at least one epoch")


def rate_at_epoch(schedule: PruneSchedule, epoch: int) -> float:
    return schedule.target_rate * min(1.0, epoch / schedule.ramp_epochs)


def templates_for_rate(n_filters: int, rate: float, min_templates: int) -> int:
    """M = max(min_templates, ceil((1 - rate) * N)), clamped to [1, N]."""
    m = max(min_templates, int(np.ceil((1.0 - rate) * n_filters)))
    return max(1, min(n_filters, m))


@dataclass
class PlanEntry:
    layer_id: int
    m: int
    kept: list[int]
    rate: float


@dataclass
class PruningPlan:
    entries: list[PlanEntry]

    def to_text(self) -> str:
        lines = [" ".join([str(e.layer_id), str(e.m), f"{e.rate:.6f}"]
                          + [str(i) for i in e.kept])
                 for e in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PruningPlan":
        entries = []
        for line in text.splitlines():
            if not line.strip():
                continue
            parts = line.split()
            entries.append(PlanEntry(int(parts[0]), int(parts[1]),
                                     [int(p) for p in parts[3:]],
                                     float(parts[2])))
        return cls(entries)


def _top_k_nested(scores: np.ndarray, candidates: list[int], k: int) -> list[int]:
    """Top-k candidate indices by score, ties broken by lower index."""
    order = sorted(candidates, key=lambda i: (-scores[i], i))
    return sorted(order[:k])


def build_plan(net: Network, measure: SaliencyMeasure, epoch: int,
               schedule: PruneSchedule, grads: dict | None = None) -> PruningPlan:
    """Select per-layer kept template sets for the current schedule rate.

    Already-converted layers are scored on their reconstructed filters and
    may only shrink within their current identity set.
    """
    rate = rate_at_epoch(schedule, epoch)
    entries = []
    for li, layer in net.conv_layers():
        if isinstance(layer, TemplateConv):
            weight = layer.core.reconstructed_weight()
            candidates = list(layer.core.identity_outputs)
        else:
            weight = Tensor4(layer.weight)
            candidates = list(range(layer.weight.shape[0]))
        n = weight.dims[0]
        grad = None
        if measure is SaliencyMeasure.TAYLOR_FO:
            acc = grads[li] if grads is not None else layer.accum_weight_grad
            grad = Tensor4(np.asarray(acc))
        scores = filter_saliency(measure, weight, grad)
        m = min(len(candidates),
                templates_for_rate(n, rate, schedule.min_templates))
        kept = _top_k_nested(scores, candidates, m)
        entries.append(PlanEntry(li, m, kept, 1.0 - m / n))
    return PruningPlan(entries)


def apply_plan(net: Network, plan: PruningPlan,
               family: TransformFamily = TransformFamily.SCALAR,
               groups: int = 1,
               independent_group_templates: bool = False) -> Network:
    """Convert or shrink each planned layer in place.

    Dense layers are decomposed via from_dense.  Converted layers are
    rebuilt from their reconstructed filters; scalar transforms refit
    exactly, while rotation/affine transforms are carried over whenever an
    output keeps its previously assigned template and reset to identity
    otherwise.
    """
    by_id = {i for i, _ in net.conv_layers()}
    for entry in plan.entries:
        if entry.layer_id not in by_id:
            raise ShapeError(f"plan names unknown layer {entry.layer_id}")
        layer = net.layers[entry.layer_id]
        if isinstance(layer, DenseConv):
            c_in = layer.weight.shape[1]
            g = groups if c_in % groups == 0 else 1  # e.g. 3-channel input layer
            core = from_dense(Tensor4(layer.weight), entry.kept, family,
                              g, layer.stride, layer.padding,
                              independent_group_templates)
            net.layers[entry.layer_id] = TemplateConv(core, layer.bias)
            continue
        old = layer.core
        if not set(entry.kept) <= set(old.identity_outputs):
            raise ShapeError(
                f"plan for layer {entry.layer_id} resurrects pruned filters")
        weight = old.reconstruct_filters()
        g = groups if old.c_in % groups == 0 else 1
        core = from_dense(weight, entry.kept, family, g,
                          old.geom.stride, old.geom.padding,
                          independent_group_templates)
        if family is not TransformFamily.SCALAR:
            k = core.kernel_size
            for n in core.transforms:
                same_template = (
                    n in old.transforms
                    and old.family is family
                    and old.groups == core.groups
                    and old.identity_outputs[int(old.mapping[n])]
                    == core.identity_outputs[int(core.mapping[n])])
                if same_template:
                    core.transforms[n] = old.transforms[n]
                else:
                    core.transforms[n] = [identity_transform(family, k, k)
                                          for _ in range(core.groups)]
        layer.core = core
        layer.accum_weight_grad = np.zeros_like(layer.accum_weight_grad)
    return net
