"""Closed-form MAC and parameter accounting for dense and decomposed layers.

"FLOPs" throughout means multiply-accumulates, matching the
products-of-dimensions accounting the reduction ratios are built from.
Closed forms apply to shared-template layers; the instrumented counter in
the layer itself is ground truth and the test suite cross-checks the two.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .transforms import TransformFamily

_TRANSFORM_TAPS = {TransformFamily.SCALAR: 1,
                   TransformFamily.ROTATION: 4,
                   TransformFamily.AFFINE: 4}
_TRANSFORM_PARAMS = {TransformFamily.SCALAR: lambda k: k * k,
                     TransformFamily.ROTATION: lambda k: 1,
                     TransformFamily.AFFINE: lambda k: 6}


@dataclass
class LayerCost:
    """MAC and parameter count of one layer, split by stage when decomposed."""

    macs: int
    params: int
    stage_template: int = 0
    stage_transform: int = 0

    def __post_init__(self):
        if self.stage_template or self.stage_transform:
            assert self.macs == self.stage_template + self.stage_transform


def dense_layer_cost(c_in: int, n_out: int, k: int, h_out: int, w_out: int,
                     bias: bool = False) -> LayerCost:
    """Plain convolution: H*W*K^2*C*N MACs, K^2*C*N parameters."""
    macs = h_out * w_out * k * k * c_in * n_out
    params = k * k * c_in * n_out + (n_out if bias else 0)
    return LayerCost(macs=macs, params=params)


def template_layer_cost(c_in: int, n_out: int, m: int, g: int, k: int,
                        h_out: int, w_out: int,
                        family: TransformFamily = TransformFamily.SCALAR,
                        independent_group_templates: bool = False) -> LayerCost:
    """Decomposed layer: template stage H*W*K^2*(C/G)*M*G plus transform
    stage H*W*K^2*G*(N-M) scaled by the family's taps per position."""
    if c_in % g:
        raise ValueError(f"groups {g} does not divide channels {c_in}")
    if m > n_out:
        raise ValueError(f"template count {m} exceeds outputs {n_out}")
    hw = h_out * w_out
    k2 = k * k
    stage1 = hw * k2 * (c_in // g) * m * g
    stage2 = hw * k2 * g * (n_out - m) * _TRANSFORM_TAPS[family]
    tpl_params = k2 * (c_in if independent_group_templates else c_in // g) * m
    tf_params = _TRANSFORM_PARAMS[family](k) * g * (n_out - m)
    return LayerCost(macs=stage1 + stage2, params=tpl_params + tf_params,
                     stage_template=stage1, stage_transform=stage2)


def flops_reduction(c_in: int, n_out: int, m: int, g: int) -> float:
    """Compressed/dense MAC ratio: M/N + G/C - G*M/(C*N)."""
    return m / n_out + g / c_in - (g * m) / (c_in * n_out)


def params_reduction(c_in: int, n_out: int, m: int, g: int) -> float:
    """Compressed/dense parameter ratio: M/(G*N) + G/C - G*M/(C*N).

    Coincides with flops_reduction only at G=1; the report flags the
    divergence for G >= 2.
    """
    return m / (g * n_out) + g / c_in - (g * m) / (c_in * n_out)


@dataclass
class CostReport:
    """Per-layer and network-total compression accounting."""

    layer_names: list = field(default_factory=list)
    baseline: list = field(default_factory=list)    # LayerCost per conv layer
    compressed: list = field(default_factory=list)  # LayerCost per conv layer
    aux_macs: int = 0    # bias/BN/ReLU/pool work, excluded from the ratios
    aux_params: int = 0

    @property
    def total_baseline_macs(self) -> int:
        return sum(c.macs for c in self.baseline)

    @property
    def total_compressed_macs(self) -> int:
        return sum(c.macs for c in self.compressed)

    @property
    def total_baseline_params(self) -> int:
        return sum(c.params for c in self.baseline)

    @property
    def total_compressed_params(self) -> int:
        return sum(c.params for c in self.compressed)

    @property
    def flops_ratio(self) -> float:
        return self.total_compressed_macs / self.total_baseline_macs

    @property
    def params_ratio(self) -> float:
        return self.total_compressed_params / self.total_baseline_params

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "baseline_macs", "macs", "stage_template",
                    "stage_transform", "baseline_params", "params",
                    "flops_ratio", "params_ratio"])
        for name, base, comp in zip(self.layer_names, self.baseline,
                                    self.compressed):
            w.writerow([name, base.macs, comp.macs, comp.stage_template,
                        comp.stage_transform, base.params, comp.params,
                        f"{comp.macs / base.macs:.6f}",
                        f"{comp.params / base.params:.6f}"])
        w.writerow(["total", self.total_baseline_macs,
                    self.total_compressed_macs, "", "",
                    self.total_baseline_params, self.total_compressed_params,
                    f"{self.flops_ratio:.6f}", f"{self.params_ratio:.6f}"])
        return buf.getvalue()

    def to_table(self) -> str:
        rows = [["layer", "macs", "macs ratio", "params", "params ratio"]]
        for name, base, comp in zip(self.layer_names, self.baseline,
                                    self.compressed):
            rows.append([name, str(comp.macs), f"{comp.macs / base.macs:.4f}",
                         str(comp.params), f"{comp.params / base.params:.4f}"])
        rows.append(["total", str(self.total_compressed_macs),
                     f"{self.flops_ratio:.4f}",
                     str(self.total_compressed_params),
                     f"{self.params_ratio:.4f}"])
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
                 for row in rows]
        lines.append(f"(aux macs: {self.aux_macs}, aux params: {self.aux_params}; "
                     "excluded from ratios)")
        lines.append("note: the printed FLOP and parameter reduction formulas "
                     "coincide only at G=1; grouped layers report both.")
        return "\n".join(lines)


def network_report(net, input_dims) -> CostReport:
    """Per-layer and total compression accounting for a network.

    ``input_dims`` is (channels, height, width) of one sample.  Convolution
    layers enter the ratios (baseline = their dense equivalent); bias, batch
    norm, pooling, and the classifier are tallied separately as aux costs.
    """
    from .nn import BatchNorm, DenseConv, Flatten, Linear, MaxPool, TemplateConv

    c, h, w = input_dims
    report = CostReport()
    conv_idx = 0
    for layer in net.layers:
        if isinstance(layer, DenseConv):
            n_out, c_in, k, _ = layer.weight.shape
            ho = (h + 2 * layer.padding - k) // layer.stride + 1
            wo = (w + 2 * layer.padding - k) // layer.stride + 1
            cost = dense_layer_cost(c_in, n_out, k, ho, wo)
            report.layer_names.append(f"conv{conv_idx}")
            report.baseline.append(cost)
            report.compressed.append(cost)
            report.aux_params += n_out  # bias
            report.aux_macs += n_out * ho * wo
            conv_idx += 1
            c, h, w = n_out, ho, wo
        elif isinstance(layer, TemplateConv):
            core = layer.core
            k = core.kernel_size
            ho, wo = core.geom.out_size(h, w)
            report.layer_names.append(f"conv{conv_idx}")
            report.baseline.append(dense_layer_cost(core.c_in, core.n_out, k, ho, wo))
            report.compressed.append(template_layer_cost(
                core.c_in, core.n_out, core.m_templates, core.groups, k, ho, wo,
                core.family, core.independent_group_templates))
            report.aux_params += core.n_out
            report.aux_macs += core.n_out * ho * wo
            conv_idx += 1
            c, h, w = core.n_out, ho, wo
        elif isinstance(layer, BatchNorm):
            report.aux_params += 2 * len(layer.gamma)
            report.aux_macs += 2 * c * h * w
        elif isinstance(layer, MaxPool):
            h = (h - layer.k) // layer.stride + 1
            w = (w - layer.k) // layer.stride + 1
        elif isinstance(layer, Flatten):
            c, h, w = c * h * w, 1, 1
        elif isinstance(layer, Linear):
            n_out, n_in = layer.weight.shape
            report.aux_params += n_out * n_in + n_out
            report.aux_macs += n_out * n_in
            c, h, w = n_out, 1, 1
    return report
