"""Wall-clock benchmark of the dense vs two-stage forward paths.

Single-precision, single-sample latency with a per-stage breakdown
(gather, template contraction, transform application).  Only orderings
and trends are meaningful; absolute times depend on the host.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .layer import TemplateConvLayer
from .nn import conv2d_fast
from .verify import random_scalar_layer


@dataclass
class BenchRow:
    rate: float
    impl: str
    median_us: float
    p10_us: float
    p90_us: float
    stage_gather: float = 0.0
    stage_template: float = 0.0
    stage_transform: float = 0.0


@dataclass
class BenchResult:
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rate", "impl", "median_us", "p10_us", "p90_us",
                    "stage_gather_us", "stage_template_us",
                    "stage_transform_us"])
        for r in self.rows:
            w.writerow([f"{r.rate:.2f}", r.impl, f"{r.median_us:.2f}",
                        f"{r.p10_us:.2f}", f"{r.p90_us:.2f}",
                        f"{r.stage_gather:.2f}", f"{r.stage_template:.2f}",
                        f"{r.stage_transform:.2f}"])
        return buf.getvalue()


def _two_stage_f32(layer: TemplateConvLayer, x: np.ndarray, stages: dict):
    """Optimized float32 two-stage forward for a scalar-family layer."""
    c, h, w = x.shape
    g, m = layer.groups, layer.m_templates
    cg = layer.c_in // g
    k = layer.kernel_size
    kk = k * k
    s, p = layer.geom.stride, layer.geom.padding
    ho, wo = layer.geom.out_size(h, w)

    t0 = time.perf_counter()
    xp = np.zeros((c, h + 2 * p, w + 2 * p), dtype=np.float32)
    xp[:, p:p + h, p:p + w] = x
    cols = np.empty((kk, c, ho, wo), dtype=np.float32)
    for ki in range(k):
        for kj in range(k):
            cols[ki * k + kj] = xp[:, ki:ki + s * ho:s, kj:kj + s * wo:s]
    t1 = time.perf_counter()

    colsr = cols.reshape(kk, g, cg, ho * wo).transpose(1, 0, 2, 3)
    tplr = layer.templates.reshape(m, cg, kk).transpose(2, 0, 1) \
        .astype(np.float32)[None]                       # (1, kk, m, cg)
    z = np.matmul(tplr, colsr)                          # (g, kk, m, hw)
    t2 = time.perf_counter()

    out = np.empty((layer.n_out, ho * wo), dtype=np.float32)
    by_template: dict[int, list[int]] = {}
    for n in range(layer.n_out):
        if n in layer.transforms:
            by_template.setdefault(int(layer.mapping[n]), []).append(n)
    for rank, n in enumerate(layer.identity_outputs):
        out[n] = z[:, :, rank].sum(axis=(0, 1))
    for mi, ns in by_template.items():
        coef = np.stack([
            np.stack([layer.transforms[n][gi].weights.reshape(kk)
                      for gi in range(g)]) for n in ns]).astype(np.float32)
        zm = z[:, :, mi].reshape(g * kk, ho * wo)       # (g*kk, hw)
        out[ns] = coef.reshape(len(ns), g * kk) @ zm
    t3 = time.perf_counter()

    stages["gather"] = t1 - t0
    stages["template"] = t2 - t1
    stages["transform"] = t3 - t2
    return out.reshape(layer.n_out, ho, wo)


def bench_layer(rates=(0.25, 0.5, 0.7, 0.9), c_in=64, n_out=64, k=3,
                side=32, reps=9, warmup=2, seed=0, groups=1,
                min_templates=1) -> BenchResult:
    """Time the dense and two-stage paths across a pruning-rate grid."""
    from .pruning import templates_for_rate

    rng = np.random.default_rng(seed)
    x = rng.normal(size=(c_in, side, side)).astype(np.float32)
    dense_w = rng.normal(size=(n_out, c_in, k, k)).astype(np.float32)
    result = BenchResult()

    for rate in rates:
        m = templates_for_rate(n_out, rate, min_templates)
        layer = random_scalar_layer(rng, c_in, n_out, m, groups, k, 1, 1)

        times = []
        for _ in range(warmup + reps):
            t0 = time.perf_counter()
            conv2d_fast(x[None].astype(np.float32), dense_w, 1, 1)
            times.append(time.perf_counter() - t0)
        times = np.array(times[warmup:]) * 1e6
        result.rows.append(BenchRow(rate, "dense",
                                    float(np.median(times)),
                                    float(np.percentile(times, 10)),
                                    float(np.percentile(times, 90))))

        totals, stage_rows = [], []
        for _ in range(warmup + reps):
            stages = {}
            t0 = time.perf_counter()
            _two_stage_f32(layer, x, stages)
            totals.append(time.perf_counter() - t0)
            stage_rows.append(stages)
        totals = np.array(totals[warmup:]) * 1e6
        stage_rows = stage_rows[warmup:]
        med = {key: float(np.median([s[key] for s in stage_rows]) * 1e6)
               for key in ("gather", "template", "transform")}
        result.rows.append(BenchRow(rate, "two_stage",
                                    float(np.median(totals)),
                                    float(np.percentile(totals, 10)),
                                    float(np.percentile(totals, 90)),
                                    med["gather"], med["template"],
                                    med["transform"]))
    return result
