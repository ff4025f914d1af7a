"""Randomized cross-path equivalence checking.

Draws random scalar-family layer configurations and compares the
filter-reconstruction forward path against the two-stage path.  Used both
by the test suite and the CLI equivalence command.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layer import TemplateConvLayer, build_mapping
from .tensor import ConvGeometry, Tensor4
from .transforms import ScalarTransform, TransformFamily


def random_scalar_layer(rng, c_in, n_out, m, groups, k, stride, padding,
                        independent=False) -> TemplateConvLayer:
    cg = c_in // groups
    shape = (groups, m, cg, k, k) if independent else (m, cg, k, k)
    templates = rng.normal(size=shape)
    identity = sorted(rng.choice(n_out, size=m, replace=False).tolist())
    mapping = build_mapping(n_out, identity)
    transforms = {
        n: [ScalarTransform(rng.normal(size=(k, k))) for _ in range(groups)]
        for n in range(n_out) if n not in set(identity)}
    geom = ConvGeometry((k, k), stride, padding, groups=groups)
    return TemplateConvLayer(n_out, c_in, geom, templates, identity,
                             transforms, TransformFamily.SCALAR,
                             independent_group_templates=independent)


@dataclass
class EquivResult:
    config: dict
    deviation: float
    seed: int


def draw_config(rng) -> dict:
    k = int(rng.choice([1, 3, 5]))
    g = int(rng.choice([1, 2, 4]))
    stride = int(rng.choice([1, 2]))
    padding = int(rng.choice([0, 1, 2]))
    cg = int(rng.integers(1, max(2, 32 // g) + 1))
    c_in = cg * g
    n_out = int(rng.integers(1, 65))
    m = int(rng.integers(1, n_out + 1))
    # input large enough for at least one output position
    min_side = max(1, k - 2 * padding)
    side = int(rng.integers(min_side, min_side + 7))
    return dict(k=k, groups=g, stride=stride, padding=padding, c_in=c_in,
                n_out=n_out, m=m, side=side)


def check_one(seed: int, inject_fault: bool = False) -> EquivResult:
    rng = np.random.default_rng(seed)
    cfg = draw_config(rng)
    layer = random_scalar_layer(rng, cfg["c_in"], cfg["n_out"], cfg["m"],
                                cfg["groups"], cfg["k"], cfg["stride"],
                                cfg["padding"])
    x = Tensor4(rng.normal(size=(2, cfg["c_in"], cfg["side"], cfg["side"])))
    ref = layer.forward_reference(x).data
    if inject_fault and layer.transforms:
        n = sorted(layer.transforms)[0]
        layer.transforms[n][0].weights.flat[0] += 1e-3
        layer.touch()
    two = layer.forward_two_stage(x).data
    dev = float(np.max(np.abs(ref - two)) / (1.0 + np.max(np.abs(ref))))
    return EquivResult(cfg, dev, seed)


def equivalence_sweep(n_configs: int = 200, seed: int = 0,
                      inject_fault: bool = False,
                      tolerance: float = 1e-9) -> tuple[bool, list[EquivResult]]:
    results = [check_one(seed + i, inject_fault=inject_fault and i == 0)
               for i in range(n_configs)]
    ok = all(r.deviation <= tolerance for r in results)
    return ok, results
