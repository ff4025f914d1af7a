"""The decomposed convolutional layer.

A layer holds M template kernels and reconstructs all N output filters as
cheap spatial transformations of those templates.  Two forward paths are
provided: a reference path that materializes the filters and runs a plain
convolution, and an algorithmically equivalent two-stage path that first
contracts the input with the templates (a grouped pointwise convolution
over gathered kernel offsets) and then applies the transformations as
gather-and-multiply operations.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import CheckpointError, ShapeError
from .tensor import ConvGeometry, Tensor4, conv2d_reference, gather_offsets, _pad_input
from .transforms import (
    AffineTransform,
    RotationTransform,
    ScalarTransform,
    SpatialTransform,
    TransformFamily,
    apply_to_kernel,
    fit_scalar,
    identity_transform,
)

_MAGIC = b"TCL1"
_FAMILY_TAGS = {TransformFamily.SCALAR: 0,
                TransformFamily.ROTATION: 1,
                TransformFamily.AFFINE: 2}
_TAG_FAMILIES = {v: k for k, v in _FAMILY_TAGS.items()}


def build_mapping(n_out: int, identity_outputs: list[int]) -> np.ndarray:
    """Assign a template index to every output channel.

    Identity outputs carry their own template (rank order of their
    position).  The remaining outputs, in ascending order, cycle through
    the templates 0, 1, ..., M-1 so that overall usage counts differ by at
    most one; when the identity outputs occupy positions 0..M-1 this
    reduces exactly to the modular rule n -> n mod M.
    """
    m = len(identity_outputs)
    mapping = np.full(n_out, -1, dtype=np.int64)
    for rank, n in enumerate(sorted(identity_outputs)):
        mapping[n] = rank
    nxt = 0
    for n in range(n_out):
        if mapping[n] < 0:
            mapping[n] = nxt % m
            nxt += 1
    return mapping


class MacCounter:
    """Tally of multiply-accumulates executed by each forward stage."""

    def __init__(self):
        self.stage1 = 0
        self.stage2 = 0


class TemplateConvLayer:
    """Templates, transforms, mapping, and geometry of a decomposed layer.

    ``templates`` has shape (M, C/G, k, k) when shared across groups
    (default) or (G, M, C/G, k, k) with ``independent_group_templates``.
    ``transforms`` maps each non-identity output index to its G per-group
    transforms; identity outputs use fixed identity transforms.
    """

    def __init__(self, n_out, c_in, geom: ConvGeometry, templates,
                 identity_outputs, transforms, family: TransformFamily,
                 independent_group_templates: bool = False):
        kh, kw = geom.kernel
        if kh != kw:
            raise ShapeError("decomposed layer requires a square kernel")
        g = geom.groups
        if c_in % g:
            raise ShapeError(f"groups {g} does not divide input channels {c_in}")
        identity_outputs = sorted(int(n) for n in identity_outputs)
        m = len(identity_outputs)
        if not 1 <= m <= n_out:
            raise ShapeError(f"template count {m} outside [1, {n_out}]")
        if any(n < 0 or n >= n_out for n in identity_outputs):
            raise ShapeError("identity output index out of range")
        templates = np.asarray(templates, dtype=np.float64)
        want = (g, m, c_in // g, kh, kw) if independent_group_templates \
            else (m, c_in // g, kh, kw)
        if templates.shape != want:
            raise ShapeError(f"templates shape {templates.shape}, expected {want}")
        mapping = build_mapping(n_out, identity_outputs)
        counts = np.bincount(mapping, minlength=m)
        if counts.max() > -(-n_out // m):
            raise ShapeError("template usage exceeds ceil(N/M)")
        expected = set(range(n_out)) - set(identity_outputs)
        if set(transforms) != expected:
            raise ShapeError("transforms must cover exactly the non-identity outputs")
        for n, per_group in transforms.items():
            if len(per_group) != g:
                raise ShapeError(f"output {n} needs {g} per-group transforms")

        self.n_out = n_out
        self.c_in = c_in
        self.geom = geom
        self.family = family
        self.templates = templates
        self.identity_outputs = identity_outputs
        self.mapping = mapping
        self.transforms = dict(transforms)
        self.independent_group_templates = independent_group_templates
        self._version = 0
        self._cache = None

    @property
    def m_templates(self) -> int:
        return len(self.identity_outputs)

    @property
    def kernel_size(self) -> int:
        return self.geom.kernel[0]

    @property
    def groups(self) -> int:
        return self.geom.groups

    def template(self, g: int, m: int) -> np.ndarray:
        if self.independent_group_templates:
            return self.templates[g, m]
        return self.templates[m]

    def touch(self) -> None:
        """Invalidate cached reconstructed filters after a parameter update."""
        self._version += 1

    def transform_params(self):
        """(output, group, transform) triples in ascending output order."""
        for n in sorted(self.transforms):
            for g, t in enumerate(self.transforms[n]):
                yield n, g, t

    def reconstruct_filters(self) -> Tensor4:
        """Materialize the dense (N, C, k, k) filter bank."""
        g = self.groups
        cg = self.c_in // g
        k = self.kernel_size
        w = np.empty((self.n_out, self.c_in, k, k))
        for n in range(self.n_out):
            m = int(self.mapping[n])
            for gi in range(g):
                tpl = self.template(gi, m)
                if n in self.transforms:
                    block = apply_to_kernel(tpl, self.transforms[n][gi])
                else:
                    block = tpl
                w[n, gi * cg:(gi + 1) * cg] = block
        return Tensor4(w)

    def reconstructed_weight(self) -> Tensor4:
        """reconstruct_filters with caching keyed on the parameter version."""
        if self._cache is None or self._cache[0] != self._version:
            self._cache = (self._version, self.reconstruct_filters())
        return self._cache[1]

    def forward_reference(self, x: Tensor4) -> Tensor4:
        """Filter-reconstruction path: build the filters, then convolve."""
        self._check_input(x)
        dense_geom = ConvGeometry(self.geom.kernel, self.geom.stride,
                                  self.geom.padding, groups=1)
        return conv2d_reference(x, self.reconstruct_filters(), dense_geom)

    def forward_two_stage(self, x: Tensor4, counter: MacCounter | None = None) -> Tensor4:
        """Template-feature path: grouped pointwise contraction, then
        gather-and-multiply transform application.

        Fast path is the scalar family; rotation/affine layers execute via
        the cached reconstructed filters instead (their MAC accounting is
        handled by count_macs).
        """
        self._check_input(x)
        if self.family is not TransformFamily.SCALAR:
            dense_geom = ConvGeometry(self.geom.kernel, self.geom.stride,
                                      self.geom.padding, groups=1)
            return conv2d_reference(x, self.reconstructed_weight(), dense_geom)

        b = x.n
        g, m_total = self.groups, self.m_templates
        cg = self.c_in // g
        k = self.kernel_size
        kk = k * k
        ho, wo = self.geom.out_size(x.h, x.w)

        gathered = gather_offsets(x, self.geom).data
        # (g, kk, b*ho*wo, cg) so the channel contraction is a plain matmul
        ga = np.ascontiguousarray(
            gathered.reshape(b, kk, g, cg, ho, wo).transpose(2, 1, 0, 4, 5, 3)
        ).reshape(g, kk, b * ho * wo, cg)
        if self.independent_group_templates:
            tplr = self.templates.reshape(g, m_total, cg, kk)
            tpl = np.ascontiguousarray(tplr.transpose(0, 3, 2, 1))
        else:
            tplr = self.templates.reshape(m_total, cg, kk)
            tpl = np.ascontiguousarray(tplr.transpose(2, 1, 0))
        # (g, kk, b*ho*wo, m): template features per group and kernel offset
        z = ga @ tpl
        if counter is not None:
            counter.stage1 += b * kk * g * cg * ho * wo * m_total

        out = np.zeros((b, self.n_out, ho, wo))
        by_template: dict[int, list[int]] = {}
        for n in range(self.n_out):
            if n in self.transforms:
                by_template.setdefault(int(self.mapping[n]), []).append(n)
        for rank, n in enumerate(self.identity_outputs):
            # unit weights: pure summation over groups and offsets, no MACs
            out[:, n] = z[:, :, :, rank].sum(axis=(0, 1)).reshape(b, ho, wo)
        for m, ns in by_template.items():
            # (g, kk, len(ns)) scalar weights for every output on template m
            coef = np.stack([
                np.stack([self.transforms[n][gi].weights.reshape(kk)
                          for n in ns], axis=1) for gi in range(g)])
            zm = np.ascontiguousarray(z[:, :, :, m].transpose(2, 0, 1)
                                      ).reshape(b * ho * wo, g * kk)
            res = zm @ coef.reshape(g * kk, len(ns))
            out[:, ns] = res.reshape(b, ho, wo, len(ns)).transpose(0, 3, 1, 2)
            if counter is not None:
                counter.stage2 += b * g * kk * ho * wo * len(ns)
        return Tensor4(out)

    def backward(self, x: Tensor4, upstream: Tensor4):
        """Exact gradients of sum(output * upstream) w.r.t. input, templates,
        and transform parameters, via the chain rule through the
        reconstructed filters.
        """
        self._check_input(x)
        ho, wo = self.geom.out_size(x.h, x.w)
        if upstream.dims != (x.n, self.n_out, ho, wo):
            raise ShapeError(
                f"upstream grad dims {upstream.dims} do not match output "
                f"({x.n}, {self.n_out}, {ho}, {wo})")
        weight = self.reconstructed_weight()
        s, p = self.geom.stride, self.geom.padding
        grad_x = conv_input_grad(weight.data, upstream.data, s, p,
                                 (x.h, x.w))
        grad_w = conv_weight_grad(x.data, upstream.data, self.geom.kernel, s, p)
        self.last_dense_weight_grad = grad_w  # consumed by gradient saliency

        g = self.groups
        cg = self.c_in // g
        grad_templates = np.zeros_like(self.templates)
        grad_transforms = {n: [None] * g for n in self.transforms}
        for n in range(self.n_out):
            m = int(self.mapping[n])
            for gi in range(g):
                gblock = grad_w[n, gi * cg:(gi + 1) * cg]
                tslot = (gi, m) if self.independent_group_templates else m
                if n in self.transforms:
                    t = self.transforms[n][gi]
                    gt, gp = t.backward(self.template(gi, m), gblock)
                    grad_templates[tslot] += gt
                    grad_transforms[n][gi] = gp
                else:
                    grad_templates[tslot] += gblock
        return Tensor4(grad_x), grad_templates, grad_transforms

    def count_macs(self, h_in: int, w_in: int) -> tuple[int, int]:
        """Multiply-accumulates executed per single input by each stage.

        The scalar family runs an instrumented forward pass; the bilinear
        families charge 4 taps per transform position per the execution
        model of their sampler.
        """
        if self.family is TransformFamily.SCALAR:
            counter = MacCounter()
            probe = Tensor4.zeros(1, self.c_in, h_in, w_in)
            self.forward_two_stage(probe, counter)
            return counter.stage1, counter.stage2
        ho, wo = self.geom.out_size(h_in, w_in)
        k2 = self.kernel_size ** 2
        g, m = self.groups, self.m_templates
        stage1 = ho * wo * k2 * (self.c_in // g) * m * g
        taps = 4
        stage2 = ho * wo * k2 * g * (self.n_out - m) * taps
        return stage1, stage2

    def param_count(self) -> int:
        total = self.templates.size
        for _, _, t in self.transform_params():
            total += t.param_count
        return total

    def _check_input(self, x: Tensor4) -> None:
        if x.c != self.c_in:
            raise ShapeError(
                f"input channel axis {x.c} does not match layer {self.c_in}")

    # --- serialization -------------------------------------------------

    def save(self, path) -> None:
        """Layer file: magic, u32 header, identity positions, templates,
        then transform parameters in ascending output/group order."""
        k = self.kernel_size
        head = struct.pack(
            "<4s9I", _MAGIC, self.n_out, self.c_in, k, self.m_templates,
            self.groups, self.geom.stride, self.geom.padding,
            _FAMILY_TAGS[self.family], int(self.independent_group_templates))
        with open(path, "wb") as f:
            f.write(head)
            f.write(np.asarray(self.identity_outputs, dtype="<u4").tobytes())
            f.write(np.ascontiguousarray(self.templates, dtype="<f8").tobytes())
            for _, _, t in self.transform_params():
                f.write(np.ascontiguousarray(t.params, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "TemplateConvLayer":
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) < 40 or raw[:4] != _MAGIC:
            raise CheckpointError(f"{path}: not a decomposed-layer file")
        (_, n_out, c_in, k, m, g, stride, padding, fam_tag,
         indep) = struct.unpack_from("<4s9I", raw)
        if fam_tag not in _TAG_FAMILIES:
            raise CheckpointError(f"{path}: unknown family tag {fam_tag}")
        family = _TAG_FAMILIES[fam_tag]
        off = 40
        ident = np.frombuffer(raw, dtype="<u4", count=m, offset=off)
        off += 4 * m
        cg = c_in // g
        shape = (g, m, cg, k, k) if indep else (m, cg, k, k)
        count = int(np.prod(shape))
        if len(raw) < off + 8 * count:
            raise CheckpointError(f"{path}: truncated templates")
        templates = np.frombuffer(raw, dtype="<f8", count=count,
                                  offset=off).reshape(shape).copy()
        off += 8 * count
        per = {TransformFamily.SCALAR: k * k,
               TransformFamily.ROTATION: 1,
               TransformFamily.AFFINE: 6}[family]
        transforms = {}
        ident_set = set(int(i) for i in ident)
        for n in range(n_out):
            if n in ident_set:
                continue
            per_group = []
            for _ in range(g):
                if len(raw) < off + 8 * per:
                    raise CheckpointError(f"{path}: truncated transforms")
                params = np.frombuffer(raw, dtype="<f8", count=per, offset=off).copy()
                off += 8 * per
                if family is TransformFamily.SCALAR:
                    per_group.append(ScalarTransform(params.reshape(k, k)))
                elif family is TransformFamily.ROTATION:
                    per_group.append(RotationTransform(params[0]))
                else:
                    per_group.append(AffineTransform(params.reshape(2, 3)))
            transforms[n] = per_group
        geom = ConvGeometry((k, k), stride, padding, groups=g)
        return cls(n_out, c_in, geom, templates, sorted(ident_set), transforms,
                   family, independent_group_templates=bool(indep))


def from_dense(weight: Tensor4, kept, family: TransformFamily, groups: int = 1,
               stride: int = 1, padding: int = 0,
               independent_group_templates: bool = False) -> TemplateConvLayer:
    """Convert a dense filter bank into the decomposition.

    The kept filters become templates (renumbered ascending) and stay as
    identity outputs at their original positions; every other output gets
    a transform fitted against its original dense filter (scalar family)
    or initialized to identity (rotation/affine).
    """
    n_out, c_in, kh, kw = weight.dims
    kept = [int(i) for i in kept]
    if len(kept) != len(set(kept)):
        raise ShapeError("kept template indices must be distinct")
    if not kept:
        raise ShapeError("at least one template must be kept")
    if any(i < 0 or i >= n_out for i in kept):
        raise ShapeError("kept template index out of range")
    if c_in % groups:
        raise ShapeError(f"groups {groups} does not divide channels {c_in}")
    kept = sorted(kept)
    cg = c_in // groups
    wd = weight.data
    if independent_group_templates:
        templates = np.stack([
            np.stack([wd[i, g * cg:(g + 1) * cg] for i in kept])
            for g in range(groups)])
    else:
        # shared convention: template = kept filter's first group slice
        templates = np.stack([wd[i, :cg] for i in kept])
    mapping = build_mapping(n_out, kept)
    transforms = {}
    kept_set = set(kept)
    for n in range(n_out):
        if n in kept_set:
            continue
        m = int(mapping[n])
        per_group = []
        for g in range(groups):
            tpl = templates[g, m] if independent_group_templates else templates[m]
            if family is TransformFamily.SCALAR:
                per_group.append(fit_scalar(tpl, wd[n, g * cg:(g + 1) * cg]))
            else:
                per_group.append(identity_transform(family, kh, kw))
        transforms[n] = per_group
    geom = ConvGeometry((kh, kw), stride, padding, groups=groups)
    return TemplateConvLayer(n_out, c_in, geom, templates, kept, transforms,
                             family, independent_group_templates)


# --- dense convolution gradients (shared with the training stack) -------

def conv_weight_grad(x: np.ndarray, upstream: np.ndarray, kernel, stride: int,
                     padding: int) -> np.ndarray:
    """d sum(conv(x, W) * upstream) / dW for a dense (groups=1) convolution."""
    kh, kw = kernel
    b, c, h, w = x.shape
    _, n_out, ho, wo = upstream.shape
    xp = _pad_input(x, padding)
    s = stride
    up2 = np.ascontiguousarray(upstream.transpose(1, 0, 2, 3)) \
        .reshape(n_out, b * ho * wo)
    grad_w = np.empty((n_out, c, kh, kw))
    for ki in range(kh):
        for kj in range(kw):
            patch = xp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s]
            p2 = np.ascontiguousarray(patch.transpose(1, 0, 2, 3)) \
                .reshape(c, b * ho * wo)
            grad_w[:, :, ki, kj] = up2 @ p2.T
    return grad_w


def conv_input_grad(weight: np.ndarray, upstream: np.ndarray, stride: int,
                    padding: int, in_hw) -> np.ndarray:
    """d sum(conv(x, W) * upstream) / dx for a dense (groups=1) convolution."""
    n_out, c, kh, kw = weight.shape
    b, _, ho, wo = upstream.shape
    h, w = in_hw
    s, p = stride, padding
    if s == 1:
        # correlation of the padded upstream with the flipped, transposed
        # kernel, done as one GEMM over all offsets
        oh, ow = kh - 1 - p, kw - 1 - p
        up_ext = np.zeros((b, n_out, h + kh - 1, w + kw - 1))
        dh, sh = max(0, oh), max(0, -oh)
        dw, sw = max(0, ow), max(0, -ow)
        lh = min(ho - sh, h + kh - 1 - dh)
        lw = min(wo - sw, w + kw - 1 - dw)
        if lh > 0 and lw > 0:
            up_ext[:, :, dh:dh + lh, dw:dw + lw] = \
                upstream[:, :, sh:sh + lh, sw:sw + lw]
        cols = np.empty((kh, kw, n_out, b, h, w))
        for ki in range(kh):
            for kj in range(kw):
                cols[ki, kj] = up_ext[:, :, ki:ki + h, kj:kj + w] \
                    .transpose(1, 0, 2, 3)
        wf = np.ascontiguousarray(
            weight[:, :, ::-1, ::-1].transpose(2, 3, 0, 1)
        ).reshape(kh * kw * n_out, c)
        gx = wf.T @ cols.reshape(kh * kw * n_out, b * h * w)
        return np.ascontiguousarray(
            gx.reshape(c, b, h, w).transpose(1, 0, 2, 3))
    gxp = np.zeros((b, c, h + 2 * p, w + 2 * p))
    up2 = np.ascontiguousarray(upstream.transpose(0, 2, 3, 1)) \
        .reshape(b * ho * wo, n_out)
    for ki in range(kh):
        for kj in range(kw):
            contrib = (up2 @ weight[:, :, ki, kj]) \
                .reshape(b, ho, wo, c).transpose(0, 3, 1, 2)
            gxp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s] += contrib
    return gxp[:, :, p:p + h, p:p + w]
