"""Cheap parametric transformations applied to template kernels.

Three families: per-position scalar weights, a single learnable rotation
angle, and a full 2x3 affine map.  Rotation and affine act on kernel
coordinates about the spatial center via the inverse-map + bilinear-sample
convention, with zero outside the kernel support.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ShapeError, TransformError
from .tensor import _bilinear_taps


class TransformFamily(Enum):
    SCALAR = "scalar"
    ROTATION = "rotation"
    AFFINE = "affine"


@dataclass
class ScalarTransform:
    """Elementwise per-spatial-position weights, shared across channels."""

    weights: np.ndarray  # (k_h, k_w)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError("scalar transform weights must be a 2-D grid")

    family = TransformFamily.SCALAR

    @property
    def param_count(self) -> int:
        return self.weights.size

    @property
    def macs_per_position(self) -> int:
        return 1

    @property
    def params(self) -> np.ndarray:
        return self.weights

    def apply(self, template: np.ndarray) -> np.ndarray:
        if template.shape[-2:] != self.weights.shape:
            raise ShapeError(
                f"scalar weights {self.weights.shape} do not match kernel "
                f"dims {template.shape[-2:]}")
        return template * self.weights[None]

    def backward(self, template, grad_out):
        grad_template = grad_out * self.weights[None]
        grad_params = np.sum(grad_out * template, axis=0)
        return grad_template, grad_params


@dataclass
class RotationTransform:
    """Rotation by ``theta`` radians about the kernel center."""

    theta: np.ndarray  # 0-d array so optimizers can update in place

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(())

    family = TransformFamily.ROTATION
    param_count = 1
    macs_per_position = 4

    @property
    def params(self) -> np.ndarray:
        return self.theta

    def matrix(self) -> np.ndarray:
        c, s = np.cos(float(self.theta)), np.sin(float(self.theta))
        return np.array([[c, -s, 0.0], [s, c, 0.0]])

    def apply(self, template: np.ndarray) -> np.ndarray:
        return _affine_apply(template, self.matrix())

    def backward(self, template, grad_out):
        grad_template, grad_matrix = _affine_backward(
            template, self.matrix(), grad_out)
        c, s = np.cos(float(self.theta)), np.sin(float(self.theta))
        dmat = np.array([[-s, -c, 0.0], [c, -s, 0.0]])
        return grad_template, np.asarray(np.sum(grad_matrix * dmat)).reshape(())


@dataclass
class AffineTransform:
    """General 2x3 affine map [[a, b, tx], [c, d, ty]] on kernel coordinates."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (2, 3):
            raise ShapeError("affine transform requires a 2x3 matrix")

    family = TransformFamily.AFFINE
    param_count = 6
    macs_per_position = 4

    @property
    def params(self) -> np.ndarray:
        return self.matrix

    def apply(self, template: np.ndarray) -> np.ndarray:
        return _affine_apply(template, self.matrix)

    def backward(self, template, grad_out):
        return _affine_backward(template, self.matrix, grad_out)


SpatialTransform = ScalarTransform | RotationTransform | AffineTransform


def identity_transform(family: TransformFamily, k_h: int, k_w: int) -> SpatialTransform:
    """The no-op member of each family for the given kernel dims."""
    if family is TransformFamily.SCALAR:
        return ScalarTransform(np.ones((k_h, k_w)))
    if family is TransformFamily.ROTATION:
        return RotationTransform(np.float64(0.0))
    return AffineTransform(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))


def apply_to_kernel(template: np.ndarray, t: SpatialTransform) -> np.ndarray:
    """Transform a (channels, k_h, k_w) template kernel."""
    template = np.asarray(template, dtype=np.float64)
    if template.ndim != 3:
        raise ShapeError("template must be (channels, k_h, k_w)")
    return t.apply(template)


def transform_macs_per_position(t: SpatialTransform) -> int:
    """Multiplies executed per output spatial location by the second stage."""
    return t.macs_per_position


def fit_scalar(template: np.ndarray, target: np.ndarray) -> ScalarTransform:
    """Least-squares scalar weights mapping ``template`` onto ``target``.

    Per spatial position the 1-D solution across channels is
    sum(target * template) / sum(template^2), falling back to the identity
    weight 1 where the template has (numerically) no energy.
    """
    template = np.asarray(template, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if template.shape != target.shape:
        raise ShapeError(
            f"template {template.shape} and target {target.shape} differ")
    num = np.sum(target * template, axis=0)
    den = np.sum(template * template, axis=0)
    weights = np.where(den < 1e-12, 1.0, num / np.where(den < 1e-12, 1.0, den))
    return ScalarTransform(weights)


def _source_coords(k_h: int, k_w: int, matrix: np.ndarray):
    """Inverse-map kernel coordinates through a 2x3 affine about the center.

    The 2x2 block acts on (x, y) offsets from the center; the third column
    is a translation.  Returns (src_rows, src_cols) of shape (k_h, k_w)
    plus the inverse 2x2 block and the centered source offsets (sx, sy),
    which the parameter gradients reuse.
    """
    a = np.asarray(matrix, dtype=np.float64)
    lin = a[:, :2]
    det = lin[0, 0] * lin[1, 1] - lin[0, 1] * lin[1, 0]
    if abs(det) < 1e-12:
        raise TransformError("affine linear part is singular")
    inv = np.array([[lin[1, 1], -lin[0, 1]], [-lin[1, 0], lin[0, 0]]]) / det
    cy, cx = (k_h - 1) / 2.0, (k_w - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(k_h), np.arange(k_w), indexing="ij")
    vx = (jj - cx) - a[0, 2]
    vy = (ii - cy) - a[1, 2]
    sx = inv[0, 0] * vx + inv[0, 1] * vy
    sy = inv[1, 0] * vx + inv[1, 1] * vy
    return cy + sy, cx + sx, inv, sx, sy


def _affine_apply(template: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    ch, k_h, k_w = template.shape
    rows, cols, _, _, _ = _source_coords(k_h, k_w, matrix)
    ridx, cidx, wts, valid = _bilinear_taps(k_h, k_w, rows, cols)
    ridx = np.clip(ridx, 0, k_h - 1)
    cidx = np.clip(cidx, 0, k_w - 1)
    vals = np.where(valid[None], template[:, ridx, cidx], 0.0)
    return np.sum(wts[None] * vals, axis=-1)


def _affine_backward(template: np.ndarray, matrix: np.ndarray, grad_out: np.ndarray):
    """Adjoint of _affine_apply plus gradients of the six matrix entries."""
    ch, k_h, k_w = template.shape
    rows, cols, inv, sx, sy = _source_coords(k_h, k_w, matrix)
    ridx, cidx, wts, valid = _bilinear_taps(k_h, k_w, rows, cols)
    ridx_c = np.clip(ridx, 0, k_h - 1)
    cidx_c = np.clip(cidx, 0, k_w - 1)

    # grad w.r.t. template: scatter each tap weight back to its source cell
    grad_template = np.zeros_like(template)
    weff = np.where(valid, wts, 0.0)
    flat = (ridx_c * k_w + cidx_c).ravel()
    for c in range(ch):
        contrib = (grad_out[c][..., None] * weff).ravel()
        grad_template[c] = np.bincount(flat, weights=contrib,
                                       minlength=k_h * k_w).reshape(k_h, k_w)

    # spatial derivative of the bilinear sampler at each source coordinate
    vals = np.where(valid, template[:, ridx_c, cidx_c], 0.0)
    dy = rows - np.floor(rows)
    dx = cols - np.floor(cols)
    dval_dy = (-(1 - dx) * vals[..., 0] - dx * vals[..., 1]
               + (1 - dx) * vals[..., 2] + dx * vals[..., 3])
    dval_dx = (-(1 - dy) * vals[..., 0] + (1 - dy) * vals[..., 1]
               - dy * vals[..., 2] + dy * vals[..., 3])
    gy = np.sum(grad_out * dval_dy, axis=0)  # (k_h, k_w)
    gx = np.sum(grad_out * dval_dx, axis=0)

    # source coords (sx, sy) = inv @ (v - t); gradients follow from
    # d inv/dA = -inv E inv  =>  d s/dA_pq = -inv[:, p] * s_q
    grad_matrix = np.zeros((2, 3))
    for p in range(2):
        for q in range(2):
            s_q = sx if q == 0 else sy
            dsx = -inv[0, p] * s_q
            dsy = -inv[1, p] * s_q
            grad_matrix[p, q] = np.sum(gx * dsx + gy * dsy)
        # translation column: d s/d t_p = -inv[:, p]
        grad_matrix[p, 2] = np.sum(gx * (-inv[0, p]) + gy * (-inv[1, p]))
    return grad_template, grad_matrix
