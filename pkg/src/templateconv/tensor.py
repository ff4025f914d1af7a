"""Dense rank-4 tensors and the reference convolution primitives.

Everything here is deliberately simple and deterministic: the reference
convolution accumulates in a fixed order (kernel-row outer, kernel-col,
then input channel innermost) so that the two forward paths of the
decomposed layer can be compared at tight tolerances.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, GeometryError, ShapeError

_HEADER = struct.Struct("<4I")


class Tensor4:
    """A dense (batch, channel, height, width) array of 64-bit reals.

    Treated as an immutable value by every operation in this package:
    operations return new tensors and never write through ``data``.
    32-bit element type is tolerated for benchmark paths.
    """

    __slots__ = ("data",)

    def __init__(self, data, copy: bool = False):
        arr = np.array(data, copy=copy) if copy else np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 requires 4 axes, got {arr.ndim}")
        self.data = arr

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @classmethod
    def zeros(cls, n, c, h, w, dtype=np.float64) -> "Tensor4":
        return cls(np.zeros((n, c, h, w), dtype=dtype))

    def save(self, path) -> None:
        """Write the flat binary container: 16-byte dim header + f64 data."""
        with open(path, "wb") as f:
            f.write(_HEADER.pack(*self.dims))
            f.write(np.ascontiguousarray(self.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Tensor4":
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) < _HEADER.size:
            raise CheckpointError(f"{path}: truncated header")
        dims = _HEADER.unpack_from(raw)
        count = int(np.prod(dims))
        body = raw[_HEADER.size:]
        if len(body) != 8 * count:
            raise CheckpointError(
                f"{path}: expected {8 * count} data bytes, found {len(body)}")
        data = np.frombuffer(body, dtype="<f8").reshape(dims)
        return cls(data.astype(np.float64))


@dataclass(frozen=True)
class ConvGeometry:
    """Kernel size, stride, zero-padding, and group count of a convolution."""

    kernel: tuple[int, int]
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        kh, kw = self.kernel
        if kh < 1 or kw < 1:
            raise GeometryError(f"kernel dims must be >= 1, got {self.kernel}")
        if self.stride < 1:
            raise GeometryError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise GeometryError(f"padding must be >= 0, got {self.padding}")
        if self.groups < 1:
            raise GeometryError(f"groups must be >= 1, got {self.groups}")

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise GeometryError(
                f"empty output for input {h}x{w} with kernel {self.kernel}, "
                f"stride {self.stride}, padding {self.padding}")
        return ho, wo


def _pad_input(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + h, p:p + w] = x
    return xp


def conv2d_reference(x: Tensor4, weight: Tensor4, geom: ConvGeometry) -> Tensor4:
    """Direct zero-padded convolution with a mandated summation order.

    ``weight`` is laid out (out_ch, in_ch/groups, k_h, k_w).  Per output
    element the receptive field is accumulated kernel-row outer, kernel-col
    middle, channel innermost, sequentially; this makes the result
    bit-reproducible against the gathered-offset contraction.
    """
    b, c_in, h, w = x.dims
    n_out, cg, kh, kw = weight.dims
    g = geom.groups
    if (kh, kw) != tuple(geom.kernel):
        raise ShapeError(
            f"weight kernel {kh}x{kw} does not match geometry {geom.kernel}")
    if cg * g != c_in:
        raise ShapeError(
            f"channel axis mismatch: weight in-channels {cg} x groups {g} "
            f"!= input channels {c_in}")
    if n_out % g:
        raise ShapeError(
            f"output-channel axis {n_out} not divisible by groups {g}")
    ho, wo = geom.out_size(h, w)
    s, p = geom.stride, geom.padding

    xp = _pad_input(x.data, p)
    wd = weight.data
    out = np.zeros((b, n_out, ho, wo), dtype=np.float64)
    npg = n_out // g
    for gi in range(g):
        xg = xp[:, gi * cg:(gi + 1) * cg]
        og = out[:, gi * npg:(gi + 1) * npg]
        wg = wd[gi * npg:(gi + 1) * npg]
        for ki in range(kh):
            for kj in range(kw):
                patch = xg[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s]
                for c in range(cg):
                    og += patch[:, c][:, None] * wg[None, :, c, ki, kj, None, None]
    return Tensor4(out)


def gather_offsets(x: Tensor4, geom: ConvGeometry) -> Tensor4:
    """Materialize ``x`` at every kernel offset (the im2row view).

    The expanded channel axis is ordered (k_h, k_w, c): slice
    ``(ki * k_w + kj) * C + c`` at output position (y, x) holds
    ``x[y*s + ki - p, x*s + kj - p, c]`` with zero padding.
    """
    b, c_in, h, w = x.dims
    kh, kw = geom.kernel
    ho, wo = geom.out_size(h, w)
    s, p = geom.stride, geom.padding
    xp = _pad_input(x.data, p)
    out = np.empty((b, kh * kw * c_in, ho, wo), dtype=x.data.dtype)
    for ki in range(kh):
        for kj in range(kw):
            k = ki * kw + kj
            out[:, k * c_in:(k + 1) * c_in] = \
                xp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s]
    return Tensor4(out)


def _bilinear_taps(h: int, w: int, ys: np.ndarray, xs: np.ndarray):
    """4-neighbor taps for sampling an (h, w) grid at real coordinates.

    Returns (row_idx, col_idx, weight, valid) arrays of shape ys.shape+(4,).
    Out-of-bounds taps are flagged invalid and contribute zero.
    """
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    dy = ys - y0
    dx = xs - x0
    rows = np.stack([y0, y0, y0 + 1, y0 + 1], axis=-1)
    cols = np.stack([x0, x0 + 1, x0, x0 + 1], axis=-1)
    wts = np.stack([(1 - dy) * (1 - dx), (1 - dy) * dx,
                    dy * (1 - dx), dy * dx], axis=-1)
    valid = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    return rows, cols, wts, valid


def bilinear_sample_many(grid: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Vectorized 4-neighbor bilinear interpolation, zero outside the grid."""
    grid = np.asarray(grid, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    h, w = grid.shape
    rows, cols, wts, valid = _bilinear_taps(h, w, ys, xs)
    vals = np.where(valid, grid[np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1)], 0.0)
    return np.sum(wts * vals, axis=-1)


def bilinear_sample(grid, y: float, x: float) -> float:
    """Sample a 2-D grid at real (y, x); coordinates outside contribute zero."""
    return float(bilinear_sample_many(np.asarray(grid), np.float64(y), np.float64(x)))
