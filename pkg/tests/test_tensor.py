"""Tensors, geometry, the reference convolution, and bilinear sampling."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from templateconv.errors import CheckpointError, GeometryError, ShapeError
from templateconv.tensor import (
    ConvGeometry,
    Tensor4,
    bilinear_sample,
    bilinear_sample_many,
    conv2d_reference,
    gather_offsets,
)


def naive_conv(x, w, stride=1, padding=0, groups=1):
    """Independent per-element oracle: direct loops, no shared code paths."""
    b, c_in, h, wdt = x.shape
    n_out, cg, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wdt + 2 * padding - kw) // stride + 1
    npg = n_out // groups
    out = np.zeros((b, n_out, ho, wo))
    for bi in range(b):
        for n in range(n_out):
            gi = n // npg
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for ki in range(kh):
                            for kj in range(kw):
                                iy = oy * stride + ki - padding
                                ix = ox * stride + kj - padding
                                if 0 <= iy < h and 0 <= ix < wdt:
                                    acc += x[bi, gi * cg + ci, iy, ix] \
                                        * w[n, ci, ki, kj]
                    out[bi, n, oy, ox] = acc
    return out


class TestTensor4:
    def test_rejects_wrong_rank(self):
        with pytest.raises(ShapeError):
            Tensor4(np.zeros((2, 3, 4)))

    def test_coerces_integer_input_to_float64(self):
        t = Tensor4(np.ones((1, 2, 3, 4), dtype=np.int32))
        assert t.data.dtype == np.float64

    def test_keeps_float32(self):
        t = Tensor4(np.ones((1, 1, 1, 1), dtype=np.float32))
        assert t.data.dtype == np.float32

    def test_dims_properties(self):
        t = Tensor4.zeros(2, 3, 4, 5)
        assert t.dims == (2, 3, 4, 5)
        assert (t.n, t.c, t.h, t.w) == (2, 3, 4, 5)

    def test_save_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        t = Tensor4(rng.normal(size=(2, 3, 4, 5)))
        path = tmp_path / "t.t4"
        t.save(path)
        back = Tensor4.load(path)
        np.testing.assert_array_equal(t.data, back.data)

    def test_file_header_is_little_endian_u32_dims(self, tmp_path):
        t = Tensor4.zeros(1, 2, 3, 4)
        path = tmp_path / "t.t4"
        t.save(path)
        raw = path.read_bytes()
        assert raw[:16] == struct.pack("<4I", 1, 2, 3, 4)
        assert len(raw) == 16 + 8 * 24

    def test_load_rejects_truncated_file(self, tmp_path):
        path = tmp_path / "bad.t4"
        path.write_bytes(struct.pack("<4I", 1, 1, 2, 2) + b"\x00" * 8)
        with pytest.raises(CheckpointError):
            Tensor4.load(path)


class TestConvGeometry:
    @pytest.mark.parametrize("kwargs", [
        dict(kernel=(0, 3)), dict(kernel=(3, 3), stride=0),
        dict(kernel=(3, 3), padding=-1), dict(kernel=(3, 3), groups=0)])
    def test_invalid_parameters(self, kwargs):
        with pytest.raises(GeometryError):
            ConvGeometry(**kwargs)

    def test_out_size_formula(self):
        geom = ConvGeometry((3, 3), stride=2, padding=1)
        assert geom.out_size(32, 32) == (16, 16)
        assert geom.out_size(5, 7) == (3, 4)

    def test_out_size_empty_raises(self):
        with pytest.raises(GeometryError):
            ConvGeometry((5, 5)).out_size(3, 3)


class TestConv2dReference:
    def test_hand_computed_1x1(self):
        x = Tensor4(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        w = Tensor4(np.array([[[[2.0]]]]))
        out = conv2d_reference(x, w, ConvGeometry((1, 1)))
        np.testing.assert_array_equal(out.data, 2.0 * x.data)

    def test_hand_computed_3x3_valid(self):
        # center-only kernel picks out the middle element
        x = Tensor4(np.arange(9, dtype=float).reshape(1, 1, 3, 3))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = conv2d_reference(x, Tensor4(w), ConvGeometry((3, 3)))
        assert out.data.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 4.0

    def test_matches_naive_oracle_strided_padded(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 6, 7))
        w = rng.normal(size=(4, 3, 3, 3))
        out = conv2d_reference(Tensor4(x), Tensor4(w),
                               ConvGeometry((3, 3), stride=2, padding=1))
        np.testing.assert_allclose(out.data, naive_conv(x, w, 2, 1),
                                   rtol=1e-12, atol=1e-12)

    def test_grouped_matches_per_group_convs(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 4, 5, 5))
        w = rng.normal(size=(6, 2, 3, 3))
        geom = ConvGeometry((3, 3), padding=1, groups=2)
        out = conv2d_reference(Tensor4(x), Tensor4(w), geom).data
        np.testing.assert_allclose(out, naive_conv(x, w, 1, 1, groups=2),
                                   rtol=1e-12, atol=1e-12)

    def test_channel_mismatch_raises(self):
        x = Tensor4.zeros(1, 3, 4, 4)
        w = Tensor4.zeros(2, 2, 3, 3)
        with pytest.raises(ShapeError):
            conv2d_reference(x, w, ConvGeometry((3, 3)))

    def test_outputs_not_divisible_by_groups_raises(self):
        x = Tensor4.zeros(1, 4, 4, 4)
        w = Tensor4.zeros(3, 2, 1, 1)
        with pytest.raises(ShapeError):
            conv2d_reference(x, w, ConvGeometry((1, 1), groups=2))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 2),
           st.integers(0, 1), st.integers(0, 2), st.integers(1, 3))
    def test_property_matches_naive(self, c, k, stride, padding, seed, n_out):
        side = k + 3
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, c, side, side))
        w = rng.normal(size=(n_out, c, k, k))
        out = conv2d_reference(Tensor4(x), Tensor4(w),
                               ConvGeometry((k, k), stride, padding)).data
        np.testing.assert_allclose(out, naive_conv(x, w, stride, padding),
                                   rtol=1e-11, atol=1e-11)


class TestGatherOffsets:
    def test_expanded_channel_order(self):
        # slice (ki*kw + kj)*C + c at (y, x) must hold x[y+ki-p, x+kj-p, c]
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 2, 4, 4))
        geom = ConvGeometry((3, 3), padding=1)
        g = gather_offsets(Tensor4(x), geom).data
        assert g.shape == (1, 18, 4, 4)
        xp = np.zeros((1, 2, 6, 6))
        xp[:, :, 1:5, 1:5] = x
        for ki in range(3):
            for kj in range(3):
                for c in range(2):
                    np.testing.assert_array_equal(
                        g[0, (ki * 3 + kj) * 2 + c],
                        xp[0, c, ki:ki + 4, kj:kj + 4])

    def test_contraction_reproduces_convolution(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        geom = ConvGeometry((3, 3), padding=1)
        g = gather_offsets(Tensor4(x), geom).data
        w2 = w.transpose(2, 3, 1, 0).reshape(27, 4)  # (ki, kj, c) order
        out = np.einsum("bkhw,kn->bnhw", g, w2)
        ref = conv2d_reference(Tensor4(x), Tensor4(w), geom).data
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


class TestBilinear:
    def test_integer_coordinates_hit_grid_values(self):
        grid = np.arange(12, dtype=float).reshape(3, 4)
        for i in range(3):
            for j in range(4):
                assert bilinear_sample(grid, i, j) == grid[i, j]

    def test_midpoint_averages_four_neighbors(self):
        grid = np.array([[0.0, 2.0], [4.0, 10.0]])
        assert bilinear_sample(grid, 0.5, 0.5) == pytest.approx(4.0)

    def test_outside_grid_is_zero(self):
        grid = np.ones((3, 3))
        assert bilinear_sample(grid, -1.5, 0.0) == 0.0
        assert bilinear_sample(grid, 0.0, 3.5) == 0.0

    def test_reproduces_linear_functions_inside(self):
        yy, xx = np.meshgrid(np.arange(5.0), np.arange(5.0), indexing="ij")
        grid = 1.0 + 2.0 * yy - 0.5 * xx
        rng = np.random.default_rng(5)
        ys = rng.uniform(0, 4, size=20)
        xs = rng.uniform(0, 4, size=20)
        vals = bilinear_sample_many(grid, ys, xs)
        np.testing.assert_allclose(vals, 1.0 + 2.0 * ys - 0.5 * xs, rtol=1e-12)

    def test_partial_support_drops_outside_taps(self):
        # sampling half outside: only the in-grid taps contribute
        grid = np.full((2, 2), 6.0)
        assert bilinear_sample(grid, -0.5, 0.0) == pytest.approx(3.0)
