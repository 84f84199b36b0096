import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shl.grid import (
    Field,
    NonPowerOfTwoError,
    all_multiindices,
    decode_multiindex,
    encode_multiindex,
    local_quadratic_average,
    lp_norm,
    make_grid,
    read_snapshot,
    symmetrize_multiindex,
    write_snapshot,
)


class TestMakeGrid:
    def test_spacing_2d(self):
        assert make_grid(2, 1.0, 8).h == 0.125

    def test_spacing_1d(self):
        assert make_grid(1, 16.0, 1024).h == 0.015625

    def test_spacing_times_points_is_exact(self):
        g = make_grid(2, 0.7, 64)
        assert g.h * g.N == g.L

    def test_rejects_non_power_of_two(self):
        with pytest.raises(NonPowerOfTwoError):
            make_grid(2, 1.0, 7)

    def test_rejects_bad_period_and_dim(self):
        with pytest.raises(ValueError):
            make_grid(2, -1.0, 8)
        with pytest.raises(ValueError):
            make_grid(4, 1.0, 8)


class TestField:
    def test_shape_check(self):
        g = make_grid(2, 1.0, 8)
        with pytest.raises(ValueError):
            Field(g, np.zeros((8, 4)))

    def test_immutable(self):
        g = make_grid(1, 1.0, 8)
        f = Field(g, np.zeros(8))
        with pytest.raises(ValueError):
            f.data[0] = 1.0
        with pytest.raises(AttributeError):
            f.data = np.ones(8)

    def test_rank_and_magnitude(self):
        g = make_grid(2, 1.0, 8)
        v = Field(g, np.stack([np.full(g.shape, 3.0), np.full(g.shape, 4.0)]))
        assert v.rank == (2,)
        assert np.allclose(v.magnitude(), 5.0)


class TestLocalQuadraticAverage:
    def test_constant_field(self):
        g = make_grid(2, 1.0, 32)
        out = local_quadratic_average(Field(g, np.full(g.shape, -2.5)), 0.25)
        assert np.max(np.abs(out.data - 2.5)) < 1e-12

    def test_full_torus_average_of_sine(self):
        # oracle: the lattice mean of sin^2 over a full period is exactly 1/2
        g = make_grid(1, 2.0, 256)
        x = g.axis_coords()
        vals = np.sin(2 * np.pi * x / g.L)
        oracle = math.sqrt(float(np.mean(vals**2)))
        out = local_quadratic_average(Field(g, vals), g.L / 2)
        assert abs(oracle - math.sqrt(0.5)) < 1e-15
        assert np.max(np.abs(out.data - oracle)) < 1e-6

    def test_degenerate_ball_is_pointwise_abs(self):
        g = make_grid(2, 1.0, 16)
        rng = np.random.default_rng(0)
        f = Field(g, rng.standard_normal(g.shape))
        out = local_quadratic_average(f, g.h / 3)
        assert np.array_equal(out.data, np.abs(f.data))

    def test_rejects_bad_scale(self):
        g = make_grid(2, 1.0, 16)
        f = Field(g, np.ones(g.shape))
        with pytest.raises(ValueError):
            local_quadratic_average(f, 0.9)
        with pytest.raises(ValueError):
            local_quadratic_average(f, 0.0)


class TestLpNorm:
    def test_constant(self):
        g = make_grid(2, 2.0, 16)
        assert lp_norm(Field(g, np.ones(g.shape)), 2) == pytest.approx(2.0, abs=1e-14)

    def test_zero(self):
        g = make_grid(2, 2.0, 16)
        assert lp_norm(Field.zeros(g), 3) == 0.0

    def test_unit_spike_l1(self):
        g = make_grid(2, 1.0, 16)
        data = np.zeros(g.shape)
        data[3, 5] = 1.0
        assert lp_norm(Field(g, data), 1) == pytest.approx(g.cell_volume, rel=1e-14)

    def test_sup_norm(self):
        g = make_grid(1, 1.0, 16)
        data = np.linspace(-3, 2, 16)
        assert lp_norm(Field(g, data), math.inf) == 3.0

    @given(st.floats(min_value=-10, max_value=10, allow_nan=False))
    @settings(max_examples=25, deadline=None)
    def test_absolute_homogeneity(self, c):
        g = make_grid(1, 1.0, 32)
        rng = np.random.default_rng(3)
        data = rng.standard_normal(g.shape)
        base = lp_norm(Field(g, data), 2)
        assert lp_norm(Field(g, c * data), 2) == pytest.approx(abs(c) * base, abs=1e-12)


class TestSymmetrize:
    def test_symmetric_fixed_point(self):
        T = np.array([[1.0, 2.0], [2.0, 5.0]])
        assert np.array_equal(symmetrize_multiindex(T), T)

    def test_two_permutation_average(self):
        T = np.zeros((2, 2))
        T[0, 1] = 1.0
        S = symmetrize_multiindex(T)
        assert S[0, 1] == 0.5 and S[1, 0] == 0.5

    def test_antisymmetric_vanishes(self):
        T = np.array([[0.0, 1.0], [-1.0, 0.0]])
        assert np.all(symmetrize_multiindex(T) == 0.0)

    @given(st.integers(min_value=2, max_value=4), st.integers(min_value=1, max_value=3),
           st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_idempotent_exactly(self, k, d, seed):
        T = np.random.default_rng(seed).standard_normal((d,) * k)
        S = symmetrize_multiindex(T)
        assert np.array_equal(symmetrize_multiindex(S), S)
        # exact invariance under any axis permutation
        assert np.array_equal(np.swapaxes(S, 0, k - 1), S)


class TestMultiIndex:
    @given(st.integers(min_value=1, max_value=3), st.integers(min_value=0, max_value=4),
           st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_roundtrip(self, d, k, seed):
        rng = np.random.default_rng(seed)
        mi = tuple(int(v) for v in rng.integers(1, d + 1, size=k))
        assert decode_multiindex(encode_multiindex(mi, d), k, d) == mi

    def test_enumeration_matches_encoding(self):
        d, k = 3, 2
        for code, mi in enumerate(all_multiindices(k, d)):
            assert encode_multiindex(mi, d) == code


class TestSnapshot:
    def test_roundtrip(self, tmp_path):
        g = make_grid(2, 1.5, 16)
        rng = np.random.default_rng(9)
        f = Field(g, rng.standard_normal((2, 2) + g.shape))
        path = tmp_path / "field.shlb"
        write_snapshot(f, path)
        back = read_snapshot(path)
        assert back.grid == g
        assert np.array_equal(back.data, f.data)

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.shlb"
        path.write_bytes(b"NOPE!" + b"\x00" * 32)
        with pytest.raises(ValueError):
            read_snapshot(path)

    def test_writes_documented_header(self, tmp_path):
        g = make_grid(1, 2.0, 8)
        f = Field(g, np.arange(8.0))
        path = tmp_path / "field.shlb"
        write_snapshot(f, path)
        raw = path.read_bytes()
        assert raw[:5] == b"SHLB1"
        assert raw[5] == 1  # dimension
