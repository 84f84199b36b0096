import numpy as np
import pytest

from shl.grid import Field, lp_norm, make_grid
from shl.randfield import (
    CoefficientField,
    KernelSpec,
    KernelTooWideError,
    coefficient_from_gaussian,
    noise_stream,
    periodize_kernel,
    sample_gaussian_field,
    sample_white_noise,
    synthesize_coefficient,
)


class TestPeriodizeKernel:
    def test_compact_bump_single_wrap_term(self):
        # support radius < L/2: the wrap sum reduces to the direct image sum
        g = make_grid(1, 16.0, 256)
        spec = KernelSpec(family="compact-bump", rho=1.5)
        kern = periodize_kernel(spec, g).data
        x = g.axis_coords()
        folded = np.minimum(x, g.L - x)
        direct = np.zeros_like(x)
        inside = folded < spec.rho
        direct[inside] = np.exp(-1.0 / (1.0 - (folded[inside] / spec.rho) ** 2))
        direct *= kern.max() / direct.max()
        assert np.max(np.abs(kern - direct)) < 1e-12 * kern.max()

    def test_gaussian_mass_equals_image_sum_mass(self):
        # rearrangement: torus mass of the periodization equals the lattice
        # image-sum mass of the raw kernel, computed independently here
        g = make_grid(1, 8.0, 128)
        spec = KernelSpec(family="gaussian-bump", rho=1.0)
        kern = periodize_kernel(spec, g)
        mass = float(kern.data.sum()) * g.cell_volume
        x = g.axis_coords()
        raw = np.zeros_like(x)
        for shift in range(-6, 7):
            raw += np.exp(-0.5 * (x + shift * g.L - g.L / 2) ** 2 / spec.rho**2)
        raw = np.roll(raw, -g.N // 2)
        scale = kern.data.max() / raw.max()
        assert mass == pytest.approx(float(raw.sum()) * scale * g.cell_volume, rel=1e-12)

    def test_variance_normalization(self):
        g = make_grid(2, 8.0, 64)
        kern = periodize_kernel(KernelSpec(rho=1.0, amplitude=1.7), g)
        var = float(np.sum(kern.data**2)) * g.cell_volume
        assert var == pytest.approx(1.7**2, rel=1e-12)

    def test_too_wide_kernel_rejected(self):
        g = make_grid(1, 8.0, 64)
        with pytest.raises(KernelTooWideError):
            periodize_kernel(KernelSpec(rho=8.0), g)


class TestWhiteNoise:
    def test_determinism(self):
        g = make_grid(2, 4.0, 32)
        a = sample_white_noise(g, 2, noise_stream(42, 5))
        b = sample_white_noise(g, 2, noise_stream(42, 5))
        assert np.array_equal(a.data, b.data)
        c = sample_white_noise(g, 2, noise_stream(42, 6))
        assert not np.array_equal(a.data, c.data)

    def test_mean_within_clt_band(self):
        # CLT oracle: mean of n iid N(0, h^-d) values is within 4 standard errors
        g = make_grid(1, 1.0, 1024)
        reps = 1000
        vals = np.concatenate(
            [sample_white_noise(g, 1, noise_stream(0, j)).data.ravel() for j in range(reps)]
        )
        n = vals.size
        se = g.h ** (-0.5) / np.sqrt(n)
        assert abs(vals.mean()) < 4 * se

    def test_pairing_variance_matches_l2_norm(self):
        # Monte-Carlo oracle: Var(sum t xi h^d) ~ ||t||_L2^2 for a ball indicator
        g = make_grid(1, 8.0, 256)
        t = (g.min_image_dist() <= 1.0).astype(float)
        t_norm_sq = float(np.sum(t**2)) * g.cell_volume
        samples = 200
        pair = np.array(
            [
                float(np.sum(t * sample_white_noise(g, 1, noise_stream(2, j)).data[0]))
                * g.cell_volume
                for j in range(samples)
            ]
        )
        assert pair.var(ddof=1) == pytest.approx(t_norm_sq, rel=0.05)


class TestGaussianField:
    def test_zero_noise_gives_zero_field(self):
        g = make_grid(2, 8.0, 32)
        kern = periodize_kernel(KernelSpec(rho=1.0), g)
        noise = sample_white_noise(g, 1, noise_stream(0, 0))
        zero = type(noise)(grid=g, data=np.zeros_like(noise.data), seed=0, stream=0)
        out = sample_gaussian_field(kern, zero)
        assert np.max(np.abs(out.data)) == 0.0

    def test_pointwise_variance_parseval(self):
        # discrete Parseval oracle: Var G(x) = sum kern^2 h^d
        g = make_grid(1, 16.0, 256)
        kern = periodize_kernel(KernelSpec(rho=1.0), g)
        target = float(np.sum(kern.data**2)) * g.cell_volume
        samples = 500
        vals = np.stack(
            [
                sample_gaussian_field(kern, sample_white_noise(g, 1, noise_stream(3, j))).data[0]
                for j in range(samples)
            ]
        )
        assert float(vals.var()) == pytest.approx(target, rel=0.05)

    def test_covariance_at_lag_matches_kernel_autocorrelation(self):
        g = make_grid(1, 16.0, 128)
        kern = periodize_kernel(KernelSpec(rho=1.0), g)
        lag = 8
        # oracle: E G(x) G(x+lag) = (kern (*) kern)(lag) h^d
        k = kern.data
        target = float(np.sum(k * np.roll(k, -lag))) * g.cell_volume
        samples = 400
        prods = []
        for j in range(samples):
            G = sample_gaussian_field(kern, sample_white_noise(g, 1, noise_stream(11, j))).data[0]
            prods.append(float((G * np.roll(G, -lag)).mean()))
        prods = np.array(prods)
        se = prods.std(ddof=1) / np.sqrt(samples)
        assert abs(prods.mean() - target) < 3 * se

    def test_shift_equivariance(self):
        # lattice-shift of the noise produces the lattice-shifted field
        g = make_grid(2, 8.0, 32)
        kern = periodize_kernel(KernelSpec(rho=1.0), g)
        noise = sample_white_noise(g, 1, noise_stream(5, 1))
        shifted = type(noise)(
            grid=g, data=np.roll(noise.data, (3, -2), axis=(1, 2)), seed=0, stream=0
        )
        a = sample_gaussian_field(kern, shifted).data
        b = np.roll(sample_gaussian_field(kern, noise).data, (3, -2), axis=(1, 2))
        scale = np.max(np.abs(b))
        assert np.max(np.abs(a - b)) < 1e-13 * scale


class TestCoefficientMaps:
    def test_zero_field_midpoint(self):
        g = make_grid(2, 4.0, 16)
        G = Field(g, np.zeros((1,) + g.shape))
        a = coefficient_from_gaussian(G, 0.3, "scalar-sigmoid")
        assert np.allclose(a.data[0, 0], 0.65)
        assert np.allclose(a.data[0, 1], 0.0)

    def test_sigmoid_clamps_at_identity(self):
        g = make_grid(1, 4.0, 16)
        G = Field(g, np.full((1,) + g.shape, 50.0))
        a = coefficient_from_gaussian(G, 0.3, "scalar-sigmoid")
        assert np.all(a.data[0, 0] <= 1.0)
        assert np.allclose(a.data[0, 0], 1.0, atol=1e-12)

    @pytest.mark.parametrize("map_name,kappa", [
        ("scalar-sigmoid", 1), ("anisotropic-sigmoid", 2), ("skew-sigmoid", 2),
    ])
    def test_ellipticity_audit(self, map_name, kappa):
        g = make_grid(2, 8.0, 32)
        a = synthesize_coefficient(g, KernelSpec(rho=1.0, kappa=kappa), 0.25, map_name, 3, 1)
        rmin, gmax = a.ellipticity_audit(n_vectors=100)
        assert rmin >= 0.25 - 1e-12
        assert gmax <= 1.0 + 1e-12

    def test_rejects_bad_ellipticity(self):
        g = make_grid(1, 4.0, 16)
        G = Field(g, np.zeros((1,) + g.shape))
        for lam in (0.0, 1.0, 1.5):
            with pytest.raises(ValueError):
                coefficient_from_gaussian(G, lam)

    def test_coefficient_determinism(self):
        g = make_grid(2, 8.0, 32)
        a = synthesize_coefficient(g, KernelSpec(rho=1.0), 0.25, "scalar-sigmoid", 9, 4)
        b = synthesize_coefficient(g, KernelSpec(rho=1.0), 0.25, "scalar-sigmoid", 9, 4)
        assert a.data.tobytes() == b.data.tobytes()
