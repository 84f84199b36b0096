"""Stationary Gaussian fields by periodized-kernel convolution of white noise.

The synthesis pipeline is ``noise -> kernel convolution -> pointwise map``:
discrete white noise with per-cell variance ``h**-d`` is convolved (circular,
via FFT) with the torus periodization of a smooth convolution-square-root
kernel, and the resulting Gaussian field is mapped through a fixed sigmoid
family into a uniformly elliptic coefficient field.

Randomness comes from a counter-based Philox generator keyed by
``(root_seed, stream)``; independent samples use independent streams, which
makes Monte-Carlo campaigns embarrassingly parallel and bit-deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from shl import _spectral as sp
from shl.grid import Field, TorusGrid

__all__ = [
    "KernelTooWideError",
    "KernelSpec",
    "WhiteNoise",
    "CoefficientField",
    "noise_stream",
    "periodize_kernel",
    "sample_white_noise",
    "sample_gaussian_field",
    "coefficient_from_gaussian",
    "synthesize_coefficient",
]

KERNEL_FAMILIES = ("gaussian-bump", "compact-bump")
COEFF_MAPS = ("scalar-sigmoid", "anisotropic-sigmoid", "skew-sigmoid")


class KernelTooWideError(ValueError):
    """Correlation length too large for the requested torus period."""


@dataclass(frozen=True)
class KernelSpec:
    """Convolution-square-root kernel of the target covariance.

    ``rho`` is the correlation length; ``amplitude`` is the pointwise standard
    deviation of the synthesized Gaussian field (the kernel is rescaled so
    that Var G(x) = amplitude**2 on the sampling grid).
    """

    family: str = "gaussian-bump"
    rho: float = 1.0
    kappa: int = 1
    amplitude: float = 1.0

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not (self.rho > 0):
            raise ValueError("correlation length must be positive")
        if self.kappa < 1:
            raise ValueError("channel count must be >= 1")


@dataclass(frozen=True)
class WhiteNoise:
    """Discrete white noise: iid N(0, h**-d) per cell and channel."""

    grid: TorusGrid
    data: np.ndarray  # (kappa,) + grid.shape, read-only
    seed: int
    stream: int

    @property
    def kappa(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class CoefficientField:
    """Matrix coefficient field with certified ellipticity constant."""

    field: Field  # rank (d, d)
    ellipticity: float

    @property
    def grid(self) -> TorusGrid:
        return self.field.grid

    @property
    def data(self) -> np.ndarray:
        return self.field.data

    def ellipticity_audit(self, n_vectors: int = 32, seed: int = 0) -> tuple[float, float]:
        """Sampled Rayleigh-quotient range ``(min e.ae/|e|^2, max |ae|/|e|)``."""
        rng = np.random.default_rng(seed)
        d = self.grid.d
        vecs = rng.standard_normal((n_vectors, d))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        a = self.data
        rmin, gmax = math.inf, 0.0
        for e in vecs:
            ae = np.einsum("ab...,b->a...", a, e)
            rmin = min(rmin, float(np.einsum("a...,a->...", ae, e).min()))
            gmax = max(gmax, float(np.sqrt(np.sum(ae**2, axis=0)).max()))
        return rmin, gmax


def noise_stream(root_seed: int, stream: int) -> np.random.Generator:
    """Counter-based splittable generator for the given (seed, stream) pair."""
    key = np.array([root_seed % (1 << 64), stream % (1 << 64)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def _kernel_profile(family: str, rsq: np.ndarray, rho: float) -> np.ndarray:
    if family == "gaussian-bump":
        return np.exp(-0.5 * rsq / rho**2)
    # C-infinity bump supported in |x| < rho
    out = np.zeros_like(rsq)
    inside = rsq < rho**2
    t = rsq[inside] / rho**2
    out[inside] = np.exp(-1.0 / (1.0 - t))
    return out


def periodize_kernel(spec: KernelSpec, grid: TorusGrid) -> Field:
    """Torus periodization of the kernel, wrap-summed over image shifts.

    Shells of images are added until the added mass falls below 1e-14 of the
    accumulated total.  The result is normalized so that the synthesized
    Gaussian field has pointwise variance ``amplitude**2``:
    Var G(x) = sum_y kern(y)^2 h^d.
    """
    if spec.rho > grid.L / 8:
        raise KernelTooWideError(
            f"correlation length {spec.rho} exceeds L/8 = {grid.L / 8}"
        )
    coords = grid.coords()
    total = np.zeros(grid.shape)
    shell = 0
    while True:
        added = np.zeros(grid.shape)
        offsets = _shell_offsets(grid.d, shell)
        if not offsets:
            break
        for off in offsets:
            rsq = np.zeros(grid.shape)
            for axis in range(grid.d):
                rsq = rsq + (coords[axis] + off[axis] * grid.L - grid.L / 2) ** 2
            added = added + _kernel_profile(spec.family, rsq, spec.rho)
        total = total + added
        mass_added = float(np.abs(added).sum())
        mass_total = float(np.abs(total).sum())
        if shell >= 1 and mass_added <= 1e-14 * mass_total:
            break
        shell += 1
    # kernel is built centered at L/2; roll so the peak sits at the origin cell
    total = np.roll(total, shift=(-grid.N // 2,) * grid.d, axis=tuple(range(grid.d)))
    norm = math.sqrt(float(np.sum(total**2)) * grid.cell_volume)
    return Field(grid, total * (spec.amplitude / norm))


def _shell_offsets(d: int, shell: int) -> list[tuple[int, ...]]:
    """Integer offsets with sup-norm exactly ``shell``."""
    import itertools

    if shell == 0:
        return [(0,) * d]
    out = []
    for off in itertools.product(range(-shell, shell + 1), repeat=d):
        if max(abs(o) for o in off) == shell:
            out.append(off)
    return out


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample_white_noise(grid: TorusGrid, kappa: int, stream: np.random.Generator,
                       seed: int = -1, stream_id: int = -1) -> WhiteNoise:
    """Draw iid N(0, h**-d) noise; bit-deterministic given the generator state."""
    scale = grid.h ** (-grid.d / 2.0)
    data = stream.standard_normal((kappa,) + grid.shape) * scale
    data.flags.writeable = False
    return WhiteNoise(grid=grid, data=data, seed=seed, stream=stream_id)


def sample_gaussian_field(kernel: Field, noise: WhiteNoise) -> Field:
    """Stationary Gaussian field ``G = kernel (*) noise`` (circular convolution).

    The convolution is the Riemann-sum discretization of the continuum
    convolution, hence the ``h**d`` scaling.
    """
    grid = kernel.grid
    if noise.grid != grid:
        raise ValueError("kernel and noise live on different grids")
    kspec = sp.fwd(grid, kernel.data)
    out = sp.inv(grid, kspec * sp.fwd(grid, noise.data)) * grid.cell_volume
    return Field(grid, out)


def _sigmoid(t: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(t))


def coefficient_from_gaussian(G: Field, lam: float, map_name: str = "scalar-sigmoid") -> CoefficientField:
    """Map a Gaussian field to an admissible coefficient field.

    Families (all bounded, C^1, with eigenvalue/Rayleigh bounds [lam, 1] built
    in):

    * ``scalar-sigmoid``      -- ``(lam + (1-lam) s(G_1)) Id`` with
      ``s(t) = (1 + tanh t)/2``;
    * ``anisotropic-sigmoid`` -- diagonal, channel-wise sigmoids (needs
      ``kappa >= d`` channels);
    * ``skew-sigmoid``        -- symmetric sigmoid part plus a skew part
      driven by the second channel, ``alpha Id + beta J`` with
      ``sup(alpha^2 + beta^2) <= 1`` (needs ``kappa >= 2``); this family has a
      genuinely nonsymmetric pointwise matrix, giving nonvanishing
      even-order effective tensors.
    """
    if not (0 < lam < 1):
        raise ValueError(f"ellipticity constant must lie in (0, 1), got {lam}")
    if map_name not in COEFF_MAPS:
        raise ValueError(f"unknown coefficient map {map_name!r}")
    grid = G.grid
    d = grid.d
    chans = G.data if len(G.rank) == 1 else G.data[np.newaxis]
    kappa = chans.shape[0]
    a = np.zeros((d, d) + grid.shape)
    if map_name == "scalar-sigmoid":
        diag = lam + (1.0 - lam) * _sigmoid(chans[0])
        for i in range(d):
            a[i, i] = diag
    elif map_name == "anisotropic-sigmoid":
        if kappa < d:
            raise ValueError("anisotropic-sigmoid needs at least d channels")
        for i in range(d):
            a[i, i] = lam + (1.0 - lam) * _sigmoid(chans[i])
    else:  # skew-sigmoid
        if kappa < 2:
            raise ValueError("skew-sigmoid needs at least 2 channels")
        alpha_sup = 0.5 * (1.0 + lam)
        beta_sup = 0.95 * math.sqrt(1.0 - alpha_sup**2)
        diag = lam + (alpha_sup - lam) * _sigmoid(chans[0])
        skew = beta_sup * np.tanh(chans[1])
        for i in range(d):
            a[i, i] = diag
        if d >= 2:
            a[0, 1] = skew
            a[1, 0] = -skew
    return CoefficientField(field=Field(grid, a), ellipticity=lam)


def synthesize_coefficient(grid: TorusGrid, spec: KernelSpec, lam: float,
                           map_name: str, root_seed: int, stream: int) -> CoefficientField:
    """One-call pipeline: noise -> Gaussian field -> coefficient field."""
    kern = periodize_kernel(spec, grid)
    gen = noise_stream(root_seed, stream)
    noise = sample_white_noise(grid, spec.kappa, gen, seed=root_seed, stream_id=stream)
    G = sample_gaussian_field(kern, noise)
    return coefficient_from_gaussian(G, lam, map_name)
