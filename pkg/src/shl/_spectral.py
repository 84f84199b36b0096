"""Fourier-multiplier calculus on the torus lattice.

All derivatives are exact multipliers ``i*k`` in the rfft layout.  The Nyquist
plane of every axis is zeroed in the first-derivative multipliers so that the
discrete gradient is exactly skew-adjoint on the real lattice; the Laplacian
symbol is assembled from the same multipliers, which keeps ``div grad == lap``
an exact operator identity.  Solution potentials are anchored by a vanishing
lattice mean (zero mode dropped).

Functions accept raw arrays whose *last* ``d`` axes are the lattice; leading
axes are treated as component batches.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from shl.grid import TorusGrid


def _spatial_axes(grid: TorusGrid, arr: np.ndarray) -> tuple[int, ...]:
    return tuple(range(arr.ndim - grid.d, arr.ndim))


def fwd(grid: TorusGrid, arr: np.ndarray) -> np.ndarray:
    """Real FFT over the lattice axes."""
    return np.fft.rfftn(arr, axes=_spatial_axes(grid, arr))


def inv(grid: TorusGrid, spec: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fwd`; always returns the full real lattice."""
    axes = tuple(range(spec.ndim - grid.d, spec.ndim))
    return np.fft.irfftn(spec, s=grid.shape, axes=axes)


@lru_cache(maxsize=64)
def wavevectors(grid: TorusGrid) -> tuple[np.ndarray, ...]:
    """Angular wavenumber arrays (broadcastable, rfft layout, Nyquist zeroed)."""
    N, d, h = grid.N, grid.d, grid.h
    full = 2.0 * np.pi * np.fft.fftfreq(N, d=h)
    full[N // 2] = 0.0
    half = 2.0 * np.pi * np.fft.rfftfreq(N, d=h)
    half[-1] = 0.0
    out = []
    for axis in range(d):
        k = half if axis == d - 1 else full
        shape = [1] * d
        shape[axis] = k.size
        arr = k.reshape(shape).copy()
        arr.flags.writeable = False
        out.append(arr)
    return tuple(out)


@lru_cache(maxsize=64)
def lap_symbol(grid: TorusGrid) -> np.ndarray:
    """Symbol of ``-lap`` (nonnegative), consistent with the gradient."""
    ks = wavevectors(grid)
    sym = np.zeros(np.broadcast_shapes(*(k.shape for k in ks)))
    for k in ks:
        sym = sym + k**2
    sym.flags.writeable = False
    return sym


@lru_cache(maxsize=64)
def inv_lap_symbol(grid: TorusGrid) -> np.ndarray:
    """Symbol of ``(-lap)^{-1}`` with the kernel modes dropped."""
    sym = lap_symbol(grid)
    out = np.zeros_like(sym)
    nz = sym > 0
    out[nz] = 1.0 / sym[nz]
    out.flags.writeable = False
    return out


def grad(grid: TorusGrid, u: np.ndarray) -> np.ndarray:
    """Spectral gradient; the new component axis is prepended."""
    spec = fwd(grid, u)
    ks = wavevectors(grid)
    return np.stack([inv(grid, 1j * k * spec) for k in ks], axis=0)


def grad_from_spec(grid: TorusGrid, spec: np.ndarray) -> np.ndarray:
    ks = wavevectors(grid)
    return np.stack([inv(grid, 1j * k * spec) for k in ks], axis=0)


def div(grid: TorusGrid, v: np.ndarray) -> np.ndarray:
    """Spectral divergence of a vector field with component axis first."""
    return inv(grid, div_spec(grid, v))


def div_spec(grid: TorusGrid, v: np.ndarray) -> np.ndarray:
    """Fourier transform of the divergence (component axis first)."""
    spec = fwd(grid, v)
    ks = wavevectors(grid)
    out = 1j * ks[0] * spec[0]
    for a in range(1, grid.d):
        out = out + 1j * ks[a] * spec[a]
    return out


def deriv_stack(grid: TorusGrid, u: np.ndarray, order: int) -> np.ndarray:
    """Stack of all partial derivatives of total order ``order``.

    Returns an array of shape ``(d,)*order + u.shape``; axis ``j`` carries the
    direction of the j-th derivative (the stack is symmetric under axis
    permutations since multipliers commute).
    """
    out = u
    for _ in range(order):
        out = grad(grid, out)
    # grad prepends axes, so axes arrive in reverse application order; the
    # stack is symmetric, no transpose needed.
    return out


def gradient_part(grid: TorusGrid, v: np.ndarray) -> np.ndarray:
    """L2-orthogonal projection of a vector field onto gradients (Helmholtz).

    In Fourier: ``P v = k (k . vhat) / |k|^2`` with kernel modes dropped.
    """
    spec = fwd(grid, v)
    ks = wavevectors(grid)
    kdot = ks[0] * spec[0]
    for a in range(1, grid.d):
        kdot = kdot + ks[a] * spec[a]
    kdot = kdot * inv_lap_symbol(grid)
    return np.stack([inv(grid, k * kdot) for k in ks], axis=0)


def potential_from_gradient(grid: TorusGrid, v: np.ndarray) -> np.ndarray:
    """Mean-free scalar potential of a (curl-free) vector field."""
    spec = fwd(grid, v)
    ks = wavevectors(grid)
    kdot = ks[0] * spec[0]
    for a in range(1, grid.d):
        kdot = kdot + ks[a] * spec[a]
    return inv(grid, -1j * inv_lap_symbol(grid) * kdot)


def antiderivative_1d(grid: TorusGrid, g: np.ndarray) -> np.ndarray:
    """Mean-free spectral antiderivative of a mean-free 1D lattice function."""
    if grid.d != 1:
        raise ValueError("antiderivative_1d requires d = 1")
    spec = fwd(grid, g)
    k = wavevectors(grid)[0]
    out = np.zeros_like(spec)
    nz = np.abs(k) > 0
    out[nz] = spec[nz] / (1j * k[nz])
    return inv(grid, out)


def curl_norm(grid: TorusGrid, v: np.ndarray) -> float:
    """L2 norm of the discrete curl (0 for d = 1)."""
    if grid.d == 1:
        return 0.0
    spec = fwd(grid, v)
    ks = wavevectors(grid)
    total = 0.0
    for i in range(grid.d):
        for j in range(i + 1, grid.d):
            c = inv(grid, 1j * ks[i] * spec[j] - 1j * ks[j] * spec[i])
            total += float(np.sum(c**2))
    return float(np.sqrt(total * grid.cell_volume))


def dealias_mask(grid: TorusGrid) -> np.ndarray:
    """2/3-rule low-pass mask in the rfft layout."""
    N, d = grid.N, grid.d
    cut = N // 3
    full = np.abs(np.fft.fftfreq(N) * N) <= cut
    half = np.abs(np.fft.rfftfreq(N) * N) <= cut
    mask = np.ones((1,) * d, dtype=bool)
    for axis in range(d):
        m = half if axis == d - 1 else full
        shape = [1] * d
        shape[axis] = m.size
        mask = mask & m.reshape(shape)
    return mask
