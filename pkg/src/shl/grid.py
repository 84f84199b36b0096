"""Torus discretization, lattice fields with tensor rank, quadrature and norms.

Conventions used throughout the package:

* the torus is ``[0, L)^d`` sampled on a uniform lattice of ``N`` points per
  axis, ``h = L / N``;
* a field of rank ``r`` (a tuple of component dimensions) is stored as a
  single float64 array of shape ``r + (N,) * d`` -- components first
  (row-major over the multi-index), lattice last (row-major);
* quadrature is the midpoint rule, ``h**d`` per cell.
"""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "NonPowerOfTwoError",
    "TorusGrid",
    "Field",
    "make_grid",
    "local_quadratic_average",
    "lp_norm",
    "symmetrize_multiindex",
    "all_multiindices",
    "encode_multiindex",
    "decode_multiindex",
    "write_snapshot",
    "read_snapshot",
]

SNAPSHOT_MAGIC = b"SHLB1"


class NonPowerOfTwoError(ValueError):
    """Raised when a lattice resolution is not a power of two."""


@dataclass(frozen=True)
class TorusGrid:
    """Cubic torus of period ``L`` per axis, ``N`` lattice points per axis."""

    d: int
    L: float
    N: int

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.d}")
        if not (self.L > 0):
            raise ValueError(f"period must be positive, got {self.L}")
        if self.N < 4 or (self.N & (self.N - 1)) != 0:
            raise NonPowerOfTwoError(f"N must be a power of two >= 4, got {self.N}")
        object.__setattr__(self, "L", float(self.L))

    @property
    def h(self) -> float:
        # N is a power of two, so h * N == L exactly in binary floating point.
        return self.L / self.N

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d

    @property
    def n_cells(self) -> int:
        return self.N**self.d

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    def axis_coords(self) -> np.ndarray:
        """Cell-center coordinates along one axis."""
        return np.arange(self.N) * self.h

    def coords(self) -> list[np.ndarray]:
        """Broadcastable coordinate arrays, one per axis."""
        x = self.axis_coords()
        out = []
        for axis in range(self.d):
            shape = [1] * self.d
            shape[axis] = self.N
            out.append(x.reshape(shape))
        return out

    def min_image_dist(self) -> np.ndarray:
        """Lattice array of torus distances from the origin cell."""
        x = self.axis_coords()
        folded = np.minimum(x, self.L - x)
        sq = np.zeros(self.shape)
        for axis in range(self.d):
            shape = [1] * self.d
            shape[axis] = self.N
            sq = sq + (folded.reshape(shape)) ** 2
        return np.sqrt(sq)


class Field:
    """Immutable real-valued lattice data of arbitrary tensor rank.

    ``rank`` is the leading shape of ``data``; scalar fields have rank ``()``,
    vectors ``(d,)``, matrices ``(d, d)``, and a family over ``k`` lattice
    indices carries ``k`` leading axes of length ``d``.
    """

    __slots__ = ("grid", "data")

    def __init__(self, grid: TorusGrid, data: np.ndarray):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if arr.ndim < grid.d or arr.shape[arr.ndim - grid.d :] != grid.shape:
            raise ValueError(
                f"data shape {arr.shape} does not end with lattice shape {grid.shape}"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Field is immutable")

    @property
    def rank(self) -> tuple[int, ...]:
        return self.data.shape[: self.data.ndim - self.grid.d]

    @property
    def ncomp(self) -> int:
        return int(np.prod(self.rank, dtype=np.int64)) if self.rank else 1

    @classmethod
    def zeros(cls, grid: TorusGrid, rank: tuple[int, ...] = ()) -> "Field":
        return cls(grid, np.zeros(tuple(rank) + grid.shape))

    def magnitude(self) -> np.ndarray:
        """Pointwise Euclidean norm over all components."""
        comp_axes = tuple(range(self.data.ndim - self.grid.d))
        if not comp_axes:
            return np.abs(self.data)
        return np.sqrt(np.sum(self.data**2, axis=comp_axes))

    def mean(self) -> np.ndarray:
        """Lattice mean per component."""
        sp_axes = tuple(range(self.data.ndim - self.grid.d, self.data.ndim))
        return self.data.mean(axis=sp_axes)

    def __repr__(self):
        return f"Field(rank={self.rank}, grid=({self.grid.d}, L={self.grid.L}, N={self.grid.N}))"


def make_grid(d: int, L: float, N: int) -> TorusGrid:
    """Construct a torus grid; rejects non-power-of-two N and L <= 0."""
    return TorusGrid(d=d, L=L, N=N)


# ---------------------------------------------------------------------------
# multi-index bookkeeping (indices are 1-based externally, per convention)
# ---------------------------------------------------------------------------


def all_multiindices(k: int, d: int):
    """All ordered multi-indices (i_1, ..., i_k) with entries in 1..d."""
    return itertools.product(range(1, d + 1), repeat=k)


def encode_multiindex(mi: tuple[int, ...], d: int) -> int:
    """Row-major flat position of a 1-based multi-index."""
    code = 0
    for i in mi:
        if not 1 <= i <= d:
            raise ValueError(f"index {i} outside 1..{d}")
        code = code * d + (i - 1)
    return code

def decode_multiindex(code: int, k: int, d: int) -> tuple[int, ...]:
    """Inverse of :func:`encode_multiindex` for a length-k multi-index."""
    if not 0 <= code < d**k:
        raise ValueError(f"code {code} outside range for k={k}, d={d}")
    out = []
    for _ in range(k):
        out.append(code % d + 1)
        code //= d
    return tuple(reversed(out))


# ---------------------------------------------------------------------------
# quadrature, local averages, norms
# ---------------------------------------------------------------------------


def ball_kernel(grid: TorusGrid, radius: float) -> np.ndarray:
    """Normalized lattice indicator of the torus ball of given radius.

    A cell belongs to the ball when its center lies within ``radius`` of the
    ball center; normalization is by the included-cell count, so the kernel
    is an exact partition of unity.
    """
    mask = (grid.min_image_dist() <= radius).astype(np.float64)
    count = mask.sum()
    return mask / count


def local_quadratic_average(g: Field, eps: float) -> Field:
    """Local moving quadratic average at scale ``eps``.

    Returns the scalar field ``x -> (avg over ball B_eps(x) of |g|^2)^(1/2)``,
    computed as a circular convolution of ``|g|^2`` with the normalized ball
    indicator (via FFT), followed by a pointwise square root.  When
    ``eps < h`` the ball degenerates to the center cell and the result is
    ``|g|`` pointwise.
    """
    grid = g.grid
    if not (0 < eps <= grid.L / 2):
        raise ValueError(f"averaging scale must satisfy 0 < eps <= L/2, got {eps}")
    if len(g.rank) > 1:
        raise ValueError("local_quadratic_average expects scalar or vector rank")
    sq = g.magnitude() ** 2
    if eps < grid.h:
        return Field(grid, np.sqrt(sq))
    kern = ball_kernel(grid, eps)
    axes = tuple(range(grid.d))
    conv = np.fft.irfftn(
        np.fft.rfftn(sq, axes=axes) * np.fft.rfftn(kern, axes=axes),
        s=grid.shape,
        axes=axes,
    )
    return Field(grid, np.sqrt(np.maximum(conv, 0.0)))


def lp_norm(g: Field, p: float) -> float:
    """Lattice L^p norm with midpoint quadrature, sup norm for p = inf."""
    if not p >= 1:
        raise ValueError(f"p must satisfy 1 <= p <= inf, got {p}")
    mag = g.magnitude()
    if math.isinf(p):
        return float(mag.max())
    return float((np.sum(mag**p) * g.grid.cell_volume) ** (1.0 / p))


def symmetrize_multiindex(T: np.ndarray) -> np.ndarray:
    """Average a constant tensor over all permutations of its indices.

    The average is computed once per index orbit and assigned to every entry
    of the orbit, so the result is exactly permutation-invariant and the
    operation is exactly idempotent.
    """
    T = np.asarray(T, dtype=np.float64)
    k = T.ndim
    if k <= 1:
        return T.copy()
    if len(set(T.shape)) != 1:
        raise ValueError("symmetrization requires equal axis lengths")
    d = T.shape[0]
    out = np.empty_like(T)
    cache: dict[tuple[int, ...], float] = {}
    for idx in itertools.product(range(d), repeat=k):
        canon = tuple(sorted(idx))
        if canon not in cache:
            vals = [float(T[tuple(canon[p] for p in perm)])
                    for perm in itertools.permutations(range(k))]
            # anchored mean: exact when all orbit values coincide
            cache[canon] = vals[0] + math.fsum(v - vals[0] for v in vals) / len(vals)
        out[idx] = cache[canon]
    return out


# ---------------------------------------------------------------------------
# binary snapshot format SHLB1
# ---------------------------------------------------------------------------


def write_snapshot(field: Field, path) -> None:
    """Write a field in the SHLB1 binary format.

    Header: magic ``SHLB1``, uint8 d, float64 L, uint32 N, uint8 rank length,
    uint32 rank dims; payload: float64 little-endian, components row-major
    over the multi-index then row-major over the lattice.
    """
    grid = field.grid
    rank = field.rank
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<Bd I B", grid.d, grid.L, grid.N, len(rank)))
        for dim in rank:
            fh.write(struct.pack("<I", dim))
        fh.write(np.ascontiguousarray(field.data).astype("<f8").tobytes())


def read_snapshot(path) -> Field:
    """Read a field written by :func:`write_snapshot`."""
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != SNAPSHOT_MAGIC:
            raise ValueError(f"bad snapshot magic {magic!r}")
        d, L, N, nrank = struct.unpack("<Bd I B", fh.read(struct.calcsize("<Bd I B")))
        rank = tuple(
            struct.unpack("<I", fh.read(4))[0] for _ in range(nrank)
        )
        grid = TorusGrid(d=d, L=L, N=N)
        count = int(np.prod(rank, dtype=np.int64)) if rank else 1
        count *= grid.n_cells
        data = np.frombuffer(fh.read(count * 8), dtype="<f8", count=count)
        return Field(grid, data.reshape(rank + grid.shape))
