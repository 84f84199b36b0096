"""Periodized corrector hierarchy and higher-order effective tensors.

Order ``n`` of the hierarchy consists of, per multi-index ``(i_1..i_n)``:

* corrector ``phi^n``        -- zero-mean scalar potential solving
  ``-div(a grad phi^n) = div((a phi^{n-1} - sigma^{n-1}) e_{i_n})``;
* effective tensor ``abar^n`` -- lattice average of
  ``a (grad phi^n + phi^{n-1} e_{i_n})``;
* flux ``q^n``               -- ``a grad phi^n + (a phi^{n-1} - sigma^{n-1}) e_{i_n}
  - abar^n e_{i_n}`` (zero mean, divergence-free to solver tolerance);
* flux corrector ``sigma^n``  -- zero-mean skew matrix potential with
  ``div sigma^n = q^n``.

Seeds are ``phi^0 = 1`` and ``sigma^0 = 0``.  Expectations are realized as
single-realization lattice averages over the torus; ensemble averaging is
layered on top by the experiments module.

Tensor layout: ``tensor(k)`` has shape ``(d,)*(k-1) + (d, d)`` with axes
``(i_1..i_{k-1}, row, i_k)``, i.e. ``tensor(k)[mi][:, i_k]`` is the vector
``abar^k_{mi} e_{i_k}``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from shl import _spectral as sp
from shl.grid import Field, TorusGrid, symmetrize_multiindex, write_snapshot
from shl.ellsolve import (
    SolveOptions,
    SolveReport,
    divergence_fraction,
    solve_divform_variable,
    solve_flux_corrector,
)
from shl.randfield import CoefficientField

__all__ = [
    "OrderSlice",
    "CorrectorHierarchy",
    "compute_corrector_order",
    "compute_hierarchy",
    "effective_tensor_symmetrized",
    "flux_divergence_audit",
    "export_hierarchy",
]


@dataclass(frozen=True)
class OrderSlice:
    """All order-``n`` objects of the hierarchy."""

    order: int
    corrector: Field        # rank (d,)*n, scalar family
    corrector_grad: Field   # rank (d,)*n + (d,)
    flux: Field             # rank (d,)*n + (d,)
    flux_corrector: Field   # rank (d,)*n + (d, d), skew
    tensor: np.ndarray      # shape (d,)*(n-1) + (d, d)
    reports: dict[tuple[int, ...], SolveReport]


@dataclass(frozen=True)
class CorrectorHierarchy:
    coeff: CoefficientField
    orders: tuple[OrderSlice, ...]

    @property
    def grid(self) -> TorusGrid:
        return self.coeff.grid

    @property
    def order(self) -> int:
        return len(self.orders)

    def slice(self, n: int) -> OrderSlice:
        if not 1 <= n <= self.order:
            raise ValueError(f"order {n} outside 1..{self.order}")
        return self.orders[n - 1]

    def corrector(self, n: int) -> Field:
        """phi^n; order 0 returns the constant-1 seed."""
        if n == 0:
            return Field(self.grid, np.ones(self.grid.shape))
        return self.slice(n).corrector

    def corrector_grad(self, n: int) -> Field:
        if n == 0:
            return Field.zeros(self.grid, (self.grid.d,))
        return self.slice(n).corrector_grad

    def flux(self, n: int) -> Field:
        return self.slice(n).flux

    def flux_corrector(self, n: int) -> Field:
        if n == 0:
            return Field.zeros(self.grid, (self.grid.d, self.grid.d))
        return self.slice(n).flux_corrector

    def tensor(self, n: int) -> np.ndarray:
        return self.slice(n).tensor

    def tensors(self) -> list[np.ndarray]:
        """Tensor stack indexed 1..order (position 0 unused)."""
        return [None] + [s.tensor for s in self.orders]


def compute_corrector_order(
    a: CoefficientField,
    prev: OrderSlice | None,
    n: int,
    opts: SolveOptions = SolveOptions(),
) -> OrderSlice:
    """Advance the hierarchy from order ``n-1`` to order ``n``."""
    grid = a.grid
    d = grid.d
    amat = a.data
    if n < 1:
        raise ValueError("order must be >= 1")
    if n == 1:
        phi_prev = np.ones((1,) + grid.shape)
        sig_prev = np.zeros((1, d, d) + grid.shape)
    else:
        if prev is None or prev.order != n - 1:
            raise ValueError(f"order {n} needs the complete order-{n - 1} slice")
        nprev = d ** (n - 1)
        phi_prev = prev.corrector.data.reshape((nprev,) + grid.shape)
        sig_prev = prev.flux_corrector.data.reshape((nprev, d, d) + grid.shape)

    nmi = d**n
    phi = np.zeros((nmi,) + grid.shape)
    gphi = np.zeros((nmi, d) + grid.shape)
    flux = np.zeros((nmi, d) + grid.shape)
    sig = np.zeros((nmi, d, d) + grid.shape)
    tensor = np.zeros((d ** (n - 1), d, d))
    reports: dict[tuple[int, ...], SolveReport] = {}
    sp_axes = tuple(range(1, grid.d + 1))

    for flat, mi in enumerate(itertools.product(range(d), repeat=n)):
        prev_flat = flat // d
        i_n = mi[-1]
        src = amat[:, i_n] * phi_prev[prev_flat] - sig_prev[prev_flat][:, i_n]
        try:
            u, gradu, rep = solve_divform_variable(a, Field(grid, src), opts)
        except Exception as exc:
            exc.args = (f"corrector order {n}, multi-index {tuple(i + 1 for i in mi)}: {exc}",)
            raise
        reports[tuple(i + 1 for i in mi)] = rep
        agrad = np.einsum("ab...,b...->a...", amat, gradu.data)
        col = (agrad + amat[:, i_n] * phi_prev[prev_flat]).mean(axis=sp_axes)
        tensor[prev_flat][:, i_n] = col
        qvec = agrad + src - col.reshape((d,) + (1,) * grid.d)
        flux_scale = float(np.sqrt(np.sum((agrad + src) ** 2)))
        phi[flat] = u.data
        gphi[flat] = gradu.data
        flux[flat] = qvec
        sig[flat] = solve_flux_corrector(Field(grid, qvec), scale=flux_scale).data

    mi_shape = (d,) * n
    prev_shape = (d,) * (n - 1)
    return OrderSlice(
        order=n,
        corrector=Field(grid, phi.reshape(mi_shape + grid.shape)),
        corrector_grad=Field(grid, gphi.reshape(mi_shape + (d,) + grid.shape)),
        flux=Field(grid, flux.reshape(mi_shape + (d,) + grid.shape)),
        flux_corrector=Field(grid, sig.reshape(mi_shape + (d, d) + grid.shape)),
        tensor=tensor.reshape(prev_shape + (d, d)),
        reports=reports,
    )


def compute_hierarchy(
    a: CoefficientField, n_max: int, opts: SolveOptions = SolveOptions()
) -> CorrectorHierarchy:
    """Full hierarchy to order ``n_max`` (capped at 4: memory grows as d^n)."""
    if not 1 <= n_max <= 4:
        raise ValueError(f"hierarchy order must lie in 1..4, got {n_max}")
    orders = []
    prev = None
    for n in range(1, n_max + 1):
        prev = compute_corrector_order(a, prev, n, opts)
        orders.append(prev)
    return CorrectorHierarchy(coeff=a, orders=tuple(orders))


def effective_tensor_symmetrized(h: CorrectorHierarchy, n: int) -> np.ndarray:
    """Odd-order effective tensor from the quadratic corrector formula.

    For ``n = 2m + 1`` the entry with free indices ``(i_1..i_{n-1}; j, i_n)``
    is the lattice average of

        (-1)^(m+1) [ grad phi^{m+1}_{j, i_n..i_{m+2}} . a grad phi^{m+1}_{i_1..i_{m+1}}
                     - phi^m_{j, i_n..i_{m+3}} phi^m_{i_1..i_m} (e_{i_{m+2}} . a e_{i_{m+1}}) ]

    and its index symmetrization agrees with that of the directly averaged
    tensor.  Only correctors of order <= m+1 enter.
    """
    if n % 2 != 1:
        raise ValueError(f"quadratic tensor formula applies to odd orders, got {n}")
    m = (n - 1) // 2
    if m + 1 > h.order:
        raise ValueError(f"order-{n} formula needs correctors to order {m + 1}")
    grid = h.grid
    d = grid.d
    amat = h.coeff.data
    gphi = h.corrector_grad(m + 1).data  # (d,)*(m+1) + (d,) + shape
    phim = h.corrector(m).data           # (d,)*m + shape
    sign = float((-1) ** (m + 1))
    out = np.zeros((d,) * (n - 1) + (d, d))
    sp_axes = tuple(range(-grid.d, 0))
    for idx in itertools.product(range(d), repeat=n + 1):
        # idx = (i_1, ..., i_n, j)
        i = idx[:n]
        j = idx[n]
        left_g = (j,) + tuple(reversed(i[m + 1 : n]))   # (j, i_n, ..., i_{m+2})
        right_g = i[: m + 1]                            # (i_1, ..., i_{m+1})
        term1 = np.einsum(
            "a...,ab...,b...->...", gphi[left_g], amat, gphi[right_g]
        ).mean(axis=sp_axes)
        if m == 0:
            term2 = amat[j, i[0]].mean(axis=sp_axes)
        else:
            left_p = (j,) + tuple(reversed(i[m + 2 : n]))  # (j, i_n, ..., i_{m+3})
            right_p = i[:m]
            term2 = (
                phim[left_p] * phim[right_p] * amat[i[m + 1], i[m]]
            ).mean(axis=sp_axes)
        out[i[: n - 1] + (j, i[n - 1])] = sign * (term1 - term2)
    return out


def flux_divergence_audit(h: CorrectorHierarchy) -> list[dict]:
    """Per-order table of relative flux divergences (read-only check).

    The residual is the fraction of each flux component's L2 mass lying in
    the gradient sector (an H^-1-type relative divergence).
    """
    table = []
    d = h.grid.d
    for s in h.orders:
        worst = 0.0
        worst_mi = 0
        flat = s.flux.data.reshape((d**s.order, d) + h.grid.shape)
        tflat = s.tensor.reshape((d ** (s.order - 1), d, d))
        for code in range(flat.shape[0]):
            col = tflat[code // d][:, code % d].reshape((d,) + (1,) * h.grid.d)
            scale = float(np.sqrt(np.sum((flat[code] + col) ** 2)))
            frac = divergence_fraction(Field(h.grid, flat[code]), scale)
            if frac >= worst:
                worst = frac
                worst_mi = code
        mi = tuple(np.unravel_index(worst_mi, (d,) * s.order))
        table.append(
            {
                "order": s.order,
                "max_rel_divergence": worst,
                "worst_multiindex": tuple(int(i) + 1 for i in mi),
            }
        )
    return table


def export_hierarchy(h: CorrectorHierarchy, directory) -> Path:
    """Write the hierarchy as SHLB1 snapshots plus a manifest.

    Tensors are embedded in the manifest as full-precision decimal strings.
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"order": h.order, "grid": {"d": h.grid.d, "L": h.grid.L, "N": h.grid.N}, "orders": []}
    for s in h.orders:
        entry = {"order": s.order, "files": {}, "tensor": _tensor_to_decimal(s.tensor)}
        for name, fld in (
            ("corrector", s.corrector),
            ("corrector_grad", s.corrector_grad),
            ("flux", s.flux),
            ("flux_corrector", s.flux_corrector),
        ):
            fname = f"order{s.order}_{name}.shlb"
            write_snapshot(fld, root / fname)
            entry["files"][name] = fname
        manifest["orders"].append(entry)
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return root


def _tensor_to_decimal(t: np.ndarray):
    if t.ndim == 0:
        return format(float(t), ".17g")
    return [_tensor_to_decimal(x) for x in t]
