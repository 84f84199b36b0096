"""Two-scale expansion assembly, the residual identity, and error norms.

Scale coupling: the heterogeneous coefficient is sampled on a micro torus of
period ``1/eps`` in fast variables, which the map ``x -> x/eps`` carries onto
the unit macro torus exactly once.  Micro and macro lattices share the same
point count, so rescaled corrector data aligns with the macro lattice without
interpolation; only the Fourier-multiplier scaling differs between the two
grids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from shl import _spectral as sp
from shl.grid import Field, TorusGrid, local_quadratic_average, lp_norm
from shl.correctors import CorrectorHierarchy
from shl.ellsolve import helmholtz_gradient_part
from shl.homogenized import HomogProxy, proxy_defect
from shl.randfield import CoefficientField

__all__ = [
    "LatticeMismatchError",
    "TwoScaleExpansion",
    "two_scale_expand",
    "two_scale_residual",
    "error_norm_strong",
    "error_norm_mean",
]


class LatticeMismatchError(ValueError):
    """Micro and macro lattices do not tile consistently."""


@dataclass(frozen=True)
class TwoScaleExpansion:
    """Corrector-weighted expansion of a macro potential and its gradient."""

    order: int
    eps: float
    macro_grid: TorusGrid
    hierarchy: CorrectorHierarchy
    potential: Field  # macro scalar
    gradient: Field   # macro vector


def _check_alignment(h: CorrectorHierarchy, macro: TorusGrid, eps: float) -> None:
    micro = h.grid
    if micro.d != macro.d or micro.N != macro.N:
        raise LatticeMismatchError(
            f"micro lattice {micro.d}d/N={micro.N} does not match macro "
            f"{macro.d}d/N={macro.N}"
        )
    if abs(eps * micro.L - macro.L) > 1e-12 * macro.L:
        raise LatticeMismatchError(
            f"eps * micro period = {eps * micro.L} != macro period {macro.L}"
        )


def two_scale_expand(
    h: CorrectorHierarchy, macro_pot: Field, eps: float, n: int
) -> TwoScaleExpansion:
    """Assemble ``sum_{k<=n} eps^k phi^k(./eps) grad^k w`` and its gradient.

    The gradient is computed by the product rule: exact Fourier derivatives
    of the macro potential combined with the precomputed micro-gradient of
    each corrector (rescaled by ``1/eps`` through the weights).
    """
    macro = macro_pot.grid
    if macro_pot.rank != ():
        raise ValueError("macro potential must be a scalar field")
    if n < 0 or n > h.order:
        raise ValueError(f"expansion order {n} outside 0..{h.order}")
    _check_alignment(h, macro, eps)
    d, shape = macro.d, macro.shape

    pot = macro_pot.data.copy()
    grad = sp.grad(macro, macro_pot.data)
    stacks = {k: sp.deriv_stack(macro, macro_pot.data, k) for k in range(1, n + 2)}
    for k in range(1, n + 1):
        phik = h.corrector(k).data.reshape((d**k,) + shape)
        gphik = h.corrector_grad(k).data.reshape((d**k, d) + shape)
        dk = stacks[k].reshape((d**k,) + shape)
        dk1 = stacks[k + 1].reshape((d**k, d) + shape)
        pot = pot + eps**k * np.einsum("m...,m...->...", phik, dk)
        grad = grad + eps ** (k - 1) * np.einsum("ma...,m...->a...", gphik, dk)
        grad = grad + eps**k * np.einsum("m...,ma...->a...", phik, dk1)
    return TwoScaleExpansion(
        order=n,
        eps=eps,
        macro_grid=macro,
        hierarchy=h,
        potential=Field(macro, pot),
        gradient=Field(macro, grad),
    )


def two_scale_residual(
    a: CoefficientField,
    u_grad: Field,
    expansion: TwoScaleExpansion,
    proxy: HomogProxy,
    tensors,
) -> tuple[Field, Field, float]:
    """Evaluate both divergence-form sides of the expansion-error identity.

    LHS flux: ``a(./eps) grad(u - F^n[U])``; RHS flux: triangular-tensor
    defect plus ``eps^n (a phi^n - sigma^n)(./eps) grad grad^n U``.  The two
    have opposite divergences, so the mismatch is the norm of the sum of
    their Helmholtz projections, relative to their size.
    """
    macro = expansion.macro_grid
    h = expansion.hierarchy
    n = expansion.order
    d, shape = macro.d, macro.shape
    if u_grad.grid != macro or proxy.grid != macro:
        raise LatticeMismatchError("solution and proxy must live on the macro lattice")

    lhs = np.einsum(
        "ab...,b...->a...", a.data, u_grad.data - expansion.gradient.data
    )

    rhs = proxy_defect(proxy, tensors).data.copy()
    phin = h.corrector(n).data.reshape((d**n,) + shape)
    sign = h.flux_corrector(n).data.reshape((d**n, d, d) + shape)
    dn1 = sp.deriv_stack(macro, proxy.potential.data, n + 1).reshape((d**n, d) + shape)
    aphi = np.einsum("ab...,m...->mab...", a.data, phin)
    rhs = rhs + expansion.eps**n * np.einsum("mab...,mb...->a...", aphi - sign, dn1)

    p_lhs = helmholtz_gradient_part(Field(macro, lhs))
    p_rhs = helmholtz_gradient_part(Field(macro, rhs))
    num = lp_norm(Field(macro, p_lhs.data + p_rhs.data), 2)
    den = max(lp_norm(p_lhs, 2), lp_norm(p_rhs, 2))
    mismatch = num / den if den > 0 else 0.0
    return Field(macro, lhs), Field(macro, rhs), mismatch


def error_norm_strong(u_grad: Field, expansion: TwoScaleExpansion) -> float:
    """L2 norm of the locally averaged two-scale defect, per realization.

    Uses the unit-scale local quadratic average, clamped to the half-period
    on small tori.
    """
    grid = u_grad.grid
    diff = Field(grid, u_grad.data - expansion.gradient.data)
    radius = min(1.0, grid.L / 2)
    return lp_norm(local_quadratic_average(diff, radius), 2)


def error_norm_mean(mean_grad: Field, proxy_grad: Field, eps: float, p: float) -> float:
    """``|| [mean field - proxy]_{2;eps} ||_{L^p}`` on the macro torus."""
    grid = mean_grad.grid
    if proxy_grad.grid != grid:
        raise LatticeMismatchError("fields live on different grids")
    diff = Field(grid, mean_grad.data - proxy_grad.data)
    radius = min(eps, grid.L / 2)
    return lp_norm(local_quadratic_average(diff, radius), p)
