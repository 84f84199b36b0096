"""Higher-order homogenized proxy solutions and the effective constitutive law.

The order-``n`` homogenized equation with dispersive corrections is ill-posed
in general, so only the triangular proxy is ever solved: the leading-order
solve is followed by corrections driven by higher tensors applied to higher
derivatives of lower corrections.  Tensors are index-symmetrized before they
enter any differential operator, since only the symmetrized action matters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from shl import _spectral as sp
from shl.grid import Field, TorusGrid, lp_norm, symmetrize_multiindex
from shl.ellsolve import constant_solution_potential, helmholtz_gradient_part

__all__ = [
    "TildeFields",
    "HomogProxy",
    "symmetrized_tensor_stack",
    "solve_tilde_hierarchy",
    "assemble_proxy",
    "apply_effective_operator",
    "proxy_defect",
    "defect_display_gap",
]


@dataclass(frozen=True)
class TildeFields:
    """Stages of the triangular hierarchy: potentials and gradients, orders 1..n."""

    grid: TorusGrid
    potentials: tuple[Field, ...]
    gradients: tuple[Field, ...]

    @property
    def order(self) -> int:
        return len(self.potentials)

    def potential(self, k: int) -> Field:
        return self.potentials[k - 1]

    def gradient(self, k: int) -> Field:
        return self.gradients[k - 1]


@dataclass(frozen=True)
class HomogProxy:
    """Assembled proxy gradient ``sum_k eps^{k-1} grad u~^k`` and its potential."""

    order: int
    eps: float
    grid: TorusGrid
    stages: TildeFields
    potential: Field
    gradient: Field


def symmetrized_tensor_stack(tensors) -> list:
    """Symmetrize each tensor over all of its axes; index 0 is passed through."""
    out = [None]
    for t in tensors[1:]:
        out.append(symmetrize_multiindex(np.asarray(t)))
    return out


def _contract(tensor: np.ndarray, dstack: np.ndarray, d: int, spatial: tuple) -> np.ndarray:
    """Contract tensor axes (mi, row, col) with a derivative stack (mi, col).

    ``tensor`` has shape (d,)*(k-1) + (d, d); ``dstack`` has shape
    (d,)*(k-1) + (d,) + spatial.  Returns the vector field (d,) + spatial.
    """
    k1 = tensor.ndim - 2
    A = tensor.reshape((d**k1, d, d))
    D = dstack.reshape((d**k1, d) + spatial)
    return np.einsum("mab,mb...->a...", A, D)


def solve_tilde_hierarchy(tensors, f: Field, n: int) -> TildeFields:
    """Inductive constant-coefficient solves of the triangular hierarchy.

    ``tensors[k]`` (k = 1..n) is the order-k effective tensor; stage 1 solves
    ``-div(abar^1 grad u~^1) = div f`` and stage k solves the same operator
    against ``div(sum_{j=2}^k abar^j grad grad^{j-1} u~^{k+1-j})``.
    """
    grid = f.grid
    d = grid.d
    if n < 1 or len(tensors) <= n:
        raise ValueError(f"need tensors for orders 1..{n}")
    ts = symmetrized_tensor_stack(tensors[: n + 1])
    pots, grads = [], []
    pot1, grad1 = constant_solution_potential(ts[1], f)
    pots.append(pot1)
    grads.append(grad1)
    for k in range(2, n + 1):
        rhs = np.zeros((d,) + grid.shape)
        for j in range(2, k + 1):
            stack = sp.deriv_stack(grid, pots[k - j].data, j)
            rhs = rhs + _contract(ts[j], stack, d, grid.shape)
        pot, grad = constant_solution_potential(ts[1], Field(grid, rhs))
        pots.append(pot)
        grads.append(grad)
    return TildeFields(grid=grid, potentials=tuple(pots), gradients=tuple(grads))


def assemble_proxy(stages: TildeFields, eps: float, n: int) -> HomogProxy:
    """Weighted sum ``sum_{k=1}^n eps^{k-1} grad u~^k``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if n > stages.order:
        raise ValueError(f"stages only reach order {stages.order}")
    grid = stages.grid
    pot = np.zeros(grid.shape)
    grad = np.zeros((grid.d,) + grid.shape)
    for k in range(1, n + 1):
        w = eps ** (k - 1)
        pot = pot + w * stages.potential(k).data
        grad = grad + w * stages.gradient(k).data
    return HomogProxy(
        order=n,
        eps=eps,
        grid=grid,
        stages=stages,
        potential=Field(grid, pot),
        gradient=Field(grid, grad),
    )


def apply_effective_operator(tensors, grad_w: Field, eps: float, n: int) -> Field:
    """Dispersive constitutive law ``sum_k eps^{k-1} abar^k grad grad^{k-1} w``.

    ``grad_w`` must be a discrete gradient; higher derivatives are exact
    Fourier multipliers applied to it.
    """
    grid = grad_w.grid
    d = grid.d
    ts = symmetrized_tensor_stack(tensors[: n + 1])
    out = np.zeros((d,) + grid.shape)
    for k in range(1, n + 1):
        stack = grad_w.data if k == 1 else sp.deriv_stack(grid, grad_w.data, k - 1)
        out = out + eps ** (k - 1) * _contract(ts[k], stack, d, grid.shape)
    return Field(grid, out)


def proxy_defect(proxy: HomogProxy, tensors) -> Field:
    """Explicit flux whose divergence is the defect of the proxy.

    Returns ``sum_{k=2}^n sum_{l=n+2-k}^n eps^{k+l-2} abar^k grad grad^{k-1} u~^l``
    (the empty sum at n = 1); its norm is O(eps^n).
    """
    grid = proxy.grid
    d = grid.d
    n = proxy.order
    ts = symmetrized_tensor_stack(tensors[: n + 1])
    out = np.zeros((d,) + grid.shape)
    for k in range(2, n + 1):
        for l in range(n + 2 - k, n + 1):
            stack = sp.deriv_stack(grid, proxy.stages.potential(l).data, k)
            out = out + proxy.eps ** (k + l - 2) * _contract(ts[k], stack, d, grid.shape)
    return Field(grid, out)


def defect_display_gap(proxy: HomogProxy, tensors, f: Field) -> float:
    """Relative mismatch of the two computable sides of the defect identity.

    The identity states that ``Abar_eps^n grad U + f - defect`` has vanishing
    divergence; the gap is measured on Helmholtz-projected fluxes.
    """
    eff = apply_effective_operator(tensors, proxy.gradient, proxy.eps, proxy.order)
    defect = proxy_defect(proxy, tensors)
    total = Field(proxy.grid, eff.data + f.data - defect.data)
    gap = lp_norm(helmholtz_gradient_part(total), 2)
    scale = lp_norm(helmholtz_gradient_part(f), 2)
    return gap / scale if scale > 0 else gap
