"""Periodic elliptic solvers on the torus lattice.

Discretization is Fourier collocation: derivatives are exact multipliers,
coefficient multiplication is pointwise on the lattice.  Variable-coefficient
divergence-form problems are solved by conjugate gradients on the scalar
potential, preconditioned by the exact inverse Laplacian (spectrally
equivalent with constants ``[lam, 1]``).  Constant-coefficient problems and
flux-corrector (vector Poisson) problems are solved by direct Fourier
inversion.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from shl import _spectral as sp
from shl.grid import Field, TorusGrid
from shl.randfield import CoefficientField

__all__ = [
    "NonConvergenceError",
    "IndefiniteSymbolError",
    "EllipticityError",
    "SolveOptions",
    "SolveReport",
    "solve_divform_variable",
    "solve_divform_constant",
    "constant_solution_potential",
    "solve_flux_corrector",
    "helmholtz_gradient_part",
    "divergence_fraction",
]


class NonConvergenceError(RuntimeError):
    """Iterative solve failed to reach the requested tolerance.

    Carries the report and the partial iterate for diagnostics.
    """

    def __init__(self, message, report=None, partial=None):
        super().__init__(message)
        self.report = report
        self.partial = partial


class IndefiniteSymbolError(ValueError):
    """Constant-coefficient symbol is not positive on nonzero modes."""


class EllipticityError(RuntimeError):
    """Indefinite curvature encountered during CG (operator not elliptic)."""


@dataclass(frozen=True)
class SolveOptions:
    rel_tolerance: float = 1e-10
    max_iterations: int | None = None  # default 10 * N
    preconditioner: str = "inverse-laplacian"
    dealias: bool = False

    def __post_init__(self):
        if not (0 < self.rel_tolerance < 1):
            raise ValueError("rel_tolerance must lie in (0, 1)")
        if self.preconditioner not in ("inverse-laplacian", "none"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    final_residual: float
    converged: bool
    residual_history: tuple[float, ...] = field(default=(), repr=False)


def _parseval_dot(grid: TorusGrid, A: np.ndarray, B: np.ndarray) -> float:
    """Lattice inner product ``sum_x a(x) b(x)`` from rfft spectra."""
    N = grid.N
    w = np.real(A * np.conj(B))
    # interior columns of the half-spectrum count twice
    scale = np.full(w.shape[-1], 2.0)
    scale[0] = 1.0
    if N % 2 == 0:
        scale[-1] = 1.0
    return float(np.sum(w * scale) / grid.n_cells)


def solve_divform_variable(
    a: CoefficientField, f: Field, opts: SolveOptions = SolveOptions()
) -> tuple[Field, Field, SolveReport]:
    """Solve ``-div(a grad u) = div f`` on the torus, zero-mean potential.

    Returns ``(u, grad u, report)``; the gradient is computed by exact
    Fourier multipliers.  Convergence is measured on the preconditioned
    residual ``||r||_{H^-1}`` relative to the right-hand side.  Pointwise
    symmetric coefficients use conjugate gradients; nonsymmetric ones fall
    back to BiCGStab with the same preconditioner and report contract.
    """
    grid = a.grid
    if f.grid != grid or f.rank != (grid.d,):
        raise ValueError("right-hand side must be a vector field on the coefficient grid")
    amat = a.data
    ks = sp.wavevectors(grid)
    inv_lap = sp.inv_lap_symbol(grid)
    mask = sp.dealias_mask(grid) if opts.dealias else None
    max_iter = opts.max_iterations if opts.max_iterations is not None else 10 * grid.N

    def apply_op(phat):
        """A p in Fourier, for p given in Fourier (returns spectrum)."""
        gradp = np.stack([sp.inv(grid, 1j * k * phat) for k in ks], axis=0)
        flux = np.einsum("ab...,b...->a...", amat, gradp)
        fhat = sp.fwd(grid, flux)
        if mask is not None:
            fhat = fhat * mask
        out = -(1j * ks[0]) * fhat[0]
        for ax in range(1, grid.d):
            out = out - (1j * ks[ax]) * fhat[ax]
        return out

    bhat = sp.div_spec(grid, f.data)
    if mask is not None:
        bhat = bhat * mask
    precond = (lambda r: inv_lap * r) if opts.preconditioner == "inverse-laplacian" else (lambda r: r)

    rz0 = _parseval_dot(grid, bhat, precond(bhat))
    if rz0 <= 0.0:
        # zero right-hand side: the unique zero-mean solution is identically 0
        zero = Field.zeros(grid)
        zerograd = Field.zeros(grid, (grid.d,))
        return zero, zerograd, SolveReport(0, 0.0, True, ())

    symmetric = np.array_equal(amat, np.swapaxes(amat, 0, 1))
    stepper = _cg_spectral if symmetric else _bicgstab_spectral
    xhat, history, converged = stepper(
        grid, apply_op, precond, bhat, rz0, opts.rel_tolerance, max_iter
    )
    report = SolveReport(
        len(history), history[-1] if history else 0.0, converged, tuple(history)
    )
    xhat[(0,) * grid.d] = 0.0  # anchor: zero lattice mean
    u = sp.inv(grid, xhat)
    gradu = np.stack([sp.inv(grid, 1j * k * xhat) for k in ks], axis=0)
    if not converged:
        raise NonConvergenceError(
            f"solver did not reach tol {opts.rel_tolerance} in {len(history)} "
            f"iterations (residual {report.final_residual:.3e})",
            report=report,
            partial=(Field(grid, u), Field(grid, gradu)),
        )
    return Field(grid, u), Field(grid, gradu), report


def _cg_spectral(grid, apply_op, precond, bhat, rz0, tol, max_iter):
    """Preconditioned CG on the potential, state kept in Fourier space."""
    xhat = np.zeros_like(bhat)
    rhat = bhat.copy()
    zhat = precond(rhat)
    rz = _parseval_dot(grid, rhat, zhat)
    phat = zhat.copy()
    history = []
    while len(history) < max_iter:
        Ap = apply_op(phat)
        pAp = _parseval_dot(grid, phat, Ap)
        if pAp <= 0.0:
            raise EllipticityError("indefinite curvature in CG; coefficient not elliptic")
        alpha = rz / pAp
        xhat += alpha * phat
        rhat -= alpha * Ap
        zhat = precond(rhat)
        rz_new = _parseval_dot(grid, rhat, zhat)
        history.append(float(np.sqrt(max(rz_new, 0.0) / rz0)))
        if history[-1] <= tol:
            return xhat, history, True
        phat = zhat + (rz_new / rz) * phat
        rz = rz_new
    return xhat, history, False


def _bicgstab_spectral(grid, apply_op, precond, bhat, rz0, tol, max_iter):
    """Preconditioned BiCGStab for nonsymmetric coefficients.

    Restarts from the true residual on shadow-direction breakdown or
    stagnation, and verifies convergence on the recomputed true residual
    (the recursive residual can drift at tight tolerances).
    """
    xhat = np.zeros_like(bhat)
    history = []

    def true_residual():
        return bhat - apply_op(xhat)

    def res_norm(rr):
        return float(np.sqrt(max(_parseval_dot(grid, rr, precond(rr)), 0.0) / rz0))

    def rnorm2(rr):
        return math.sqrt(max(_parseval_dot(grid, rr, rr), 0.0))

    restarts = 0
    r = bhat.copy()
    while len(history) < max_iter and restarts <= 40:
        # (re)start the recursion from the current true residual
        rshadow = r.copy()
        rho = alpha = omega = 1.0
        v = np.zeros_like(bhat)
        p = np.zeros_like(bhat)
        broke = False
        while len(history) < max_iter:
            rho_new = _parseval_dot(grid, rshadow, r)
            # shadow direction lost: restart rather than divide by noise
            if abs(rho_new) <= 1e-30 * rnorm2(rshadow) * rnorm2(r) or omega == 0.0:
                broke = True
                break
            beta = (rho_new / rho) * (alpha / omega)
            p = r + beta * (p - omega * v)
            ph = precond(p)
            v = apply_op(ph)
            denom = _parseval_dot(grid, rshadow, v)
            if denom == 0.0:
                broke = True
                break
            alpha = rho_new / denom
            s = r - alpha * v
            sh = precond(s)
            t = apply_op(sh)
            tt = _parseval_dot(grid, t, t)
            if tt <= 0.0:
                broke = True
                break
            omega = _parseval_dot(grid, t, s) / tt
            xhat += alpha * ph + omega * sh
            r = s - omega * t
            rho = rho_new
            history.append(res_norm(r))
            if history[-1] <= tol:
                exact = true_residual()
                history[-1] = res_norm(exact)
                if history[-1] <= tol:
                    return xhat, history, True
                r = exact
                broke = True
                break
        if broke:
            restarts += 1
            r = true_residual()
        else:
            break
    return xhat, history, False


def _constant_symbol(grid: TorusGrid, abar: np.ndarray) -> np.ndarray:
    ks = sp.wavevectors(grid)
    sym = np.zeros(np.broadcast_shapes(*(k.shape for k in ks)))
    for i in range(grid.d):
        for j in range(grid.d):
            sym = sym + abar[i, j] * ks[i] * ks[j]
    lap = sp.lap_symbol(grid)
    if np.any(sym[lap > 0] <= 0):
        raise IndefiniteSymbolError("k.abar k is not positive on nonzero lattice modes")
    return sym


def constant_solution_potential(abar: np.ndarray, f: Field) -> tuple[Field, Field]:
    """Exact Fourier solve of ``-div(abar grad u) = div f``; (potential, gradient)."""
    grid = f.grid
    abar = np.asarray(abar, dtype=np.float64)
    if abar.shape != (grid.d, grid.d):
        raise ValueError("abar must be a d x d matrix")
    sym = _constant_symbol(grid, abar)
    kdotf = sp.div_spec(grid, f.data)  # i k . fhat
    uhat = np.zeros_like(kdotf)
    nz = sym > 0
    uhat[nz] = kdotf[nz] / sym[nz]
    ks = sp.wavevectors(grid)
    grad = np.stack([sp.inv(grid, 1j * k * uhat) for k in ks], axis=0)
    return Field(grid, sp.inv(grid, uhat)), Field(grid, grad)


def solve_divform_constant(abar: np.ndarray, f: Field) -> Field:
    """Gradient of the exact constant-coefficient solve (zero mode dropped)."""
    _, grad = constant_solution_potential(abar, f)
    return grad


def divergence_fraction(q: Field, scale: float | None = None) -> float:
    """Fraction of a vector field's L2 mass in the gradient (non-solenoidal) sector.

    This is the natural dimensionless residual for 'q is divergence-free':
    it equals ``||grad lap^-1 div q|| / ||q||``.  An optional ``scale`` floors
    the denominator, so that fields which are themselves negligible relative
    to a problem scale report a negligible residual.
    """
    gp = sp.gradient_part(q.grid, q.data)
    nq = float(np.sqrt(np.sum(q.data**2)))
    if scale is not None:
        nq = max(nq, float(scale))
    if nq == 0.0:
        return 0.0
    return float(np.sqrt(np.sum(gp**2)) / nq)


def helmholtz_gradient_part(v: Field) -> Field:
    """L2-orthogonal projection of a vector field onto discrete gradients."""
    if v.rank != (v.grid.d,):
        raise ValueError("expected a vector field")
    return Field(v.grid, sp.gradient_part(v.grid, v.data))


def solve_flux_corrector(q: Field, warn_tol: float = 1e-8, scale: float | None = None) -> Field:
    """Skew matrix potential: ``-lap sigma_jk = d_j q_k - d_k q_j``, zero mean.

    The input is expected (numerically) divergence-free with zero mean; the
    construction then satisfies ``div sigma = q`` up to the divergence
    residual of ``q``.  The result is stored with an exactly skew layout
    (strict upper triangle mirrored with a sign).
    """
    grid = q.grid
    if q.rank != (grid.d,):
        raise ValueError("expected a vector field")
    frac = divergence_fraction(q, scale)
    if frac > warn_tol:
        warnings.warn(
            f"flux field has relative divergence {frac:.3e} > {warn_tol:.1e}",
            stacklevel=2,
        )
    d = grid.d
    sigma = np.zeros((d, d) + grid.shape)
    if d > 1:
        qhat = sp.fwd(grid, q.data)
        ks = sp.wavevectors(grid)
        inv_lap = sp.inv_lap_symbol(grid)
        for j in range(d):
            for k in range(j + 1, d):
                shat = (1j * ks[j] * qhat[k] - 1j * ks[k] * qhat[j]) * inv_lap
                comp = sp.inv(grid, shat)
                sigma[j, k] = comp
                sigma[k, j] = -comp
    return Field(grid, sigma)
