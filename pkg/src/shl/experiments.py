"""Monte-Carlo campaigns: ensemble statistics, rate fits, commutators, probes.

Determinism contract: every campaign output is a pure function of the config
and the root seed.  Samples draw from independent counter-based streams keyed
by ``(root_seed, rung << 32 | sample)``; samples are grouped into fixed
batches, each batch is reduced internally in sample order, and batch
accumulators are merged in batch order -- so results are bit-identical for
any worker-pool size.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import string
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from shl import _spectral as sp
from shl.grid import Field, TorusGrid
from shl.correctors import CorrectorHierarchy, compute_hierarchy
from shl.ellsolve import (
    NonConvergenceError,
    SolveOptions,
    solve_divform_variable,
    solve_flux_corrector,
)
from shl.homogenized import (
    apply_effective_operator,
    assemble_proxy,
    solve_tilde_hierarchy,
    symmetrized_tensor_stack,
)
from shl.randfield import (
    CoefficientField,
    KernelSpec,
    coefficient_from_gaussian,
    noise_stream,
    periodize_kernel,
    sample_gaussian_field,
    sample_white_noise,
)
from shl.twoscale import error_norm_mean, error_norm_strong, two_scale_expand

__all__ = [
    "RateFit",
    "EnsembleConfig",
    "EnsembleReport",
    "ProbeSpec",
    "WeakProbeConfig",
    "fit_rate",
    "run_ensemble",
    "commutator_fields",
    "standard_commutator",
    "weak_pairing_probe",
    "one_d_exact_suite",
    "corrector_growth_sweep",
    "emit_report",
]


# ---------------------------------------------------------------------------
# rate fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    stderr: float
    r2: float
    npoints: int

    def to_dict(self):
        return asdict(self)


def fit_rate(pairs) -> RateFit:
    """Ordinary least squares of log(value) against log(eps)."""
    pairs = list(pairs)
    if len(pairs) < 3:
        raise ValueError("rate fit needs at least 3 points")
    eps = np.array([p[0] for p in pairs], dtype=float)
    val = np.array([p[1] for p in pairs], dtype=float)
    if np.any(eps <= 0) or np.any(val <= 0):
        raise ValueError("rate fit needs positive abscissae and values")
    x = np.log(eps)
    y = np.log(val)
    n = x.size
    xbar, ybar = x.mean(), y.mean()
    sxx = float(np.sum((x - xbar) ** 2))
    slope = float(np.sum((x - xbar) * (y - ybar)) / sxx)
    intercept = float(ybar - slope * xbar)
    resid = y - (intercept + slope * x)
    ssr = float(np.sum(resid**2))
    sst = float(np.sum((y - ybar) ** 2))
    stderr = math.sqrt(ssr / (n - 2) / sxx) if n > 2 else float("nan")
    r2 = 1.0 - ssr / sst if sst > 0 else 1.0
    return RateFit(slope, intercept, stderr, r2, n)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _as_mode_tuple(modes):
    out = []
    for m, amps, phases in modes:
        out.append((tuple(int(v) for v in m), tuple(float(v) for v in amps),
                    tuple(float(v) for v in phases)))
    return tuple(out)


@dataclass(frozen=True)
class EnsembleConfig:
    """Validated campaign parameters (see cli defaults for the full schema)."""

    d: int = 2
    eps_ladder: tuple[float, ...] = (0.125, 0.0625, 0.03125)
    samples: int = 64
    batches: int = 8
    order: int = 1
    norm_p: float = 2.0
    seed: int = 0
    rho: float = 1.0
    kappa: int = 1
    ellipticity: float = 0.25
    coeff_map: str = "scalar-sigmoid"
    kernel_family: str = "gaussian-bump"
    amplitude: float = 1.0
    resolution: int = 8
    grid_N: int | None = None
    tol: float = 1e-10
    max_iterations: int | None = None
    dealias: bool = False
    source_modes: tuple = ()
    observable_modes: tuple = ()
    commutator_order: int = 1
    workers: int = 1

    def __post_init__(self):
        eps = self.eps_ladder
        if len(eps) == 0 or any(e2 >= e1 for e1, e2 in zip(eps, eps[1:])):
            raise ValueError("eps ladder must be strictly decreasing")
        for e in eps:
            m = 1.0 / e
            if abs(m - round(m)) > 1e-9 or (int(round(m)) & (int(round(m)) - 1)) != 0:
                raise ValueError(f"eps must be a reciprocal power of two, got {e}")
        if self.samples < 2:
            raise ValueError("need at least 2 samples per rung")
        if self.batches < 1 or self.samples % self.batches != 0:
            raise ValueError("batch count must divide the sample count")
        if not 1 <= self.order <= 4:
            raise ValueError("hierarchy order must lie in 1..4")
        if self.commutator_order > self.order:
            raise ValueError("commutator order cannot exceed the hierarchy order")
        object.__setattr__(self, "source_modes", _as_mode_tuple(self.source_modes or
                                                                default_source_modes(self.d)))
        object.__setattr__(self, "observable_modes", _as_mode_tuple(self.observable_modes or
                                                                    default_observable_modes(self.d)))

    def solve_options(self) -> SolveOptions:
        return SolveOptions(rel_tolerance=self.tol, max_iterations=self.max_iterations,
                            dealias=self.dealias)

    def kernel_spec(self) -> KernelSpec:
        return KernelSpec(family=self.kernel_family, rho=self.rho, kappa=self.kappa,
                          amplitude=self.amplitude)

    def rung_grids(self, eps: float) -> tuple[TorusGrid, TorusGrid]:
        """(micro, macro) lattices for one rung; shared point count."""
        L = 1.0 / eps
        if self.grid_N is not None:
            N = self.grid_N
        else:
            N = 1 << max(2, math.ceil(math.log2(self.resolution * L / self.rho)))
        micro = TorusGrid(self.d, L, N)
        macro = TorusGrid(self.d, 1.0, N)
        return micro, macro

    def cells_per_rho(self, eps: float) -> float:
        micro, _ = self.rung_grids(eps)
        return self.rho / micro.h


def default_source_modes(d: int):
    if d == 1:
        return (((2,), (1.0,), (0.0,)), ((3,), (0.5,), (1.1,)))
    if d == 2:
        return (((2, 1), (1.0, 0.4), (0.0, 1.1)), ((1, -2), (0.6, -0.8), (0.7, 0.3)))
    return (((1, 1, 0), (1.0, 0.3, -0.5), (0.0, 0.9, 0.4)),)


def default_observable_modes(d: int):
    if d == 1:
        return (((1,), (1.0,), (0.4,)),)
    if d == 2:
        return (((1, 1), (0.8, -0.5), (0.2, 1.0)),)
    return (((1, 0, 1), (0.7, 0.0, 0.5), (0.0, 0.3, 0.8)),)


def build_trig_field(grid: TorusGrid, modes) -> Field:
    """Mean-zero trigonometric vector field from (mode, amplitudes, phases) rows."""
    coords = grid.coords()
    data = np.zeros((grid.d,) + grid.shape)
    for mvec, amps, phases in modes:
        phase_arg = np.zeros(grid.shape)
        for axis in range(grid.d):
            phase_arg = phase_arg + (2.0 * np.pi * mvec[axis] / grid.L) * coords[axis]
        for comp in range(grid.d):
            data[comp] += amps[comp] * np.sin(phase_arg + phases[comp])
    return Field(grid, data)


# ---------------------------------------------------------------------------
# streaming statistics
# ---------------------------------------------------------------------------


def _welford_new(shape) -> list:
    return [0, np.zeros(shape), np.zeros(shape)]


def _welford_update(state, x) -> None:
    state[0] += 1
    delta = x - state[1]
    state[1] = state[1] + delta / state[0]
    state[2] = state[2] + delta * (x - state[1])


def _welford_merge(a, b):
    na, ma, Ma = a
    nb, mb, Mb = b
    if na == 0:
        return [nb, mb.copy(), Mb.copy()]
    n = na + nb
    delta = mb - ma
    mean = ma + delta * (nb / n)
    M2 = Ma + Mb + delta**2 * (na * nb / n)
    return [n, mean, M2]


def _welford_variance(state) -> np.ndarray:
    n, _, M2 = state
    if n < 2:
        return np.zeros_like(M2)
    return M2 / (n - 1)


# ---------------------------------------------------------------------------
# homogenization commutators
# ---------------------------------------------------------------------------


def commutator_fields(
    a: CoefficientField,
    u_grad: Field,
    hierarchy: CorrectorHierarchy,
    tensors,
    eps: float,
    n: int,
    macro_pot: Field,
) -> tuple[Field, Field]:
    """Homogenization commutator and its standard (corrector-built) version.

    The first field is ``(a(./eps) - Abar_eps^n) grad u`` for the supplied
    random solution; the second is the order-n standard commutator applied to
    the deterministic macro potential (its ensemble mean is zero).
    """
    macro = u_grad.grid
    flux = np.einsum("ab...,b...->a...", a.data, u_grad.data)
    eff = apply_effective_operator(tensors, u_grad, eps, n)
    xi = Field(macro, flux - eff.data)
    xi0 = standard_commutator(hierarchy, tensors, eps, n, macro_pot)
    return xi, xi0


def standard_commutator(
    hierarchy: CorrectorHierarchy, tensors, eps: float, n: int, macro_pot: Field
) -> Field:
    """Order-n standard commutator as a differential operator on a macro potential.

    Built by inserting the two-scale expansion of the local Taylor polynomial
    into the commutator and truncating at operator order n; coefficients are
    corrector derivatives evaluated on the shared lattice.
    """
    if n > hierarchy.order:
        raise ValueError(f"commutator order {n} exceeds hierarchy order {hierarchy.order}")
    macro = macro_pot.grid
    d, shape = macro.d, macro.shape
    micro = hierarchy.grid
    ts = symmetrized_tensor_stack(tensors[: n + 1])
    dstacks = {j: sp.deriv_stack(macro, macro_pot.data, j) for j in range(1, n + 1)}

    # a(./eps) times the two-scale expansion of the gradient
    corrected = np.zeros((d,) + shape)
    for j in range(1, n + 1):
        g = hierarchy.corrector_grad(j).data.copy()
        phi_prev = hierarchy.corrector(j - 1).data
        for i in range(d):
            idx = (slice(None),) * (j - 1) + (i, i)
            g[idx] += phi_prev
        corrected += eps ** (j - 1) * np.einsum(
            "ma...,m...->a...",
            g.reshape((d**j, d) + shape),
            dstacks[j].reshape((d**j,) + shape),
        )
    term1 = np.einsum("ab...,b...->a...", hierarchy.coeff.data, corrected)

    # effective operator applied to the truncated two-scale expansion
    letters = string.ascii_lowercase
    term2 = np.zeros((d,) + shape)
    for k in range(1, n + 1):
        tk = ts[k]  # axes (slots 0..k-2, alpha, slot k-1)
        for m in range(0, n + 1):
            phi_m = hierarchy.corrector(m).data
            for s1 in _subsets(k):
                s = len(s1)
                if m == 0 and s > 0:
                    continue  # derivatives of the constant seed vanish
                worder = m + k - s
                if worder > n or worder < 1:
                    continue
                dphi = sp.deriv_stack(micro, phi_m, s)  # (d,)*s + (d,)*m + shape
                dw = sp.deriv_stack(macro, macro_pot.data, worder)
                # letters: slots of abar^k
                slot = letters[:k]
                alpha = "z"
                mi_phi = letters[k : k + m]
                s2 = [p for p in range(k) if p not in s1]
                dphi_sub = "".join(slot[p] for p in s1) + mi_phi
                dw_sub = mi_phi + "".join(slot[p] for p in s2)
                t_sub = slot[: k - 1] + alpha + slot[k - 1]
                contrib = np.einsum(
                    f"{t_sub},{dphi_sub}...,{dw_sub}...->{alpha}...",
                    tk, dphi, dw,
                )
                term2 += eps ** (k - 1 + m - s) * contrib
    return Field(macro, term1 - term2)


def _subsets(k: int):
    out = []
    for size in range(k + 1):
        out.extend(itertools.combinations(range(k), size))
    return out


# ---------------------------------------------------------------------------
# ensemble campaign
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _BatchTask:
    cfg: EnsembleConfig
    rung_index: int
    eps: float
    batch_index: int
    sample_indices: tuple[int, ...]


def _synthesize(cfg: EnsembleConfig, micro: TorusGrid, stream_id: int):
    kern = periodize_kernel(cfg.kernel_spec(), micro)
    gen = noise_stream(cfg.seed, stream_id)
    noise = sample_white_noise(micro, cfg.kappa, gen, seed=cfg.seed, stream_id=stream_id)
    G = sample_gaussian_field(kern, noise)
    return G, coefficient_from_gaussian(G, cfg.ellipticity, cfg.coeff_map)


def _ensemble_batch(task: _BatchTask) -> dict:
    cfg = task.cfg
    micro, macro = cfg.rung_grids(task.eps)
    d = cfg.d
    opts = cfg.solve_options()
    f = build_trig_field(macro, cfg.source_modes)
    g_obs = build_trig_field(macro, cfg.observable_modes)
    vol = macro.cell_volume

    w_grad = _welford_new((d,) + macro.shape)
    w_flux = _welford_new((d,) + macro.shape)
    w_xi0 = _welford_new((d,) + macro.shape)
    tensor_sums = None
    e_strong, obs_vals = [], []
    failures = 0

    for idx in task.sample_indices:
        stream_id = (task.rung_index << 32) | idx
        _, a_micro = _synthesize(cfg, micro, stream_id)
        try:
            h = compute_hierarchy(a_micro, cfg.order, opts)
            a_macro = CoefficientField(Field(macro, a_micro.data), a_micro.ellipticity)
            _, gradu, _ = solve_divform_variable(a_macro, f, opts)
        except NonConvergenceError:
            failures += 1
            if failures >= 3:
                raise
            continue
        tensors = h.tensors()
        stages = solve_tilde_hierarchy(tensors, f, cfg.order)
        proxy = assemble_proxy(stages, task.eps, cfg.order)
        expansion = two_scale_expand(h, proxy.potential, task.eps, cfg.order)
        e_strong.append(error_norm_strong(gradu, expansion))
        obs_vals.append(float(np.sum(g_obs.data * gradu.data)) * vol)
        flux = np.einsum("ab...,b...->a...", a_micro.data, gradu.data)

        proxy_c = assemble_proxy(stages, task.eps, cfg.commutator_order)
        xi0 = standard_commutator(h, tensors, task.eps, cfg.commutator_order,
                                  proxy_c.potential)

        _welford_update(w_grad, gradu.data)
        _welford_update(w_flux, flux)
        _welford_update(w_xi0, xi0.data)
        if tensor_sums is None:
            tensor_sums = [None] + [t.copy() for t in tensors[1:]]
        else:
            for k in range(1, cfg.order + 1):
                tensor_sums[k] += tensors[k]

    return {
        "batch_index": task.batch_index,
        "w_grad": w_grad,
        "w_flux": w_flux,
        "w_xi0": w_xi0,
        "tensor_sums": tensor_sums,
        "e_strong": e_strong,
        "obs": obs_vals,
        "failures": failures,
    }


def _run_tasks(tasks, workers: int, fn):
    if workers <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def _noise_floor(M2, count: int, vol: float) -> float:
    """Monte-Carlo noise level of the L2 norm of a mean field."""
    if count < 2:
        return 0.0
    var = M2 / (count - 1)
    return float(math.sqrt(np.sum(var) * vol / count))


def _mean_error_stats(mean_arr, floor, proxy_grad, macro, eps, p):
    raw = error_norm_mean(Field(macro, mean_arr), proxy_grad, eps, p)
    debiased = math.sqrt(max(raw**2 - floor**2, 0.0))
    return raw, debiased


def _rung_statistics(cfg, eps, macro, batch_results, f):
    """Merge batch accumulators (fixed order) and compute all rung statistics."""
    d = cfg.d
    p = cfg.norm_p
    B = len(batch_results)
    merged_grad = _welford_new((d,) + macro.shape)
    merged_flux = _welford_new((d,) + macro.shape)
    merged_xi0 = _welford_new((d,) + macro.shape)
    tensor_tot = None
    e_strong, obs_vals = [], []
    failures = 0
    for res in batch_results:
        merged_grad = _welford_merge(merged_grad, res["w_grad"])
        merged_flux = _welford_merge(merged_flux, res["w_flux"])
        merged_xi0 = _welford_merge(merged_xi0, res["w_xi0"])
        e_strong.extend(res["e_strong"])
        obs_vals.extend(res["obs"])
        failures += res["failures"]
        if res["tensor_sums"] is not None:
            if tensor_tot is None:
                tensor_tot = [None] + [t.copy() for t in res["tensor_sums"][1:]]
            else:
                for k in range(1, cfg.order + 1):
                    tensor_tot[k] += res["tensor_sums"][k]
    M = merged_grad[0]
    if M < 2:
        return {"eps": eps, "M": M, "aborted": True, "failures": failures}
    tensors_mean = [None] + [t / M for t in tensor_tot[1:]]
    stages = solve_tilde_hierarchy(tensors_mean, f, cfg.order)
    vol = macro.cell_volume

    def order_stats(welford_states, flux_mode):
        """e_mean-style statistics per proxy order, with batch jackknife."""
        count, mean_arr, M2 = welford_states
        floor = _noise_floor(M2, count, vol)
        out = {}
        for k in range(1, cfg.order + 1):
            proxy = assemble_proxy(stages, eps, k)
            target = (
                apply_effective_operator(tensors_mean, proxy.gradient, eps, k)
                if flux_mode
                else proxy.gradient
            )
            raw, debiased = _mean_error_stats(mean_arr, floor, target, macro, eps, p)
            jacks_raw, jacks_deb = [], []
            for b in range(B):
                partial = _welford_new((d,) + macro.shape)
                for bb in range(B):
                    if bb != b:
                        key = "w_flux" if flux_mode else "w_grad"
                        partial = _welford_merge(partial, batch_results[bb][key])
                if partial[0] < 2:
                    continue
                fl = _noise_floor(partial[2], partial[0], vol)
                r, dbs = _mean_error_stats(partial[1], fl, target, macro, eps, p)
                jacks_raw.append(r)
                jacks_deb.append(dbs)
            out[k] = {
                "raw": raw,
                "floor": floor,
                "debiased": debiased,
                "raw_se": _jackknife_se(jacks_raw),
                "debiased_se": _jackknife_se(jacks_deb),
            }
        return out

    # prefix mean (first quarter of the batches) for the M-scaling probe
    prefix = None
    if B % 4 == 0:
        pref_state = _welford_new((d,) + macro.shape)
        for bb in range(B // 4):
            pref_state = _welford_merge(pref_state, batch_results[bb]["w_grad"])
        if pref_state[0] >= 2:
            floor_p = _noise_floor(pref_state[2], pref_state[0], vol)
            prefix = {}
            for k in range(1, cfg.order + 1):
                proxy = assemble_proxy(stages, eps, k)
                raw, deb = _mean_error_stats(pref_state[1], floor_p, proxy.gradient,
                                             macro, eps, p)
                prefix[k] = {"M": pref_state[0], "raw": raw, "debiased": deb}

    e_arr = np.array(e_strong)
    obs_arr = np.array(obs_vals)
    var_obs = float(obs_arr.var(ddof=1))
    xi_norm = float(math.sqrt(np.sum(merged_xi0[1] ** 2) * vol))
    xi_floor = _noise_floor(merged_xi0[2], merged_xi0[0], vol)

    return {
        "eps": eps,
        "M": int(M),
        "N": macro.N,
        "aborted": False,
        "failures": failures,
        "e_strong_mean": float(e_arr.mean()),
        "e_strong_se": float(e_arr.std(ddof=1) / math.sqrt(len(e_arr))),
        "e_mean_by_order": order_stats(merged_grad, flux_mode=False),
        "e_flux_by_order": order_stats(merged_flux, flux_mode=True),
        "e_mean_prefix": prefix,
        "var_obs": var_obs,
        "var_obs_se": float(var_obs * math.sqrt(2.0 / (len(obs_arr) - 1))),
        "obs_mean": float(obs_arr.mean()),
        "commutator_mean_norm": xi_norm,
        "commutator_floor": xi_floor,
        "tensors_mean": tensors_mean,
    }


def _jackknife_se(values) -> float:
    vals = np.asarray(values, dtype=float)
    B = vals.size
    if B < 2:
        return float("nan")
    return float(math.sqrt((B - 1) / B * np.sum((vals - vals.mean()) ** 2)))


@dataclass
class EnsembleReport:
    config: dict
    config_hash: str
    seed: int
    rungs: list
    fits: dict
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "rungs": _jsonable(self.rungs),
            "fits": _jsonable(self.fits),
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, RateFit):
        return obj.to_dict()
    return obj


def config_hash(cfg_dict: dict) -> str:
    canon = json.dumps(_jsonable(cfg_dict), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def run_ensemble(cfg: EnsembleConfig) -> EnsembleReport:
    """Full Monte-Carlo campaign over the eps ladder.

    Per rung and sample: synthesize a coefficient field on the micro torus,
    compute the corrector hierarchy, solve the heterogeneous problem, stream
    means of the gradient and flux, and record per-sample statistics.  After
    all samples: mean-tensor proxies, error norms with Monte-Carlo noise
    floors and batch-jackknife uncertainties, and log-log rate fits.
    """
    t0 = time.perf_counter()
    rungs = []
    for rung_index, eps in enumerate(cfg.eps_ladder):
        micro, macro = cfg.rung_grids(eps)
        f = build_trig_field(macro, cfg.source_modes)
        per_batch = cfg.samples // cfg.batches
        tasks = [
            _BatchTask(
                cfg=cfg,
                rung_index=rung_index,
                eps=eps,
                batch_index=b,
                sample_indices=tuple(range(b * per_batch, (b + 1) * per_batch)),
            )
            for b in range(cfg.batches)
        ]
        try:
            results = _run_tasks(tasks, cfg.workers, _ensemble_batch)
        except NonConvergenceError:
            rungs.append({"eps": eps, "M": 0, "aborted": True})
            continue
        rungs.append(_rung_statistics(cfg, eps, macro, results, f))

    fits = _ladder_fits(cfg, rungs)
    cfg_dict = _config_dict(cfg)
    return EnsembleReport(
        config=cfg_dict,
        config_hash=config_hash(cfg_dict),
        seed=cfg.seed,
        rungs=rungs,
        fits=fits,
        meta={"wall_seconds": time.perf_counter() - t0, "workers": cfg.workers},
    )


def _config_dict(cfg: EnsembleConfig) -> dict:
    out = _jsonable(asdict(cfg))
    out.pop("workers", None)  # execution detail; outputs are worker-independent
    return out


def _ladder_fits(cfg: EnsembleConfig, rungs) -> dict:
    fits = {}
    ok = [r for r in rungs if not r.get("aborted")]
    if len(ok) >= 3:
        try:
            fits["e_strong"] = fit_rate([(r["eps"], r["e_strong_mean"]) for r in ok])
        except ValueError:
            pass
        for k in range(1, cfg.order + 1):
            for label, key in (("e_mean", "e_mean_by_order"), ("e_flux", "e_flux_by_order")):
                vals = [(r["eps"], r[key][k]["debiased"]) for r in ok]
                if all(v > 0 for _, v in vals):
                    fits[f"{label}_n{k}"] = fit_rate(vals)
        try:
            fits["var_obs"] = fit_rate([(r["eps"], r["var_obs"]) for r in ok])
        except ValueError:
            pass
    return fits


# ---------------------------------------------------------------------------
# weak pairing probe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeSpec:
    """Smooth local test random variable paired against a corrector.

    ``X = tanh(chi_scale * avg over B_radius(0) of G . channel)`` for the
    smoothed-average kind, or the constant 1.  Evaluation points run along
    the first coordinate axis; estimates are translation-averaged over the
    torus, which is unbiased by stationarity of the construction.
    """

    kind: str = "smoothed-average"
    radius: float = 1.0
    chi_scale: float = 2.0
    channel: tuple[float, ...] = (1.0,)
    anchor_radius: float = 1.0
    ray: tuple[float, ...] = (4.0, 6.0, 8.0, 12.0, 16.0, 24.0, 32.0, 48.0, 64.0)
    target: str = "corrector"  # corrector | corrector_grad
    target_order: int = 2
    component: tuple[int, ...] = (1, 1)

    def __post_init__(self):
        if self.kind not in ("constant", "smoothed-average"):
            raise ValueError(f"unknown probe kind {self.kind!r}")
        if len(self.component) != self.target_order:
            raise ValueError("component multi-index must match the target order")


@dataclass(frozen=True)
class WeakProbeConfig:
    d: int = 2
    L: float = 128.0
    N: int = 1024
    rho: float = 1.0
    kappa: int = 1
    ellipticity: float = 0.25
    coeff_map: str = "scalar-sigmoid"
    kernel_family: str = "gaussian-bump"
    amplitude: float = 1.0
    seed: int = 0
    samples: int = 512
    batches: int = 8
    tol: float = 1e-7
    workers: int = 1


@dataclass(frozen=True)
class _ProbeTask:
    cfg: WeakProbeConfig
    probe: ProbeSpec
    batch_index: int
    sample_indices: tuple[int, ...]


def _ball_avg(grid: TorusGrid, arr: np.ndarray, radius: float) -> np.ndarray:
    from shl.grid import ball_kernel

    kern = ball_kernel(grid, radius)
    axes = tuple(range(grid.d))
    return np.fft.irfftn(
        np.fft.rfftn(arr, axes=axes) * np.fft.rfftn(kern, axes=axes),
        s=grid.shape,
        axes=axes,
    )


def _corrector_chain(a: CoefficientField, mi0: tuple[int, ...], opts: SolveOptions):
    """Corrector (and gradient) for a single multi-index chain.

    Walks the hierarchy along one branch so only the ancestors of the target
    component are ever solved.
    """
    grid = a.grid
    d = grid.d
    sp_axes = tuple(range(1, grid.d + 1))
    phi_prev = np.ones(grid.shape)
    sig_prev = np.zeros((d, d) + grid.shape)
    phi = grad_phi = None
    for depth, idx in enumerate(mi0):
        src = a.data[:, idx] * phi_prev - sig_prev[:, idx]
        u, gradu, _ = solve_divform_variable(a, Field(grid, src), opts)
        agrad = np.einsum("ab...,b...->a...", a.data, gradu.data)
        col = (agrad + a.data[:, idx] * phi_prev).mean(axis=sp_axes)
        phi, grad_phi = u.data, gradu.data
        if depth + 1 < len(mi0):
            q = agrad + src - col.reshape((d,) + (1,) * grid.d)
            scale = float(np.sqrt(np.sum((agrad + src) ** 2)))
            sig_prev = solve_flux_corrector(Field(grid, q), scale=scale).data
            phi_prev = phi
    return phi, grad_phi


def _probe_batch(task: _ProbeTask) -> dict:
    cfg, probe = task.cfg, task.probe
    grid = TorusGrid(cfg.d, cfg.L, cfg.N)
    kern = periodize_kernel(
        KernelSpec(family=cfg.kernel_family, rho=cfg.rho, kappa=cfg.kappa,
                   amplitude=cfg.amplitude),
        grid,
    )
    opts = SolveOptions(rel_tolerance=cfg.tol)
    mi0 = tuple(i - 1 for i in probe.component)
    shifts = [int(round(r / grid.h)) for r in probe.ray]
    est = np.zeros((len(task.sample_indices), len(shifts)))
    smom = np.zeros_like(est)
    for row, idx in enumerate(task.sample_indices):
        gen = noise_stream(cfg.seed, idx)
        noise = sample_white_noise(grid, cfg.kappa, gen, seed=cfg.seed, stream_id=idx)
        G = sample_gaussian_field(kern, noise)
        a = coefficient_from_gaussian(G, cfg.ellipticity, cfg.coeff_map)
        phi, _ = _corrector_chain(a, mi0, opts)
        if probe.kind == "constant":
            X = np.ones(grid.shape)
        else:
            vg = np.einsum("c,c...->...", np.asarray(probe.channel, dtype=float),
                           G.data)
            X = np.tanh(probe.chi_scale * _ball_avg(grid, vg, probe.radius))
        anchored_ref = _ball_avg(grid, phi, probe.anchor_radius)
        for col, shift in enumerate(shifts):
            delta = np.roll(phi, -shift, axis=0) - anchored_ref
            est[row, col] = float((X * delta).mean())
            smom[row, col] = float((delta**2).mean())
    return {"batch_index": task.batch_index, "est": est, "smom": smom}


def weak_pairing_probe(probe: ProbeSpec, cfg: WeakProbeConfig) -> dict:
    """Monte-Carlo table of weak pairings and strong moments along a ray.

    The pairing target is re-anchored by subtracting its ball average around
    the probe center before pairing; each estimate is translation-averaged
    over the torus (unbiased, strongly variance-reduced).
    """
    grid = TorusGrid(cfg.d, cfg.L, cfg.N)
    if max(probe.ray) > cfg.L / 2:
        raise ValueError("evaluation ray leaves the half-period")
    per_batch = cfg.samples // cfg.batches
    tasks = [
        _ProbeTask(cfg=cfg, probe=probe, batch_index=b,
                   sample_indices=tuple(range(b * per_batch, (b + 1) * per_batch)))
        for b in range(cfg.batches)
    ]
    results = _run_tasks(tasks, cfg.workers, _probe_batch)
    est = np.concatenate([r["est"] for r in results], axis=0)
    smom = np.concatenate([r["smom"] for r in results], axis=0)
    M = est.shape[0]
    weak = est.mean(axis=0)
    weak_se = est.std(axis=0, ddof=1) / math.sqrt(M)
    strong = np.sqrt(smom.mean(axis=0))
    rows = [
        {
            "x": float(r),
            "weak_est": float(weak[i]),
            "weak_se": float(weak_se[i]),
            "strong_moment": float(strong[i]),
        }
        for i, r in enumerate(probe.ray)
    ]
    fits = {}
    if all(abs(w) > 0 for w in weak):
        fits["weak"] = fit_rate([(r, abs(w)) for r, w in zip(probe.ray, weak)])
    fits["strong"] = fit_rate([(r, s) for r, s in zip(probe.ray, strong)])
    return {
        "rows": rows,
        "fits": fits,
        "M": M,
        "config": _jsonable(asdict(cfg)),
        "probe": _jsonable(asdict(probe)),
    }


# ---------------------------------------------------------------------------
# exact 1D suite and growth sweeps
# ---------------------------------------------------------------------------


def one_d_exact_suite(
    L: float = 512.0,
    N: int = 4096,
    rho: float = 1.0,
    ellipticity: float = 0.25,
    seed: int = 0,
    samples: int = 64,
    tol: float = 1e-13,
    growth_ray: tuple[float, ...] = (2.0, 4.0, 8.0, 16.0, 32.0, 64.0),
) -> dict:
    """Exact-formula checks for the one-dimensional first corrector.

    Compares the solver corrector against the closed form
    ``grad phi = hmean/a - 1`` (with ``hmean`` the lattice harmonic mean) and
    its spectral antiderivative, checks the effective coefficient against the
    harmonic mean, fits the growth exponent of the corrector's sample std
    along a ray, and confirms ``E[grad u] = grad ubar`` against the
    Monte-Carlo noise floor for a fixed smooth source.
    """
    grid = TorusGrid(1, L, N)
    kspec = KernelSpec(rho=rho, kappa=1)
    kern = periodize_kernel(kspec, grid)
    opts = SolveOptions(rel_tolerance=tol)
    f = build_trig_field(grid, (((2,), (1.0,), (0.3,)), ((5,), (0.6,), (1.2,))))

    max_grad_err = 0.0
    max_pot_err = 0.0
    max_abar_rel = 0.0
    ray_idx = [int(round(x / grid.h)) for x in growth_ray]
    pot_samples = np.zeros((samples, len(ray_idx)))
    w_gradu = _welford_new((1,) + grid.shape)
    abar_sum = 0.0

    for j in range(samples):
        gen = noise_stream(seed, j)
        noise = sample_white_noise(grid, 1, gen, seed=seed, stream_id=j)
        G = sample_gaussian_field(kern, noise)
        a = coefficient_from_gaussian(G, ellipticity, "scalar-sigmoid")
        h = compute_hierarchy(a, 1, opts)
        binv = 1.0 / a.data[0, 0]
        hm = 1.0 / float(binv.mean())
        grad_exact = hm * binv - 1.0
        pot_exact = sp.antiderivative_1d(grid, grad_exact)
        pot_exact = pot_exact - pot_exact[0]
        gphi = h.corrector_grad(1).data[0, 0]
        phi = h.corrector(1).data[0]
        phi = phi - phi[0]
        abar = h.tensor(1)[0, 0]
        max_grad_err = max(max_grad_err, float(np.max(np.abs(gphi - grad_exact))))
        max_pot_err = max(max_pot_err, float(np.max(np.abs(phi - pot_exact))))
        max_abar_rel = max(max_abar_rel, abs(abar - hm) / hm)
        pot_samples[j] = phi[ray_idx]
        abar_sum += abar

        _, gradu, _ = solve_divform_variable(a, f, opts)
        _welford_update(w_gradu, gradu.data)

    stds = pot_samples.std(axis=0, ddof=1)
    growth = fit_rate(list(zip(growth_ray, stds)))

    abar_mean = abar_sum / samples
    from shl.ellsolve import solve_divform_constant

    proxy = solve_divform_constant(np.array([[abar_mean]]), f)
    e_mean = error_norm_mean(Field(grid, w_gradu[1]), proxy, min(1.0, L / 2), 2.0)
    floor = _noise_floor(w_gradu[2], w_gradu[0], grid.cell_volume)

    return {
        "samples": samples,
        "max_corrector_grad_error": max_grad_err,
        "max_corrector_error": max_pot_err,
        "max_effective_rel_error": max_abar_rel,
        "growth_fit": growth,
        "growth_stds": [float(s) for s in stds],
        "e_mean": e_mean,
        "e_mean_floor": floor,
    }


def corrector_growth_sweep(
    torus_sizes=(8.0, 16.0, 32.0, 64.0),
    resolution: int = 8,
    rho: float = 1.0,
    ellipticity: float = 0.25,
    seed: int = 0,
    samples: int = 24,
    tol: float = 1e-8,
) -> dict:
    """Root-mean-square of first and second correctors across torus sizes.

    In two dimensions the first corrector's L2 mass grows at most
    logarithmically with the period while the second corrector's grows
    polynomially; the sweep measures both.
    """
    rows = []
    opts = SolveOptions(rel_tolerance=tol)
    for L in torus_sizes:
        N = 1 << max(2, math.ceil(math.log2(resolution * L / rho)))
        grid = TorusGrid(2, L, N)
        kern = periodize_kernel(KernelSpec(rho=rho, kappa=1), grid)
        ms1 = ms2 = 0.0
        for j in range(samples):
            gen = noise_stream(seed, (int(L) << 32) | j)
            noise = sample_white_noise(grid, 1, gen)
            G = sample_gaussian_field(kern, noise)
            a = coefficient_from_gaussian(G, ellipticity, "scalar-sigmoid")
            phi1, _ = _corrector_chain(a, (0,), opts)
            phi2, _ = _corrector_chain(a, (0, 0), opts)
            ms1 += float((phi1**2).mean())
            ms2 += float((phi2**2).mean())
        rows.append({"L": L, "rms1": math.sqrt(ms1 / samples), "rms2": math.sqrt(ms2 / samples)})
    fits = {
        "first": fit_rate([(r["L"], r["rms1"]) for r in rows]),
        "second": fit_rate([(r["L"], r["rms2"]) for r in rows]),
    }
    return {"rows": rows, "fits": fits}


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def emit_report(report: EnsembleReport, directory) -> list:
    """Write CSV tables, a structured summary, and SVG log-log plots.

    All data artifacts are byte-deterministic given (config, seed); wall-time
    metadata goes to ``runtime.json``, the single intentionally
    non-deterministic file.
    """
    from pathlib import Path

    root = Path(directory)
    (root / "csv").mkdir(parents=True, exist_ok=True)
    (root / "plots").mkdir(parents=True, exist_ok=True)
    written = []

    rates_path = root / "csv" / "rates.csv"
    cols = ["eps", "M", "e_strong_mean", "e_strong_se", "e_mean", "e_flux", "var_obs",
            "var_obs_se", "e_mean_floor", "e_mean_debiased", "e_mean_se",
            "commutator_mean_norm", "commutator_floor", "failures"]
    order = report.config.get("order", 1)
    with open(rates_path, "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for r in report.rungs:
            if r.get("aborted"):
                fh.write(f"{r['eps']:.17g},{r.get('M', 0)}" + ",nan" * (len(cols) - 2) + "\n")
                continue
            em = r["e_mean_by_order"][order]
            ef = r["e_flux_by_order"][order]
            row = [
                format(r["eps"], ".17g"), str(r["M"]),
                format(r["e_strong_mean"], ".17g"), format(r["e_strong_se"], ".17g"),
                format(em["raw"], ".17g"), format(ef["raw"], ".17g"),
                format(r["var_obs"], ".17g"), format(r["var_obs_se"], ".17g"),
                format(em["floor"], ".17g"), format(em["debiased"], ".17g"),
                format(em["debiased_se"], ".17g"),
                format(r["commutator_mean_norm"], ".17g"),
                format(r["commutator_floor"], ".17g"), str(r["failures"]),
            ]
            fh.write(",".join(row) + "\n")
    written.append(rates_path)

    tensors_path = root / "csv" / "tensors.csv"
    d = report.config.get("d", 2)
    with open(tensors_path, "w", newline="") as fh:
        header = ["eps", "order", "multi_index"] + [
            f"m_{i + 1}{j + 1}" for i in range(d) for j in range(d)
        ]
        fh.write(",".join(header) + "\n")
        for r in report.rungs:
            if r.get("aborted"):
                continue
            for k in range(1, order + 1):
                t = np.asarray(r["tensors_mean"][k])
                mat = t.reshape((-1, d, d))
                for code in range(mat.shape[0]):
                    mi = _flat_to_mi(code, k - 1, d)
                    entries = [format(v, ".17g") for v in mat[code].ravel()]
                    fh.write(
                        ",".join([format(r["eps"], ".17g"), str(k), mi] + entries) + "\n"
                    )
    written.append(tensors_path)

    summary_path = root / "summary.json"
    with open(summary_path, "w") as fh:
        fh.write(report.to_json())
    written.append(summary_path)

    runtime_path = root / "runtime.json"
    with open(runtime_path, "w") as fh:
        json.dump(_jsonable(report.meta), fh, indent=2, sort_keys=True)
    written.append(runtime_path)

    written.extend(_emit_plots(report, root / "plots"))
    return written


def _flat_to_mi(code: int, k: int, d: int) -> str:
    if k == 0:
        return "-"
    digits = []
    for _ in range(k):
        digits.append(str(code % d + 1))
        code //= d
    return "".join(reversed(digits))


def _emit_plots(report: EnsembleReport, plots_dir) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = report.config_hash
    written = []
    ok = [r for r in report.rungs if not r.get("aborted")]
    if len(ok) >= 2:
        order = report.config.get("order", 1)
        fig, ax = plt.subplots(figsize=(5, 4))
        eps = [r["eps"] for r in ok]
        ax.loglog(eps, [r["e_strong_mean"] for r in ok], "o-", label="e_strong")
        for k in range(1, order + 1):
            ax.loglog(eps, [r["e_mean_by_order"][k]["debiased"] for r in ok],
                      "s--", label=f"e_mean (order {k})")
        _plot_fit(ax, report.fits.get("e_strong"), eps)
        ax.set_xlabel("eps")
        ax.set_ylabel("error")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = plots_dir / "rates.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)

        fig, ax = plt.subplots(figsize=(5, 4))
        ax.loglog(eps, [r["var_obs"] for r in ok], "o-", label="var of observable")
        _plot_fit(ax, report.fits.get("var_obs"), eps)
        ax.set_xlabel("eps")
        ax.set_ylabel("variance")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = plots_dir / "variance.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written


def _plot_fit(ax, fit, eps):
    if fit is None:
        return
    x = np.array(sorted(eps))
    ax.plot(x, np.exp(fit.intercept) * x**fit.slope, ":",
            label=f"slope {fit.slope:.2f} +- {fit.stderr:.2f}")
