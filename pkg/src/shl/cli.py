"""Configuration, subcommand dispatch, reproducibility plumbing.

One JSON document configures a run; flags override leaves through dotted
paths (``--set ensemble.samples=128``).  Every campaign output is a pure
function of (config, seed) for any worker count.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from shl.correctors import compute_hierarchy, export_hierarchy, flux_divergence_audit
from shl.ellsolve import SolveOptions, solve_divform_variable
from shl.experiments import (
    EnsembleConfig,
    ProbeSpec,
    WeakProbeConfig,
    build_trig_field,
    config_hash,
    emit_report,
    one_d_exact_suite,
    run_ensemble,
    weak_pairing_probe,
    _jsonable,
)
from shl.grid import TorusGrid, write_snapshot
from shl.randfield import synthesize_coefficient

__all__ = ["ConfigError", "RunConfig", "DEFAULTS", "parse_config", "dispatch", "main"]


class ConfigError(ValueError):
    """Config validation failure with a path-precise message."""


# every key, its default, and a one-line description (rendered in --help)
DEFAULTS = {
    "seed": (0, "root seed for all random streams"),
    "threads": (None, "worker processes (default: SHL_THREADS or cpu count)"),
    "grid": {
        "d": (2, "spatial dimension, 1..3"),
        "N": (None, "fixed lattice points per axis (power of two); null derives from resolution"),
        "resolution_per_rho": (8, "minimum lattice cells per correlation length"),
    },
    "field": {
        "family": ("gaussian-bump", "kernel family: gaussian-bump | compact-bump"),
        "rho": (1.0, "correlation length in fast (micro) units"),
        "kappa": (1, "Gaussian channel count"),
        "lambda": (0.25, "ellipticity constant in (0, 1)"),
        "map": ("scalar-sigmoid", "coefficient map: scalar-sigmoid | anisotropic-sigmoid | skew-sigmoid"),
        "amplitude": (1.0, "pointwise std of the Gaussian field"),
    },
    "solver": {
        "tol": (1e-10, "relative tolerance on the preconditioned residual"),
        "max_iters": (None, "CG iteration cap (default 10*N)"),
        "dealias": (False, "apply a 2/3-rule filter to coefficient products"),
    },
    "source": {
        "modes": (None, "list of [mvec, amps, phases] trig modes; null = built-in default"),
    },
    "hierarchy": {
        "order": (1, "corrector hierarchy order, 1..4"),
    },
    "ensemble": {
        "eps_ladder": ([0.125, 0.0625, 0.03125], "strictly decreasing reciprocal powers of two"),
        "samples": (64, "Monte-Carlo samples per rung (M >= 2)"),
        "batches": (8, "fixed batch count; must divide samples"),
        "norm_p": (2.0, "outer Lp exponent of the mean-error norm"),
        "observable_modes": (None, "trig modes of the fluctuation observable; null = default"),
        "commutator_order": (1, "order of the standard commutator statistics"),
    },
    "probes": {
        "kind": ("smoothed-average", "probe kind: constant | smoothed-average"),
        "radius": (1.0, "averaging radius of the probe"),
        "chi_scale": (2.0, "tanh slope of the probe"),
        "anchor_radius": (1.0, "re-anchoring ball radius"),
        "ray": ([4.0, 6.0, 8.0, 12.0, 16.0, 24.0, 32.0, 48.0, 64.0], "evaluation distances"),
        "target_order": (2, "corrector order probed"),
        "component": ([1, 1], "multi-index of the probed component (1-based)"),
        "torus_L": (128.0, "micro torus period for the probe"),
        "samples": (512, "probe Monte-Carlo samples"),
        "batches": (8, "probe batch count"),
        "tol": (1e-7, "solver tolerance for probe correctors"),
    },
    "output": {
        "dir": ("out", "output directory"),
        "snapshots": (False, "write SHLB1 field snapshots"),
        "plots": (True, "write SVG plots"),
    },
}


def _defaults_only(tree) -> dict:
    out = {}
    for key, val in tree.items():
        if isinstance(val, dict):
            out[key] = _defaults_only(val)
        else:
            out[key] = val[0]
    return out


class RunConfig:
    """Validated config: defaults applied, lints run, stable hash attached."""

    def __init__(self, data: dict, warnings: list[str]):
        self.data = data
        self.warnings = warnings
        self.hash = config_hash(data)

    def __getitem__(self, path: str):
        node = self.data
        for part in path.split("."):
            node = node[part]
        return node

    @property
    def seed(self) -> int:
        return self.data["seed"]

    def workers(self) -> int:
        w = self.data.get("threads")
        if w is None:
            env = os.environ.get("SHL_THREADS")
            w = int(env) if env else (os.cpu_count() or 1)
        return max(1, int(w))


def _merge(defaults: dict, user, path: str, strict: bool, warnings: list[str]) -> dict:
    if not isinstance(user, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(user).__name__}")
    out = {}
    for key, val in defaults.items():
        sub_path = f"{path}.{key}" if path else key
        if isinstance(val, dict):
            out[key] = _merge(val, user.get(key, {}), sub_path, strict, warnings)
        else:
            out[key] = user.get(key, val[0])
    for key in user:
        if key not in defaults:
            msg = f"{path + '.' if path else ''}{key}: unknown key"
            if strict:
                raise ConfigError(msg)
            warnings.append(msg)
    return out


def parse_config(document, strict: bool = True) -> RunConfig:
    """Parse and validate a config document (dict or JSON text).

    Applies defaults, checks types and ranges with path-precise messages,
    and reports lints (resolution rule, ladder monotonicity) as errors in
    strict mode or warnings otherwise.
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
    warnings: list[str] = []
    data = _merge(DEFAULTS, document, "", strict, warnings)

    def fail(path, msg):
        raise ConfigError(f"{path}: {msg}")

    if data["grid"]["d"] not in (1, 2, 3):
        fail("grid.d", "must be 1, 2 or 3")
    if not (0 < data["field"]["lambda"] < 1):
        fail("field.lambda", "must lie in (0, 1)")
    if not 1 <= data["hierarchy"]["order"] <= 4:
        fail("hierarchy.order", "must lie in 1..4")
    ladder = data["ensemble"]["eps_ladder"]
    if any(e2 >= e1 for e1, e2 in zip(ladder, ladder[1:])):
        fail("ensemble.eps_ladder", "must be strictly decreasing")
    for i, e in enumerate(ladder):
        inv = 1.0 / e
        if abs(inv - round(inv)) > 1e-9 or (int(round(inv)) & (int(round(inv)) - 1)):
            fail(f"ensemble.eps_ladder[{i}]", "must be a reciprocal power of two")
    if data["ensemble"]["samples"] < 2:
        fail("ensemble.samples", "need at least 2 samples")
    if data["ensemble"]["samples"] % data["ensemble"]["batches"] != 0:
        fail("ensemble.batches", "must divide ensemble.samples")
    N = data["grid"]["N"]
    if N is not None and (N < 4 or N & (N - 1)):
        fail("grid.N", "must be a power of two >= 4")

    # resolution lint: coarsest constraint comes from the largest micro torus
    if ladder:
        Lmax = 1.0 / min(ladder)
        rho = data["field"]["rho"]
        if N is not None:
            cells = N * rho / Lmax
            if cells < data["grid"]["resolution_per_rho"]:
                msg = (f"grid.N: {cells:.1f} cells per correlation length at the finest "
                       f"rung, below the resolution rule {data['grid']['resolution_per_rho']}")
                if strict:
                    raise ConfigError(msg)
                warnings.append(msg)
    return RunConfig(data, warnings)


def ensemble_config(cfg: RunConfig) -> EnsembleConfig:
    d = cfg["grid.d"]
    modes = cfg["source.modes"]
    obs = cfg["ensemble.observable_modes"]
    return EnsembleConfig(
        d=d,
        eps_ladder=tuple(cfg["ensemble.eps_ladder"]),
        samples=cfg["ensemble.samples"],
        batches=cfg["ensemble.batches"],
        order=cfg["hierarchy.order"],
        norm_p=cfg["ensemble.norm_p"],
        seed=cfg.seed,
        rho=cfg["field.rho"],
        kappa=cfg["field.kappa"],
        ellipticity=cfg["field.lambda"],
        coeff_map=cfg["field.map"],
        kernel_family=cfg["field.family"],
        amplitude=cfg["field.amplitude"],
        resolution=cfg["grid.resolution_per_rho"],
        grid_N=cfg["grid.N"],
        tol=cfg["solver.tol"],
        max_iterations=cfg["solver.max_iters"],
        dealias=cfg["solver.dealias"],
        source_modes=tuple(tuple(m) for m in modes) if modes else (),
        observable_modes=tuple(tuple(m) for m in obs) if obs else (),
        commutator_order=cfg["ensemble.commutator_order"],
        workers=cfg.workers(),
    )


SUBCOMMANDS = (
    "sample-field", "correctors", "tensors", "solve", "converge",
    "weak-probe", "oned-exact", "report",
)


def _base_grid(cfg: RunConfig) -> TorusGrid:
    d = cfg["grid.d"]
    N = cfg["grid.N"]
    rho = cfg["field.rho"]
    ladder = cfg["ensemble.eps_ladder"]
    L = 1.0 / max(ladder)
    if N is None:
        N = 1 << max(2, math.ceil(math.log2(cfg["grid.resolution_per_rho"] * L / rho)))
    return TorusGrid(d, L, N)


def _solve_opts(cfg: RunConfig) -> SolveOptions:
    return SolveOptions(
        rel_tolerance=cfg["solver.tol"],
        max_iterations=cfg["solver.max_iters"],
        dealias=cfg["solver.dealias"],
    )


def _coefficient(cfg: RunConfig, grid: TorusGrid):
    from shl.randfield import KernelSpec

    spec = KernelSpec(
        family=cfg["field.family"], rho=cfg["field.rho"],
        kappa=cfg["field.kappa"], amplitude=cfg["field.amplitude"],
    )
    return synthesize_coefficient(grid, spec, cfg["field.lambda"], cfg["field.map"],
                                  cfg.seed, 0)


def _out_dir(cfg: RunConfig, args) -> Path:
    out = Path(args.out or cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def dispatch(subcommand: str, cfg: RunConfig, args) -> int:
    """Run one pipeline; returns a process exit status."""
    if subcommand == "sample-field":
        grid = _base_grid(cfg)
        a = _coefficient(cfg, grid)
        rmin, gmax = a.ellipticity_audit()
        print(f"coefficient field on d={grid.d}, L={grid.L}, N={grid.N}")
        print(f"rayleigh min {rmin:.6f} (lambda {a.ellipticity}), gain max {gmax:.6f}")
        out = _out_dir(cfg, args)
        if cfg["output.snapshots"]:
            write_snapshot(a.field, out / "coefficient.shlb")
            print(f"wrote {out / 'coefficient.shlb'}")
        return 0

    if subcommand in ("correctors", "tensors"):
        grid = _base_grid(cfg)
        a = _coefficient(cfg, grid)
        h = compute_hierarchy(a, cfg["hierarchy.order"], _solve_opts(cfg))
        if subcommand == "correctors":
            out = _out_dir(cfg, args)
            export_hierarchy(h, out / "hierarchy")
            for row in flux_divergence_audit(h):
                print(f"order {row['order']}: max relative flux divergence "
                      f"{row['max_rel_divergence']:.3e}")
            print(f"wrote {out / 'hierarchy'}")
        else:
            for k in range(1, h.order + 1):
                print(f"effective tensor, order {k}:")
                print(np.array2string(h.tensor(k), precision=10, suppress_small=False))
        return 0

    if subcommand == "solve":
        grid = _base_grid(cfg)
        a = _coefficient(cfg, grid)
        modes = cfg["source.modes"]
        from shl.experiments import default_source_modes

        f = build_trig_field(grid, tuple(tuple(m) for m in modes) if modes
                             else default_source_modes(grid.d))
        u, gradu, rep = solve_divform_variable(a, f, _solve_opts(cfg))
        print(f"converged={rep.converged} iterations={rep.iterations} "
              f"residual={rep.final_residual:.3e}")
        out = _out_dir(cfg, args)
        if cfg["output.snapshots"]:
            write_snapshot(u, out / "solution.shlb")
            write_snapshot(gradu, out / "solution_grad.shlb")
        return 0

    if subcommand == "converge":
        ecfg = ensemble_config(cfg)
        if args.dry_run:
            _print_schedule(ecfg)
            return 0
        report = run_ensemble(ecfg)
        out = _out_dir(cfg, args)
        emit_report(report, out)
        for r in report.rungs:
            if r.get("aborted"):
                print(f"eps={r['eps']}: aborted after solver failures")
                continue
            em = r["e_mean_by_order"][ecfg.order]
            print(f"eps={r['eps']:<10g} M={r['M']:<5d} e_strong={r['e_strong_mean']:.4e} "
                  f"e_mean={em['raw']:.4e} (debiased {em['debiased']:.4e})")
        for name, fit in report.fits.items():
            print(f"fit {name}: slope {fit.slope:.3f} +- {fit.stderr:.3f} (R2 {fit.r2:.3f})")
        print(f"report written to {out}")
        return 0

    if subcommand == "weak-probe":
        pcfg = WeakProbeConfig(
            d=cfg["grid.d"],
            L=cfg["probes.torus_L"],
            N=cfg["grid.N"] or (1 << max(2, math.ceil(math.log2(
                cfg["grid.resolution_per_rho"] * cfg["probes.torus_L"] / cfg["field.rho"])))),
            rho=cfg["field.rho"],
            kappa=cfg["field.kappa"],
            ellipticity=cfg["field.lambda"],
            coeff_map=cfg["field.map"],
            kernel_family=cfg["field.family"],
            amplitude=cfg["field.amplitude"],
            seed=cfg.seed,
            samples=cfg["probes.samples"],
            batches=cfg["probes.batches"],
            tol=cfg["probes.tol"],
            workers=cfg.workers(),
        )
        probe = ProbeSpec(
            kind=cfg["probes.kind"],
            radius=cfg["probes.radius"],
            chi_scale=cfg["probes.chi_scale"],
            anchor_radius=cfg["probes.anchor_radius"],
            ray=tuple(cfg["probes.ray"]),
            target_order=cfg["probes.target_order"],
            component=tuple(cfg["probes.component"]),
            channel=tuple([1.0] + [0.0] * (cfg["field.kappa"] - 1)),
        )
        result = weak_pairing_probe(probe, pcfg)
        out = _out_dir(cfg, args)
        _write_probe_csv(result, out / "csv" / "probe.csv")
        for row in result["rows"]:
            print(f"x={row['x']:<8g} weak={row['weak_est']:+.4e} "
                  f"(se {row['weak_se']:.1e}) strong={row['strong_moment']:.4e}")
        for name, fit in result["fits"].items():
            print(f"{name} growth exponent: {fit.slope:.3f} +- {fit.stderr:.3f}")
        return 0

    if subcommand == "oned-exact":
        if cfg["grid.d"] != 1:
            print("oned-exact requires grid.d = 1", file=sys.stderr)
            return 2
        grid = _base_grid(cfg)
        res = one_d_exact_suite(
            L=grid.L, N=grid.N, rho=cfg["field.rho"],
            ellipticity=cfg["field.lambda"], seed=cfg.seed,
            samples=cfg["ensemble.samples"],
        )
        print(f"max corrector error      {res['max_corrector_error']:.3e}")
        print(f"max corrector grad error {res['max_corrector_grad_error']:.3e}")
        print(f"max effective rel error  {res['max_effective_rel_error']:.3e}")
        print(f"growth exponent          {res['growth_fit'].slope:.3f} "
              f"+- {res['growth_fit'].stderr:.3f}")
        print(f"ensemble mean error      {res['e_mean']:.3e} "
              f"(noise floor {res['e_mean_floor']:.3e})")
        return 0

    if subcommand == "report":
        src = Path(args.input or (Path(cfg["output.dir"]) / "summary.json"))
        if not src.exists():
            print(f"no report at {src}", file=sys.stderr)
            return 2
        payload = json.loads(src.read_text())
        from shl.experiments import EnsembleReport, RateFit

        fits = {k: RateFit(**v) for k, v in payload.get("fits", {}).items()}
        rungs = _rungs_from_json(payload.get("rungs", []))
        report = EnsembleReport(
            config=payload["config"], config_hash=payload["config_hash"],
            seed=payload["seed"], rungs=rungs, fits=fits,
        )
        out = _out_dir(cfg, args)
        emit_report(report, out)
        print(f"re-emitted report to {out}")
        return 0

    print(f"unknown subcommand {subcommand}", file=sys.stderr)
    return 2


def _rungs_from_json(rungs):
    out = []
    for r in rungs:
        r = dict(r)
        for key in ("e_mean_by_order", "e_flux_by_order"):
            if r.get(key):
                r[key] = {int(k): v for k, v in r[key].items()}
        if r.get("e_mean_prefix"):
            r["e_mean_prefix"] = {int(k): v for k, v in r["e_mean_prefix"].items()}
        out.append(r)
    return out


def _write_probe_csv(result: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("x,weak_est,weak_se,strong_moment\n")
        for row in result["rows"]:
            fh.write(",".join(format(row[k], ".17g")
                              for k in ("x", "weak_est", "weak_se", "strong_moment")) + "\n")


def _print_schedule(ecfg: EnsembleConfig) -> None:
    """Planned grids and a heuristic cost estimate (no solves)."""
    print("rung  eps        N      cells/rho  solves  cost units")
    total = 0.0
    solves_per_sample = sum(ecfg.d**k for k in range(1, ecfg.order + 1)) + 1
    for i, eps in enumerate(ecfg.eps_ladder):
        micro, macro = ecfg.rung_grids(eps)
        n_solves = ecfg.samples * solves_per_sample
        # heuristic: N^d log2 N per transform, 10/lambda CG iterations
        cost = n_solves * micro.n_cells * math.log2(micro.N) * 10.0 / ecfg.ellipticity
        total += cost
        print(f"{i:<5d} {eps:<10g} {micro.N:<6d} {ecfg.cells_per_rho(eps):<10.1f} "
              f"{n_solves:<7d} {cost:.3e}")
    print(f"total cost units (heuristic): {total:.3e}")


def _help_epilog() -> str:
    lines = ["config keys and defaults:"]

    def walk(tree, prefix):
        for key, val in tree.items():
            if isinstance(val, dict):
                walk(val, f"{prefix}{key}.")
            else:
                default, desc = val
                lines.append(f"  {prefix}{key} = {json.dumps(default)}  -- {desc}")

    walk(DEFAULTS, "")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shl",
        description="stochastic homogenization laboratory",
        epilog=_help_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS,
                        help="pipeline to run; 'converge' is the full rate campaign")
    parser.add_argument("--config", "-c", help="path to a JSON config document")
    parser.add_argument("--set", "-s", action="append", default=[], metavar="PATH=VALUE",
                        help="override a config leaf via a dotted path (JSON value)")
    parser.add_argument("--seed", type=int, help="override the root seed")
    parser.add_argument("--threads", type=int, help="worker processes")
    parser.add_argument("--out", help="output directory (overrides output.dir)")
    parser.add_argument("--input", help="existing summary.json for the report subcommand")
    parser.add_argument("--lax", action="store_true",
                        help="downgrade unknown keys and lints to warnings")
    parser.add_argument("--dry-run", action="store_true",
                        help="print the planned schedule and cost estimate, then exit")
    return parser


def _apply_overrides(doc: dict, overrides) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not PATH=VALUE")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = path.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return doc


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"cannot read config: {exc}", file=sys.stderr)
            return 2
    doc = _apply_overrides(doc, args.set)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.threads is not None:
        doc["threads"] = args.threads
    try:
        cfg = parse_config(doc, strict=not args.lax)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    for warning in cfg.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    try:
        return dispatch(args.subcommand, cfg, args)
    except Exception as exc:  # surface module context, nonzero exit
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
