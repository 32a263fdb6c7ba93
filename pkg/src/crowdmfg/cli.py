"""Batch command-line interface.

Subcommands: simulate | mfg | particles | sweep-sigma | sweep-beta |
check | render. Every run writes its artifacts plus a manifest.json
recording the artifact list and the exact config text, so a run
directory can be reproduced bit-for-bit. Exit codes: 0 success,
1 validation failure, 2 solver non-convergence.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import coupling, particles
from .config import load_config, serialize
from .errors import CflError, ConfigError, ConvergenceError, DensityBoundError
from .grid import read_field, write_field_text
from .model import (
    ModelParams,
    hamiltonian,
    hamiltonian_p,
    hamiltonian_rho,
    is_psd,
    lagrangian,
    legendre_sup_bruteforce,
    monotonicity_matrix,
)
from .render import render_ppm, write_arrow_csv


def _add_common(sub):
    sub.add_argument("config_path", nargs="?", help="run configuration file")
    sub.add_argument("--config", dest="config_flag", help="run configuration file")
    sub.add_argument("--out", help="output directory (overrides [output] directory)")
    sub.add_argument("--seed", type=int, help="RNG seed (overrides [particles] seed)")
    sub.add_argument("--threads", type=int, default=None,
                     help="sweep fan-out width (GH_THREADS as fallback)")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="crowdmfg",
        description="crowd-dynamics solvers: quasi-stationary runs, "
                    "forward-backward fixed points, particle comparisons",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("simulate", "quasi-stationary evolution: diagnostics + snapshots"),
        ("mfg", "forward-backward fixed point on the torus"),
        ("particles", "co-evolved particle ensemble vs the macroscopic run"),
        ("sweep-sigma", "vanishing-viscosity sweep"),
        ("sweep-beta", "behavior regimes across beta"),
        ("check", "validate data assumptions and the model algebra"),
    ):
        _add_common(sub.add_parser(name, help=help_text))
    sub.choices["sweep-sigma"].add_argument(
        "--sigmas", default="0.04,0.02,0.01,0.005",
        help="comma-separated, strictly decreasing viscosities")
    sub.choices["sweep-beta"].add_argument(
        "--betas", default="0,1,2", help="comma-separated beta values")

    render = sub.add_parser("render", help="snapshot -> PPM heatmap (+ arrow CSV)")
    render.add_argument("snapshot", help="density snapshot file (text or binary)")
    render.add_argument("--phi", help="matching value-function snapshot for arrows")
    render.add_argument("--config", dest="config_flag", help="config for scaling/params")
    render.add_argument("--out", help="output directory")
    render.add_argument("--vmin", type=float, default=None)
    render.add_argument("--vmax", type=float, default=None)
    render.add_argument("--stride", type=int, default=4, help="arrow subsampling")
    return parser


def _threads(args):
    if getattr(args, "threads", None):
        return max(1, args.threads)
    env = os.environ.get("GH_THREADS", "")
    return max(1, int(env)) if env.isdigit() else 1


def _load(args):
    path = args.config_path or args.config_flag
    if not path:
        raise ConfigError([(0, "no config file given (positional or --config)")])
    return load_config(path), path


def _prepare_out(args, cfg):
    out = args.out or cfg.output_directory
    os.makedirs(out, exist_ok=True)
    return out


class _Manifest:
    def __init__(self, out_dir, command, cfg, seed=None):
        self.out_dir = out_dir
        self.data = {
            "command": command,
            "artifacts": [],
            "config_text": serialize(cfg),
        }
        if seed is not None:
            self.data["seed"] = seed

    def path(self, name):
        self.data["artifacts"].append(name)
        return os.path.join(self.out_dir, name)

    def write(self):
        self.data["artifacts"] = sorted(self.data["artifacts"])
        with open(os.path.join(self.out_dir, "manifest.json"), "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _write_snapshots(manifest, traj):
    for i, t in enumerate(traj.times):
        if traj.rhos:
            write_field_text(manifest.path(f"rho_{i:04d}.txt"), traj.rhos[i], t)
        if traj.phis:
            write_field_text(manifest.path(f"phi_{i:04d}.txt"), traj.phis[i], t)


def _cmd_simulate(args):
    cfg, _ = _load(args)
    out = _prepare_out(args, cfg)
    manifest = _Manifest(out, "simulate", cfg)
    traj = coupling.run_quasi_stationary(cfg.quasi_run())
    coupling.write_diagnostics_csv(manifest.path("diagnostics.csv"), traj.diagnostics)
    _write_snapshots(manifest, traj)
    manifest.write()
    print(f"simulate: {len(traj.diagnostics) - 1} steps, artifacts in {out}")
    return 0


def _cmd_mfg(args):
    cfg, _ = _load(args)
    out = _prepare_out(args, cfg)
    manifest = _Manifest(out, "mfg", cfg)
    problem = cfg.mfg_problem()
    rho_traj, phi_traj, residuals = coupling.solve_mfg_picard(problem)
    with open(manifest.path("mfg_residuals.csv"), "w") as fh:
        fh.write("iteration,residual\n")
        for i, r in enumerate(residuals):
            fh.write(f"{i},{r:.15g}\n")
    coupling.write_diagnostics_csv(manifest.path("mfg_diagnostics.csv"), rho_traj.diagnostics)
    energy = coupling.energy_identity_residual(
        rho_traj, phi_traj, problem.rho0, problem.phi_T, problem.params)
    with open(manifest.path("energy.txt"), "w") as fh:
        fh.write(f"{energy:.15g}\n")
    every = cfg.snapshot_every
    n = len(rho_traj.times) - 1
    keep = [k for k in range(n + 1) if k % every == 0 or k == n]
    thin_rho = coupling.Trajectory(rho_traj.times[keep],
                                   rhos=[rho_traj.rhos[k] for k in keep])
    thin_phi = coupling.Trajectory(phi_traj.times[keep],
                                   phis=[phi_traj.phis[k] for k in keep])
    _write_snapshots(manifest, thin_rho)
    _write_snapshots(manifest, thin_phi)
    manifest.write()
    print(f"mfg: converged in {len(residuals)} outer iterations, "
          f"energy residual {energy:.3e}, artifacts in {out}")
    return 0


def _cmd_particles(args):
    cfg, _ = _load(args)
    out = _prepare_out(args, cfg)
    seed = args.seed if args.seed is not None else cfg.particle_seed
    manifest = _Manifest(out, "particles", cfg, seed=seed)
    run = cfg.quasi_run()
    rows = particles.run_mean_field_comparison(
        run, cfg.particle_count, seed, cfg.particle_smoothing)
    particles.write_comparison_csv(manifest.path("comparison.csv"), rows)
    manifest.write()
    worst = max(r[1] for r in rows)
    print(f"particles: {len(rows)} snapshots, worst L1 distance {worst:.4g}, "
          f"artifacts in {out}")
    return 0


def _cmd_sweep_sigma(args):
    cfg, _ = _load(args)
    out = _prepare_out(args, cfg)
    manifest = _Manifest(out, "sweep-sigma", cfg)
    sigmas = [float(s) for s in args.sigmas.split(",") if s.strip()]
    rows, results = coupling.vanishing_viscosity_sweep(
        cfg.quasi_run(), sigmas,
        csv_path=manifest.path("sigma_distances.csv"),
        n_jobs=_threads(args),
    )
    for s, traj in sorted(results.items(), reverse=True):
        if isinstance(traj, Exception):
            print(f"  sigma={s:g}: FAILED ({traj})")
            continue
        coupling.write_diagnostics_csv(
            manifest.path(f"diagnostics_sigma{s:g}.csv"), traj.diagnostics)
    manifest.write()
    for r in rows:
        print(f"  sigma {r['sigma_high']:g} -> {r['sigma_low']:g}: "
              f"d_rho={r['d_rho']:.6g} d_phi={r['d_phi']:.6g}")
    return 0


def _cmd_sweep_beta(args):
    cfg, _ = _load(args)
    out = _prepare_out(args, cfg)
    manifest = _Manifest(out, "sweep-beta", cfg)
    betas = [float(b) for b in args.betas.split(",") if b.strip()]
    anchor = cfg.rho_ref if cfg.phi_b == "auto" else None
    results, _rows = coupling.beta_sweep(
        cfg.quasi_run(), betas, anchor_rho=anchor,
        csv_path=manifest.path("beta_compare.csv"),
        n_jobs=_threads(args),
    )
    for b, traj in sorted(results.items()):
        coupling.write_diagnostics_csv(
            manifest.path(f"diagnostics_beta{b:g}.csv"), traj.diagnostics)
    manifest.write()
    print(f"sweep-beta: {len(results)} runs, artifacts in {out}")
    return 0


def _core_model_checks(rho_max, seed=20240915):
    """Quick deterministic battery over the pointwise algebra."""
    rng = np.random.default_rng(seed)
    checks = []

    def check(name, ok):
        checks.append((name, bool(ok)))

    ok = True
    for _ in range(200):
        params = ModelParams(beta=float(rng.uniform(0.0, 2.0)), rho_max=rho_max)
        rho = float(rng.uniform(0.0, 0.9 * rho_max))
        p1 = rng.uniform(-3.0, 3.0, 2)
        p2 = rng.uniform(-3.0, 3.0, 2)
        lam = float(rng.uniform())
        mix = hamiltonian(rho, lam * p1 + (1 - lam) * p2, params)
        bound = lam * hamiltonian(rho, p1, params) + (1 - lam) * hamiltonian(rho, p2, params)
        ok &= mix <= bound + 1e-12
    check("hamiltonian convex in p", ok)

    ok = True
    for _ in range(200):
        params = ModelParams(beta=float(rng.uniform(0.0, 2.0)), rho_max=rho_max)
        rho = float(rng.uniform(0.0, rho_max))
        p = rng.uniform(-3.0, 3.0, 2)
        excess = float(hamiltonian_p(rho, p, params) @ p - hamiltonian(rho, p, params))
        ok &= excess >= -1e-12
    check("H_p.p - H nonnegative", ok)

    ok = True
    for _ in range(50):
        params = ModelParams(beta=float(rng.uniform(0.0, 2.0)), rho_max=rho_max)
        rho = float(rng.uniform(0.1 * rho_max, 0.8 * rho_max))
        p = rng.uniform(-1.5, 1.5, 2)
        h = 1e-5
        fd = (hamiltonian(rho + h, p, params) - hamiltonian(rho - h, p, params)) / (2 * h)
        a = float(hamiltonian_rho(rho, p, params))
        ok &= abs(a - fd) <= 1e-6 * max(1.0, abs(a))
        v = hamiltonian_p(rho, p, params)
        dual = float(v @ p - hamiltonian(rho, p, params))
        ok &= abs(lagrangian(rho, v, params) - dual) <= 1e-12
    check("derivatives match finite differences; duality identity", ok)

    ok = True
    for _ in range(20):
        params = ModelParams(beta=float(rng.uniform(0.3, 1.8)), rho_max=rho_max)
        rho = float(rng.uniform(0.2 * rho_max, 0.7 * rho_max))
        p = rng.uniform(-1.0, 1.0, 2)
        q_range = 2.0 * float(np.linalg.norm(hamiltonian_p(rho, p, params))) + 1.0
        sup = legendre_sup_bruteforce(rho, p, params, q_range, 1e-2)
        ok &= abs(sup - float(hamiltonian(rho, p, params))) <= 1e-3
    check("Legendre brute force matches closed form", ok)

    p2 = ModelParams(beta=2.0, rho_max=rho_max)
    p0 = ModelParams(beta=0.0, rho_max=rho_max)
    ok = all(
        is_psd(monotonicity_matrix(float(rng.uniform(1e-3, 0.5 * rho_max)),
                                   rng.uniform(-10, 10, 2), p2))
        for _ in range(100)
    )
    ok &= not any(
        is_psd(monotonicity_matrix(float(rng.uniform(1e-3, rho_max * (1 - 1e-9))),
                                   rng.uniform(-10, 10, 2), p0))
        for _ in range(100)
    )
    check("uniqueness-condition dichotomy (beta 2 vs 0)", ok)
    return checks


def _cmd_check(args):
    cfg, _ = _load(args)
    params = cfg.params()
    grid = cfg.build_grid()
    rho0 = cfg.build_rho0(grid)
    phi_t = cfg.build_phi_t(grid)
    report = coupling.check_assumptions(rho0, phi_t, params, strict=False)
    print(report)
    failures = 0 if report.passed else 1
    for name, ok in _core_model_checks(params.rho_max):
        print(f"  model check: {name}: {'ok' if ok else 'FAIL'}")
        failures += 0 if ok else 1
    return 0 if failures == 0 else 1


def _cmd_render(args):
    rho_field, t = read_field(args.snapshot)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.snapshot))[0]

    cfg = None
    if args.config_flag:
        cfg = load_config(args.config_flag)
    vmin = args.vmin if args.vmin is not None else 0.0
    if args.vmax is not None:
        vmax = args.vmax
    elif cfg is not None:
        vmax = cfg.rho_max
    else:
        vmax = max(1.0, float(rho_field.values.max()))
    ppm = os.path.join(out, stem + ".ppm")
    render_ppm(rho_field, ppm, vmin=vmin, vmax=vmax)
    written = [ppm]

    if args.phi:
        if cfg is None:
            raise ConfigError([(0, "--phi rendering needs --config for the model params")])
        phi_field, _ = read_field(args.phi)
        arrows = os.path.join(out, stem + "_arrows.csv")
        write_arrow_csv(arrows, rho_field, phi_field, cfg.params(),
                        cfg.potential_spec(), stride=args.stride)
        written.append(arrows)
    print(f"render: t={t:g}, wrote " + ", ".join(written))
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "mfg": _cmd_mfg,
    "particles": _cmd_particles,
    "sweep-sigma": _cmd_sweep_sigma,
    "sweep-beta": _cmd_sweep_beta,
    "check": _cmd_check,
    "render": _cmd_render,
}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        for ln, msg in exc.errors:
            print(f"config error (line {ln}): {msg}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConvergenceError, CflError, DensityBoundError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        if isinstance(exc, ConvergenceError) and exc.residuals:
            tail = ", ".join(f"{r:.3e}" for r in exc.residuals[-5:])
            print(f"residual history (tail): {tail}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
