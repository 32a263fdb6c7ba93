"""Orchestration of the coupled density / value-function systems.

Two couplings are provided:

* quasi-stationary: at every time slice the stationary value equation is
  re-solved for the current density (fast sweeping by default, the
  viscous stationary solver optionally), then the density takes one
  forward step;
* time-dependent forward-backward fixed point on the torus: the value
  function is marched backward from terminal data along a frozen density
  path, the density forward along the resulting value path, and the
  path is relaxed until the iteration is stationary.

Diagnostics rows record mass, density bounds, the spatial variance, and
the three energy integrals used by the a-priori estimate.
"""

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConvergenceError, DensityBoundError
from .fp import FpStepConfig, stable_dt, step_fp
from .grid import (
    BoundarySpec,
    Grid2D,
    Inflow,
    ScalarField,
    gradient_central,
    integrate,
    l1_distance,
    variance,
)
from .hjb import (
    StationaryHjbConfig,
    SweepingConfig,
    eikonal_rhs,
    solve_eikonal_sweeping,
    solve_viscous_stationary_hjb,
    step_backward_hjb,
)
from .model import ModelParams, hamiltonian, hamiltonian_p, saturation_power


@dataclass(frozen=True)
class DiagnosticsRow:
    t: float
    mass: float
    rho_min: float
    rho_max: float
    variance: float
    kinetic: float      # integral of rho f^beta |grad phi|^2
    potential: float    # integral of rho f^(2-beta)
    grad_energy: float  # integral of f^beta |grad phi|^2


DIAGNOSTICS_HEADER = "t,mass,rho_min,rho_max,variance,kinetic,potential,grad_energy"


def diagnostics_row(t, rho_field, phi_field, params, potential_bc):
    rho = rho_field.values
    grad = gradient_central(phi_field, potential_bc, "potential")
    grad2 = grad.x ** 2 + grad.y ** 2
    fb = saturation_power(rho, params.beta, params)
    f2b = saturation_power(rho, 2.0 - params.beta, params)
    area = rho_field.grid.cell_area
    return DiagnosticsRow(
        t=t,
        mass=integrate(rho_field),
        rho_min=float(rho.min()),
        rho_max=float(rho.max()),
        variance=variance(rho_field),
        kinetic=float((rho * fb * grad2).sum() * area),
        potential=float((rho * f2b).sum() * area),
        grad_energy=float((fb * grad2).sum() * area),
    )


def write_diagnostics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write(DIAGNOSTICS_HEADER + "\n")
        for r in rows:
            fh.write(
                ",".join(
                    f"{v:.15g}"
                    for v in (r.t, r.mass, r.rho_min, r.rho_max, r.variance,
                              r.kinetic, r.potential, r.grad_energy)
                )
                + "\n"
            )


@dataclass
class Trajectory:
    """Time-indexed snapshots plus per-step diagnostics rows."""

    times: np.ndarray
    rhos: list = field(default_factory=list)
    phis: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)


def _steps_from_horizon(t_end, dt):
    n = int(round(t_end / dt))
    if n < 1 or abs(n * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError(f"t_end={t_end} is not a positive multiple of dt={dt}")
    return n


@dataclass
class QuasiStationaryRun:
    """Configuration of one quasi-stationary evolution.

    The density and the value function carry separate boundary specs:
    the reference experiment is periodic in x for rho while phi is
    anchored by Dirichlet data on the x edges. `hjb_mode` picks the
    stationary solver: "sweeping" treats the value equation as inviscid
    (sigma enters the density equation only), "viscous" solves the
    stationary viscous equation with the same sigma.
    """

    params: ModelParams
    grid: Grid2D
    density_bc: BoundarySpec
    potential_bc: BoundarySpec
    rho0: ScalarField
    t_end: float
    dt: float
    snapshot_every: int = 20
    hjb_mode: str = "sweeping"
    sweeping: SweepingConfig = SweepingConfig()
    stationary: StationaryHjbConfig = StationaryHjbConfig()
    fp: FpStepConfig = FpStepConfig()
    allow_substeps: bool = True

    def __post_init__(self):
        if self.hjb_mode not in ("sweeping", "viscous"):
            raise ValueError(f"unknown hjb_mode {self.hjb_mode!r}")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")
        if self.rho0.grid != self.grid:
            raise ValueError("rho0 lives on a different grid")
        v = self.rho0.values
        if v.min() < 0.0 or v.max() > self.params.rho_max:
            raise ValueError("rho0 must satisfy 0 <= rho0 <= rho_max")

    @property
    def n_steps(self):
        return _steps_from_horizon(self.t_end, self.dt)


def _solve_potential(run, rho_field, phi_warm=None):
    if run.hjb_mode == "sweeping":
        return solve_eikonal_sweeping(
            eikonal_rhs(rho_field, run.params), run.potential_bc, run.sweeping
        )
    return solve_viscous_stationary_hjb(
        rho_field, run.params, run.potential_bc, run.stationary, phi_init=phi_warm
    )


def _advance_density(run, rho_field, phi_field, dt):
    """One outer FP advance, sub-stepped when the CFL bound is tighter
    than dt (velocities are re-assembled per sub-step; phi is frozen)."""
    remaining = dt
    rho = rho_field
    while remaining > 1e-14 * dt:
        if run.allow_substeps:
            bound = stable_dt(rho, phi_field, run.params,
                              run.density_bc, run.potential_bc, run.fp)
            take = remaining if remaining <= bound else remaining / math.ceil(remaining / bound)
        else:
            take = remaining
        rho = step_fp(rho, phi_field, take, run.params,
                      run.density_bc, run.potential_bc, run.fp)
        remaining -= take
    return rho


def quasi_stationary_states(run):
    """Yield (step, t, rho, phi) per time level, phi freshly solved.

    The generator drives both the plain macroscopic run and the coupled
    particle comparison. Density bound violations abort with the
    offending step index.
    """
    rho = run.rho0.copy()
    n = run.n_steps
    phi = None
    for k in range(n + 1):
        phi = _solve_potential(run, rho, phi_warm=phi)
        yield k, k * run.dt, rho, phi
        if k == n:
            break
        rho = _advance_density(run, rho, phi, run.dt)
        if rho.values.min() < -1e-12 or rho.values.max() > run.params.rho_max + 1e-8:
            raise DensityBoundError(
                f"density left [0, rho_max] at step {k + 1}: "
                f"min={rho.values.min():.3e}, max={rho.values.max():.6f}",
                step=k + 1,
            )


def run_quasi_stationary(run):
    """Run the quasi-stationary coupling to t_end; deterministic."""
    n = run.n_steps
    snap_times, rhos, phis, rows = [], [], [], []
    for k, t, rho, phi in quasi_stationary_states(run):
        rows.append(diagnostics_row(t, rho, phi, run.params, run.potential_bc))
        if k % run.snapshot_every == 0 or k == n:
            snap_times.append(t)
            rhos.append(rho.copy())
            phis.append(phi.copy())
    return Trajectory(np.asarray(snap_times), rhos, phis, rows)


# ---------------------------------------------------------------------------
# forward-backward fixed point on the torus


@dataclass
class MfgProblem:
    """Terminal-value problem on the all-periodic grid.

    rho0 must lie strictly inside (0, rho_max); phi_T only needs a lower
    bound (its minimum plays the role of the constant c0).
    """

    params: ModelParams
    grid: Grid2D
    rho0: ScalarField
    phi_T: ScalarField
    t_end: float
    dt: float
    damping: float = 0.5
    tolerance: float = 1e-6
    max_outer: int = 200
    fp: FpStepConfig = FpStepConfig()

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.rho0.grid != self.grid or self.phi_T.grid != self.grid:
            raise ValueError("fields live on a different grid")
        v = self.rho0.values
        if v.min() <= 0.0 or v.max() >= self.params.rho_max:
            raise ValueError("MFG mode needs 0 < rho0 < rho_max pointwise")
        if not np.all(np.isfinite(self.phi_T.values)):
            raise ValueError("phi_T must be finite (bounded below)")
        _steps_from_horizon(self.t_end, self.dt)

    @property
    def n_steps(self):
        return _steps_from_horizon(self.t_end, self.dt)

    @property
    def spec(self):
        return BoundarySpec.all_periodic()


def solve_mfg_picard(problem):
    """Damped fixed point for the forward-backward system.

    Returns (rho_traj, phi_traj, outer_residuals); the density
    trajectory carries the diagnostics rows. Raises ConvergenceError
    (with the residual history) when max_outer is exhausted.
    """
    p = problem
    n = p.n_steps
    g = p.grid
    spec = p.spec
    theta = p.damping

    rho_path = np.repeat(p.rho0.values[np.newaxis], n + 1, axis=0)
    phi_path = np.empty_like(rho_path)
    residuals = []
    for _ in range(p.max_outer):
        phi_path[n] = p.phi_T.values
        for k in range(n - 1, -1, -1):
            phi_path[k] = step_backward_hjb(
                ScalarField(g, phi_path[k + 1]), ScalarField(g, rho_path[k]),
                p.dt, p.params, spec,
            ).values
        rho_new = np.empty_like(rho_path)
        rho_new[0] = p.rho0.values
        for k in range(n):
            rho_new[k + 1] = step_fp(
                ScalarField(g, rho_new[k]), ScalarField(g, phi_path[k]),
                p.dt, p.params, spec, spec, p.fp,
            ).values
        damped = (1.0 - theta) * rho_path + theta * rho_new
        diff = np.abs(damped - rho_path).sum(axis=(1, 2)) * g.cell_area
        residual = float(diff.max())
        rho_path = damped
        residuals.append(residual)
        if residual < p.tolerance:
            break
    else:
        raise ConvergenceError(
            f"forward-backward iteration still at residual {residuals[-1]:.3e} "
            f"after {p.max_outer} outer iterations",
            residuals,
        )

    # one more backward pass so the returned phi matches the final rho path
    phi_path[n] = p.phi_T.values
    for k in range(n - 1, -1, -1):
        phi_path[k] = step_backward_hjb(
            ScalarField(g, phi_path[k + 1]), ScalarField(g, rho_path[k]),
            p.dt, p.params, spec,
        ).values

    times = np.arange(n + 1) * p.dt
    rho_fields = [ScalarField(g, rho_path[k].copy()) for k in range(n + 1)]
    phi_fields = [ScalarField(g, phi_path[k].copy()) for k in range(n + 1)]
    rows = [
        diagnostics_row(times[k], rho_fields[k], phi_fields[k], p.params, spec)
        for k in range(n + 1)
    ]
    rho_traj = Trajectory(times, rhos=rho_fields, diagnostics=rows)
    phi_traj = Trajectory(times, phis=phi_fields)
    return rho_traj, phi_traj, residuals


def energy_identity_residual(rho_traj, phi_traj, rho0, phi_T, params):
    """Defect of the torus energy balance

        <phi(0), rho0> = <rho(T), phi_T> + sum_t dt int rho (H_p . grad phi - H)

    with left-endpoint time quadrature. The accumulated integrand is the
    nonnegative quantity rho (1/2 f^beta |grad phi|^2 + 1/2 f^(2-beta));
    a materially negative value means mismatched inputs.
    """
    times_r, times_p = rho_traj.times, phi_traj.times
    if len(times_r) != len(times_p) or not np.allclose(times_r, times_p):
        raise ValueError("mesh mismatch: trajectories use different time meshes")
    rhos, phis = rho_traj.rhos, phi_traj.phis
    if not rhos or not phis or rhos[0].grid != phis[0].grid:
        raise ValueError("mesh mismatch: trajectories use different grids")
    g = rhos[0].grid
    spec = BoundarySpec.all_periodic()
    n = len(times_r) - 1
    dt = float(times_r[1] - times_r[0])

    e = integrate(ScalarField(g, phis[0].values * rho0.values))
    e -= integrate(ScalarField(g, rhos[n].values * phi_T.values))
    for k in range(n):
        grad = gradient_central(phis[k], spec, "potential").stacked()
        rho = rhos[k].values
        excess = np.sum(hamiltonian_p(rho, grad, params) * grad, axis=-1) \
            - hamiltonian(rho, grad, params)
        term = float((rho * excess).sum() * g.cell_area)
        if term < -1e-12 * max(1.0, abs(e)):
            raise RuntimeError(f"energy integrand negative at step {k}: {term:.3e}")
        e -= dt * term
    return e


# ---------------------------------------------------------------------------
# parameter sweeps


def _run_members(runs, n_jobs):
    """Execute keyed runs, optionally fanned out over threads; failures
    are captured per key so a sweep can continue past a failing member.
    Aggregation is keyed, hence independent of completion order."""

    def attempt(run):
        try:
            return run_quasi_stationary(run)
        except Exception as exc:
            return exc

    keys = list(runs)
    if n_jobs <= 1 or len(keys) <= 1:
        return {k: attempt(runs[k]) for k in keys}
    with ThreadPoolExecutor(max_workers=min(n_jobs, len(keys))) as pool:
        outs = list(pool.map(attempt, [runs[k] for k in keys]))
    return dict(zip(keys, outs))


def vanishing_viscosity_sweep(base_run, sigma_list, csv_path=None, n_jobs=1):
    """Re-run `base_run` for each viscosity and report consecutive
    max-in-time L1 distances of the density and value snapshots.

    sigma_list must be strictly decreasing and positive. A failing member
    is recorded (distances become nan) and the sweep continues.
    """
    sigmas = [float(s) for s in sigma_list]
    if any(b >= a for a, b in zip(sigmas, sigmas[1:])):
        raise ValueError("sigma_list must be strictly decreasing")
    if sigmas and sigmas[-1] <= 0.0:
        raise ValueError("sigma values must be positive")

    results = _run_members(
        {s: replace(base_run, params=replace(base_run.params, sigma=s))
         for s in sigmas},
        n_jobs,
    )

    rows = []
    for hi, lo in zip(sigmas, sigmas[1:]):
        ta, tb = results[hi], results[lo]
        if isinstance(ta, Exception) or isinstance(tb, Exception):
            rows.append({"sigma_high": hi, "sigma_low": lo,
                         "d_rho": math.nan, "d_phi": math.nan})
            continue
        d_rho = max(l1_distance(a, b) for a, b in zip(ta.rhos, tb.rhos))
        d_phi = max(l1_distance(a, b) for a, b in zip(ta.phis, tb.phis))
        rows.append({"sigma_high": hi, "sigma_low": lo, "d_rho": d_rho, "d_phi": d_phi})

    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sigma_high", "sigma_low", "d_rho", "d_phi"])
            for r in rows:
                w.writerow([f"{r[k]:.15g}" for k in ("sigma_high", "sigma_low", "d_rho", "d_phi")])
    return rows, results


def anchored_potential_bc(potential_bc, params, grid, anchor_rho):
    """Recompute Inflow anchors as f^(1-beta)(anchor_rho) * extent: the
    Dirichlet value consistent with the uniform-density exact solution
    depends on beta, so sweeps over beta must refresh it."""
    speed = float(saturation_power(anchor_rho, 1.0 - params.beta, params))

    def remap(cond, extent):
        if isinstance(cond, Inflow):
            return Inflow(rho_b=cond.rho_b, phi_b=speed * extent)
        return cond

    return BoundarySpec(
        left=remap(potential_bc.left, grid.lx),
        right=remap(potential_bc.right, grid.lx),
        bottom=remap(potential_bc.bottom, grid.ly),
        top=remap(potential_bc.top, grid.ly),
    )


def beta_sweep(base_run, beta_list, anchor_rho=None, csv_path=None, n_jobs=1):
    """Run the quasi-stationary evolution once per beta (shared rho0 and
    sigma) and collect the variance / max-density time series side by
    side. When anchor_rho is given, Inflow anchors are recomputed per
    beta via `anchored_potential_bc`.
    """
    runs = {}
    for beta in beta_list:
        params = replace(base_run.params, beta=float(beta))
        pot = base_run.potential_bc
        if anchor_rho is not None:
            pot = anchored_potential_bc(pot, params, base_run.grid, anchor_rho)
        runs[float(beta)] = replace(base_run, params=params, potential_bc=pot)
    results = _run_members(runs, n_jobs)
    for beta, traj in results.items():
        if isinstance(traj, Exception):
            raise traj

    betas = sorted(results)
    n_rows = len(results[betas[0]].diagnostics)
    rows = []
    for i in range(n_rows):
        row = {"t": results[betas[0]].diagnostics[i].t}
        for b in betas:
            d = results[b].diagnostics[i]
            row[f"variance_beta{b:g}"] = d.variance
            row[f"rho_max_beta{b:g}"] = d.rho_max
        rows.append(row)

    if csv_path is not None:
        headers = list(rows[0].keys())
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(headers)
            for row in rows:
                w.writerow([f"{row[h]:.15g}" for h in headers])
    return results, rows


# ---------------------------------------------------------------------------
# data validation


@dataclass(frozen=True)
class AssumptionReport:
    passed: bool
    c0: float
    violations: tuple
    strict: bool

    def __str__(self):
        status = "pass" if self.passed else "fail"
        lines = [f"assumption check: {status} (c0 = {self.c0:.6g})"]
        for i, j, value, msg in self.violations[:20]:
            lines.append(f"  cell ({i}, {j}): value {value:.6g} {msg}")
        if len(self.violations) > 20:
            lines.append(f"  ... {len(self.violations) - 20} more")
        return "\n".join(lines)


def check_assumptions(rho0, phi_T, params, strict=True):
    """Validate the initial/terminal data: 0 < rho0 < rho_max pointwise
    (strict for the forward-backward mode; <= is allowed for the
    quasi-stationary coupling when strict=False) and phi_T bounded below
    (c0 = min phi_T). Lists every violating cell."""
    violations = []
    v = rho0.values
    for i, j in zip(*np.nonzero(~np.isfinite(v))):
        violations.append((int(i), int(j), float(v[i, j]), "rho0 not finite"))
    if strict:
        bad = (v <= 0.0) | (v >= params.rho_max)
        msg = "outside (0, rho_max)"
    else:
        bad = (v < 0.0) | (v > params.rho_max)
        msg = "outside [0, rho_max]"
    for i, j in zip(*np.nonzero(bad & np.isfinite(v))):
        violations.append((int(i), int(j), float(v[i, j]), msg))
    w = phi_T.values
    for i, j in zip(*np.nonzero(~np.isfinite(w))):
        violations.append((int(i), int(j), float(w[i, j]), "phi_T not finite"))
    c0 = float(w.min()) if np.all(np.isfinite(w)) else math.nan
    return AssumptionReport(
        passed=not violations, c0=c0, violations=tuple(violations), strict=strict
    )
