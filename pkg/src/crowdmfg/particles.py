"""Particle realization of the controlled dynamics.

Each agent follows dx = u dt + sqrt(2 sigma) dW with the same feedback
u = -f^beta(rho) grad phi that drives the macroscopic flux, consuming
the freshly solved fields each macroscopic step (closed-loop control).
Noise comes from counter-based Philox streams keyed (seed, purpose,
step), so runs are reproducible independently of scheduling.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter1d

from .coupling import quasi_stationary_states
from .grid import BoundarySpec, ScalarField, Wall, gradient_central, integrate, l1_distance
from .model import lagrangian, saturation_power

_PURPOSE_INIT = 0
_PURPOSE_DYNAMICS = 1
_PURPOSE_COST = 2


def philox_stream(seed, purpose, step):
    """Deterministic generator for one (seed, purpose, step) triple."""
    tag = (np.uint64(purpose) << np.uint64(48)) + np.uint64(step)
    key = np.array([np.uint64(seed), tag], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class ParticleEnsemble:
    positions: np.ndarray  # (n, 2)
    alive: np.ndarray      # (n,) bool
    rng_seed: int
    step_count: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.alive = np.asarray(self.alive, dtype=bool)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2 or self.positions.shape[0] < 1:
            raise ValueError("positions must have shape (n >= 1, 2)")
        if self.alive.shape != (self.positions.shape[0],):
            raise ValueError("alive flags do not match the particle count")

    @property
    def n(self):
        return self.positions.shape[0]

    @property
    def alive_fraction(self):
        return float(self.alive.mean())

    @classmethod
    def from_density(cls, rho_field, n, seed):
        """Sample n positions proportional to the density field: cells by
        a multinomial on the cell masses, then uniform jitter inside the
        cell."""
        g = rho_field.grid
        weights = np.clip(rho_field.values, 0.0, None).ravel()
        total = weights.sum()
        rng = philox_stream(seed, _PURPOSE_INIT, 0)
        if total <= 0.0:
            pos = rng.uniform([0.0, 0.0], [g.lx, g.ly], size=(n, 2))
        else:
            cells = rng.choice(weights.size, size=n, p=weights / total)
            ii, jj = np.unravel_index(cells, (g.nx, g.ny))
            jitter = rng.uniform(0.0, 1.0, size=(n, 2))
            pos = np.column_stack([
                (ii + jitter[:, 0]) * g.dx,
                (jj + jitter[:, 1]) * g.dy,
            ])
        return cls(pos, np.ones(n, dtype=bool), int(seed))


def interp_cell_centered(grid, values, points):
    """Bilinear interpolation of cell-centered values at points (n, 2);
    constant extrapolation beyond the outermost cell centers."""
    xs, ys = grid.xs, grid.ys
    x = np.clip(points[:, 0], xs[0], xs[-1])
    y = np.clip(points[:, 1], ys[0], ys[-1])
    ix = np.clip(((x - xs[0]) / grid.dx).astype(int), 0, grid.nx - 2)
    iy = np.clip(((y - ys[0]) / grid.dy).astype(int), 0, grid.ny - 2)
    wx = (x - xs[ix]) / grid.dx
    wy = (y - ys[iy]) / grid.dy
    v00 = values[ix, iy]
    v10 = values[ix + 1, iy]
    v01 = values[ix, iy + 1]
    v11 = values[ix + 1, iy + 1]
    return (v00 * (1 - wx) * (1 - wy) + v10 * wx * (1 - wy)
            + v01 * (1 - wx) * wy + v11 * wx * wy)


def _apply_axis_boundary(coord, alive, lower_cond, upper_cond, extent, periodic):
    """Wrap / reflect / absorb one coordinate axis in place."""
    if periodic:
        coord %= extent
        return
    for _ in range(16):
        below = alive & (coord < 0.0)
        above = alive & (coord > extent)
        if not below.any() and not above.any():
            break
        if below.any():
            if isinstance(lower_cond, Wall):
                coord[below] = -coord[below]
            else:  # Exit or Inflow: absorbed at the face
                alive[below] = False
                coord[below] = 0.0
        if above.any():
            if isinstance(upper_cond, Wall):
                coord[above] = 2.0 * extent - coord[above]
            else:
                alive[above] = False
                coord[above] = extent
    np.clip(coord, 0.0, extent, out=coord)


def step_particles(ensemble, phi_field, rho_field, dt, params, density_bc, potential_bc=None):
    """One Euler-Maruyama step under the optimal feedback.

    Dead (absorbed) particles stay frozen; the noise block is drawn for
    the whole ensemble regardless, so the streams stay aligned.
    """
    if potential_bc is None:
        potential_bc = density_bc
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    g = rho_field.grid
    pos = ensemble.positions.copy()
    alive = ensemble.alive.copy()

    grad = gradient_central(phi_field, potential_bc, "potential")
    gx = interp_cell_centered(g, grad.x, pos)
    gy = interp_cell_centered(g, grad.y, pos)
    rho_at = interp_cell_centered(g, rho_field.values, pos)
    fb = saturation_power(rho_at, params.beta, params)
    drift = -np.column_stack([fb * gx, fb * gy])

    rng = philox_stream(ensemble.rng_seed, _PURPOSE_DYNAMICS, ensemble.step_count)
    noise = rng.standard_normal((ensemble.n, 2))
    move = drift * dt + math.sqrt(2.0 * params.sigma * dt) * noise
    pos[alive] += move[alive]

    _apply_axis_boundary(pos[:, 0], alive, density_bc.left, density_bc.right,
                         g.lx, density_bc.periodic_x)
    _apply_axis_boundary(pos[:, 1], alive, density_bc.bottom, density_bc.top,
                         g.ly, density_bc.periodic_y)

    if not np.all(np.isfinite(pos)):
        bad = int(np.nonzero(~np.isfinite(pos).all(axis=1))[0][0])
        raise RuntimeError(f"particle {bad} reached a non-finite position")

    return ParticleEnsemble(pos, alive, ensemble.rng_seed, ensemble.step_count + 1)


def estimate_density(ensemble, grid, total_mass, smoothing_halfwidth=0, density_bc=None):
    """Cell histogram of alive particles scaled so the field integrates
    to total_mass * alive_fraction; optional (2w+1)-cell box smoothing
    (mass preserving: wrap on periodic axes, mirror otherwise)."""
    pos = ensemble.positions[ensemble.alive]
    counts, _, _ = np.histogram2d(
        pos[:, 0], pos[:, 1], bins=[grid.nx, grid.ny],
        range=[[0.0, grid.lx], [0.0, grid.ly]],
    )
    values = counts * (total_mass / (ensemble.n * grid.cell_area))
    if smoothing_halfwidth > 0:
        size = 2 * smoothing_halfwidth + 1
        mode_x = mode_y = "reflect"
        if density_bc is not None:
            mode_x = "wrap" if density_bc.periodic_x else "reflect"
            mode_y = "wrap" if density_bc.periodic_y else "reflect"
        values = uniform_filter1d(values, size, axis=0, mode=mode_x)
        values = uniform_filter1d(values, size, axis=1, mode=mode_y)
    return ScalarField(grid, values)


def run_mean_field_comparison(run, n_particles, seed, smoothing_halfwidth=1):
    """Co-evolve the macroscopic run and an ensemble driven by its
    fields; return rows (t, l1_distance, alive_fraction) at the snapshot
    cadence."""
    total_mass = integrate(run.rho0)
    ens = ParticleEnsemble.from_density(run.rho0, n_particles, seed)
    n = run.n_steps
    rows = []
    for k, t, rho, phi in quasi_stationary_states(run):
        if k % run.snapshot_every == 0 or k == n:
            est = estimate_density(ens, run.grid, total_mass,
                                   smoothing_halfwidth, run.density_bc)
            rows.append((t, l1_distance(est, rho), ens.alive_fraction))
        if k < n:
            ens = step_particles(ens, phi, rho, run.dt, run.params,
                                 run.density_bc, run.potential_bc)
    return rows


def write_comparison_csv(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write("t,l1_distance,alive_fraction\n")
        for t, d, frac in rows:
            fh.write(f"{t:.15g},{d:.15g},{frac:.15g}\n")


def write_ensemble_csv(path, ensemble):
    with open(path, "w", newline="") as fh:
        fh.write("x,y,alive\n")
        for (x, y), a in zip(ensemble.positions, ensemble.alive):
            fh.write(f"{x:.17g},{y:.17g},{int(a)}\n")


@dataclass(frozen=True)
class McCostEstimate:
    mean: float
    standard_error: float
    sample_count: int

    def __post_init__(self):
        if self.standard_error < 0.0:
            raise ValueError("standard error must be nonnegative")


def mc_cost_estimate(start_point, t_start, phi_traj, rho_traj, params, n_samples, seed):
    """Monte Carlo estimate of the expected cost-to-go from (t_start,
    start_point) under the feedback control along a solved torus
    trajectory pair: accumulates dt * L(rho, u) plus the terminal value,
    and reports the sample mean with its standard error.
    """
    times = rho_traj.times
    if len(times) != len(phi_traj.times) or not np.allclose(times, phi_traj.times):
        raise ValueError("mesh mismatch: trajectories use different time meshes")
    dt = float(times[1] - times[0])
    k0 = int(round(t_start / dt))
    if abs(k0 * dt - t_start) > 1e-9 * max(1.0, abs(t_start)) or not 0 <= k0 < len(times):
        raise ValueError(f"t_start={t_start} is not on the trajectory time mesh")

    g = rho_traj.rhos[0].grid
    torus = BoundarySpec.all_periodic()
    pos = np.tile(np.asarray(start_point, dtype=float), (n_samples, 1))
    cost = np.zeros(n_samples)
    n_levels = len(times) - 1
    for k in range(k0, n_levels):
        rho_f = rho_traj.rhos[k]
        phi_f = phi_traj.phis[k]
        grad = gradient_central(phi_f, torus, "potential")
        gx = interp_cell_centered(g, grad.x, pos)
        gy = interp_cell_centered(g, grad.y, pos)
        rho_at = interp_cell_centered(g, rho_f.values, pos)
        fb = saturation_power(rho_at, params.beta, params)
        u = -np.column_stack([fb * gx, fb * gy])
        cost += dt * lagrangian(rho_at, u, params)
        noise = philox_stream(seed, _PURPOSE_COST, k).standard_normal((n_samples, 2))
        pos = pos + u * dt + math.sqrt(2.0 * params.sigma * dt) * noise
        pos[:, 0] %= g.lx
        pos[:, 1] %= g.ly
    cost += interp_cell_centered(g, phi_traj.phis[-1].values, pos)

    mean = float(cost.mean())
    stderr = float(cost.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
    return McCostEstimate(mean, stderr, n_samples)
