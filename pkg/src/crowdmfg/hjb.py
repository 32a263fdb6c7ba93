"""Value-function solvers.

Three forms of the same equation are covered:

* inviscid stationary eikonal |grad phi| = F(x) via Godunov upwind fast
  sweeping (Gauss-Seidel in the four diagonal orderings),
* viscous stationary 1/2 f^beta |grad phi|^2 - sigma lap phi
  - 1/2 f^(2-beta) = 0 via a damped Picard iteration with lagged
  gradient and a direct linear solve,
* one backward step of the time-dependent viscous equation with a
  Lax-Friedrichs numerical Hamiltonian.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse
from numba import njit

from .errors import CflError, ConvergenceError
from .grid import ScalarField, cached_helmholtz_solver, fill_ghosts, laplacian
from .model import hamiltonian, saturation_power


@dataclass(frozen=True)
class SweepingConfig:
    # the default tolerance is at rounding level: the monotone updates
    # terminate exactly, which makes repeated solves bit-reproducible
    tolerance: float = 1e-15
    max_sweep_rounds: int = 1024
    large_value: float = 0.0  # 0 -> auto: 10 (lx+ly) max F

    def __post_init__(self):
        if self.tolerance <= 0.0:
            raise ValueError("sweeping tolerance must be positive")


@dataclass(frozen=True)
class StationaryHjbConfig:
    picard_damping: float = 1.0
    residual_tolerance: float = 1e-9
    max_iterations: int = 200

    def __post_init__(self):
        if not 0.0 < self.picard_damping <= 1.0:
            raise ValueError("picard_damping must lie in (0, 1]")
        if self.residual_tolerance <= 0.0 or self.max_iterations <= 0:
            raise ValueError("tolerance and max_iterations must be positive")


def eikonal_rhs(rho_field, params):
    """Right-hand side F = f^(1-beta)(rho) of |grad phi| = F.

    For beta = 1 this is identically one: the weighted distance ignores
    the density. The floored congestion factor is used for every beta:
    it regularizes the negative power for beta > 1 and keeps F positive
    at saturated cells for beta < 1, which the sweeping solver requires.
    """
    from .model import saturation_floored

    base = saturation_floored(rho_field.values, params)
    vals = base ** (1.0 - params.beta)
    return ScalarField(rho_field.grid, np.broadcast_to(vals, rho_field.values.shape).copy())


@njit(cache=True)
def _sweep_rounds(phi, speed, dx, dy, per_x, per_y, gl, gr, gb, gt, tol, max_rounds):
    # Gauss-Seidel along x (the sweep orderings pick the fresh x-side),
    # Jacobi within each column: same-column y-neighbors come from a
    # pre-update snapshot. Columnwise Jacobi keeps bitwise y-uniform data
    # exactly y-uniform, so the discrete uniform-density steady state is
    # an exact fixed point; the iteration is still a monotone relaxation
    # of the same Godunov equations and converges to the same solution.
    nx, ny = phi.shape
    idx2 = 1.0 / (dx * dx)
    idy2 = 1.0 / (dy * dy)
    col = np.empty(ny)
    orders = ((1, 1), (-1, 1), (-1, -1), (1, -1))
    for rnd in range(max_rounds):
        max_change = 0.0
        for sx, sy in orders:
            if sx == 1:
                i0, i1 = 0, nx
            else:
                i0, i1 = nx - 1, -1
            if sy == 1:
                j0, j1 = 0, ny
            else:
                j0, j1 = ny - 1, -1
            for i in range(i0, i1, sx):
                for j in range(ny):
                    col[j] = phi[i, j]
                for j in range(j0, j1, sy):
                    if i > 0:
                        vl = phi[i - 1, j]
                    elif per_x:
                        vl = phi[nx - 1, j]
                    else:
                        vl = gl[j]
                    if i < nx - 1:
                        vr = phi[i + 1, j]
                    elif per_x:
                        vr = phi[0, j]
                    else:
                        vr = gr[j]
                    if j > 0:
                        vb = col[j - 1]
                    elif per_y:
                        vb = col[ny - 1]
                    else:
                        vb = gb[i]
                    if j < ny - 1:
                        vt = col[j + 1]
                    elif per_y:
                        vt = col[0]
                    else:
                        vt = gt[i]
                    a = min(vl, vr)
                    b = min(vb, vt)
                    f = speed[i, j]
                    cand = min(a + f * dx, b + f * dy)
                    # two-sided root of ((v-a)/dx)^2 + ((v-b)/dy)^2 = f^2
                    qa = idx2 + idy2
                    qb = -2.0 * (a * idx2 + b * idy2)
                    qc = a * a * idx2 + b * b * idy2 - f * f
                    disc = qb * qb - 4.0 * qa * qc
                    if disc >= 0.0:
                        root = (-qb + math.sqrt(disc)) / (2.0 * qa)
                        if root >= max(a, b):
                            cand = root
                    old = phi[i, j]
                    if cand < old:
                        phi[i, j] = cand
                        change = old - cand
                        if change > max_change:
                            max_change = change
        if max_change <= tol:
            return rnd + 1
    return -1


def _dirichlet_ghost(cond_value, speed_edge, spacing):
    """Virtual neighbor behind a Dirichlet face: data minus half a cell
    of accumulated cost, so `ghost + F h` lands on the face-consistent
    cell value."""
    return cond_value - speed_edge * 0.5 * spacing


def solve_eikonal_sweeping(rhs, spec, config=None):
    """Fast-sweeping solve of |grad phi| = F with F = `rhs` > 0.

    Dirichlet data (Exit: 0, Inflow: phi_b) anchors phi at the matching
    faces; Wall edges are one-sided. Raises when no edge anchors phi,
    when F is not positive, or when max_sweep_rounds is exhausted.
    """
    if config is None:
        config = SweepingConfig()
    speed = rhs.values
    if np.any(speed <= 0.0) or not np.all(np.isfinite(speed)):
        raise ValueError("eikonal right-hand side must be positive and finite")
    if not spec.has_anchor:
        raise ValueError("eikonal solve needs an Exit or Inflow edge to anchor phi")

    g = rhs.grid
    big = config.large_value
    if big == 0.0:
        big = 10.0 * (g.lx + g.ly) * float(speed.max())
    phi = np.full((g.nx, g.ny), big)

    from .grid import _dirichlet_value

    def edge_ghost(cond, edge_speed, spacing, length):
        vb = _dirichlet_value(cond, "potential")
        if vb is None:  # wall: never wins the min
            return np.full(length, 2.0 * big)
        return _dirichlet_ghost(vb, edge_speed, spacing)

    gl = edge_ghost(spec.left, speed[0, :], g.dx, g.ny)
    gr = edge_ghost(spec.right, speed[-1, :], g.dx, g.ny)
    gb = edge_ghost(spec.bottom, speed[:, 0], g.dy, g.nx)
    gt = edge_ghost(spec.top, speed[:, -1], g.dy, g.nx)

    rounds = _sweep_rounds(
        phi, speed, g.dx, g.dy, spec.periodic_x, spec.periodic_y,
        np.asarray(gl, dtype=float), np.asarray(gr, dtype=float),
        np.asarray(gb, dtype=float), np.asarray(gt, dtype=float),
        config.tolerance, config.max_sweep_rounds,
    )
    if rounds < 0:
        raise ConvergenceError(
            f"fast sweeping did not converge in {config.max_sweep_rounds} rounds"
        )
    return ScalarField(g, phi)


def sweeping_residual(phi_field, rhs, interior_only=True):
    """Max |upwind gradient magnitude - F| of a sweeping solution.

    Checks that phi solves the discrete Godunov equation; restricted to
    cells with all four neighbors in the interior when interior_only.
    """
    v = phi_field.values
    f = rhs.values
    g = phi_field.grid
    a = np.minimum(v[:-2, 1:-1], v[2:, 1:-1])
    b = np.minimum(v[1:-1, :-2], v[1:-1, 2:])
    center = v[1:-1, 1:-1]
    gx = np.maximum(center - a, 0.0) / g.dx
    gy = np.maximum(center - b, 0.0) / g.dy
    res = np.hypot(gx, gy) - f[1:-1, 1:-1]
    if not interior_only:
        raise NotImplementedError("boundary-cell residual is not defined here")
    return float(np.abs(res).max())


def _upwind_advection_system(grid, spec, vx, vy):
    """Sparse upwind discretization of v . grad phi with the boundary
    ghosts of the potential field folded in: returns (A, extra) so that
    (v . grad phi)_flat == A @ phi_flat + extra.
    """
    from .grid import Periodic, Wall, _dirichlet_value

    nx, ny = grid.nx, grid.ny
    n = nx * ny
    rows, cols, vals = [], [], []
    extra = np.zeros(n)
    cell = np.arange(n).reshape(nx, ny)

    def add_direction(v, axis, spacing, lower_edge, upper_edge):
        coef = np.abs(v) / spacing
        # v > 0: backward difference (needs the lower neighbor); v < 0:
        # forward. Both give coef on the diagonal, -coef on the neighbor.
        for needs_lower in (True, False):
            mask = (v > 0.0) if needs_lower else (v < 0.0)
            if not mask.any():
                continue
            ii, jj = np.nonzero(mask)
            r = cell[ii, jj]
            c = coef[ii, jj]
            rows.append(r)
            cols.append(r)
            vals.append(c)
            if needs_lower:
                inside = (ii > 0) if axis == 0 else (jj > 0)
                cond = spec.edge(lower_edge)
                step_i, step_j = (-1, 0) if axis == 0 else (0, -1)
            else:
                inside = (ii < nx - 1) if axis == 0 else (jj < ny - 1)
                cond = spec.edge(upper_edge)
                step_i, step_j = (1, 0) if axis == 0 else (0, 1)
            rows.append(r[inside])
            cols.append(cell[ii[inside] + step_i, jj[inside] + step_j])
            vals.append(-c[inside])
            out = ~inside
            if not out.any():
                continue
            ro, co = r[out], c[out]
            if isinstance(cond, Periodic):
                rows.append(ro)
                cols.append(cell[(ii[out] + step_i) % nx, (jj[out] + step_j) % ny])
                vals.append(-co)
            elif isinstance(cond, Wall):
                # ghost equals the interior value: the one-sided
                # difference vanishes, cancel the diagonal entry
                rows.append(ro)
                cols.append(ro)
                vals.append(-co)
            else:
                # ghost = 2 vb - phi: (phi - ghost)/h = 2 (phi - vb)/h
                vb = _dirichlet_value(cond, "potential")
                rows.append(ro)
                cols.append(ro)
                vals.append(co)
                extra[ro] += -2.0 * co * vb

    add_direction(vx, 0, grid.dx, "left", "right")
    add_direction(vy, 1, grid.dy, "bottom", "top")
    if rows:
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
    a = sparse.csc_matrix((vals, (rows, cols)), shape=(n, n))
    return a, extra


def solve_viscous_stationary_hjb(rho_field, params, spec, config=None, phi_init=None):
    """Policy-iteration solve of the stationary viscous value equation

        1/2 f^beta(rho) |grad phi|^2 - sigma lap phi - 1/2 f^(2-beta)(rho) = 0.

    Each pass freezes the control u = -f^beta grad phi_k and solves the
    linearized equation exactly:

        (-u . grad - sigma lap) phi = 1/2 f^beta |grad phi_k|^2
                                      + 1/2 f^(2-beta),

    with the advection upwinded (an M-matrix together with the
    diffusion), then relaxes phi by picard_damping. The lagged
    linearization is solved with the gradient frozen one iteration
    behind, and the returned phi satisfies |phi_new - phi| below
    residual_tolerance by construction. Needs sigma > 0 and at least one
    Dirichlet edge (otherwise the linear operator is singular and, on
    the torus, no smooth stationary solution exists while
    f^(2-beta) > 0).
    """
    if config is None:
        config = StationaryHjbConfig()
    sigma = params.sigma
    if sigma <= 0.0:
        raise ValueError("viscous stationary solve needs sigma > 0 (use sweeping at sigma = 0)")
    if not spec.has_anchor:
        raise ValueError(
            "viscous stationary solve needs an anchored edge: with periodic/wall "
            "boundaries only, the linear operator is singular and no smooth "
            "stationary solution exists for f^(2-beta) > 0"
        )

    from .grid import build_laplacian, gradient_central

    g = rho_field.grid
    rho = rho_field.values
    b = params.beta
    fb = saturation_power(rho, b, params)
    f2b = saturation_power(rho, 2.0 - b, params)
    lap, lap_c = build_laplacian(g, spec, "potential")
    phi = phi_init.copy() if phi_init is not None else ScalarField.full(g, 0.0)
    theta = config.picard_damping
    residuals = []
    best = math.inf
    since_best = 0
    for _ in range(config.max_iterations):
        grad = gradient_central(phi, spec, "potential")
        grad2 = grad.x ** 2 + grad.y ** 2
        # advection velocity of the linearized operator: -u = f^beta grad phi
        vx = fb * grad.x
        vy = fb * grad.y
        adv, adv_extra = _upwind_advection_system(g, spec, vx, vy)
        a = (adv - sigma * lap).tocsc()
        rhs = (0.5 * fb * grad2 + 0.5 * f2b).ravel() - adv_extra + sigma * lap_c
        new = sparse.linalg.spsolve(a, rhs).reshape(g.nx, g.ny)
        res = float(np.abs(new - phi.values).max())
        residuals.append(res)
        phi = ScalarField(g, (1.0 - theta) * phi.values + theta * new)
        if res < config.residual_tolerance:
            return phi
        # upwind chattering shows up as a residual plateau; extra
        # relaxation breaks the cycle
        if res < 0.9 * best:
            best, since_best = res, 0
        else:
            since_best += 1
            if since_best >= 8:
                theta = max(0.5 * theta, 0.05)
                since_best = 0
    raise ConvergenceError(
        f"stationary HJB policy iteration stalled at residual {residuals[-1]:.3e} "
        f"after {config.max_iterations} iterations; try a smaller picard_damping",
        residuals,
    )


def _one_sided_gradients(phi_field, spec):
    g = fill_ghosts(phi_field, spec, "potential")
    dx, dy = phi_field.grid.dx, phi_field.grid.dy
    c = g[1:-1, 1:-1]
    dxp = (g[2:, 1:-1] - c) / dx
    dxm = (c - g[:-2, 1:-1]) / dx
    dyp = (g[1:-1, 2:] - c) / dy
    dym = (c - g[1:-1, :-2]) / dy
    return dxp, dxm, dyp, dym


def lax_friedrichs_hamiltonian(phi_field, rho_field, params, spec):
    """Monotone numerical Hamiltonian H(rho, D_c phi) - alpha . (D+ - D-)/2
    with per-axis dissipation alpha = max |H_p| over the field."""
    dxp, dxm, dyp, dym = _one_sided_gradients(phi_field, spec)
    cx = 0.5 * (dxp + dxm)
    cy = 0.5 * (dyp + dym)
    rho = rho_field.values
    fb = saturation_power(rho, params.beta, params)
    ax = float(np.abs(fb * cx).max())
    ay = float(np.abs(fb * cy).max())
    grad = np.stack([cx, cy], axis=-1)
    h = hamiltonian(rho, grad, params)
    h_num = h - 0.5 * ax * (dxp - dxm) - 0.5 * ay * (dyp - dym)
    return h_num, max(ax, ay)


def step_backward_hjb(phi_next, rho_field, dt, params, spec, scheme="implicit"):
    """One backward-in-time step of -d phi/dt + H(rho, grad phi)
    - sigma lap phi = 0 from phi(t+dt) to phi(t).

    Default is semi-implicit: Lax-Friedrichs Hamiltonian explicit in
    phi_next, diffusion by a 5-point linear solve. The explicit scheme
    guards dt <= min(h / (2 alpha), h^2 / (8 sigma)).
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    g = phi_next.grid
    sigma = params.sigma
    h_num, alpha = lax_friedrichs_hamiltonian(phi_next, rho_field, params, spec)
    explicit_part = phi_next.values - dt * h_num

    if scheme == "implicit":
        if sigma == 0.0:
            return ScalarField(g, explicit_part)
        solve = cached_helmholtz_solver(g, spec, "potential", dt * sigma)
        return ScalarField(g, solve(explicit_part.ravel()).reshape(g.nx, g.ny))
    if scheme == "explicit":
        h = min(g.dx, g.dy)
        limit = math.inf
        if alpha > 0.0:
            limit = h / (2.0 * alpha)
        if sigma > 0.0:
            limit = min(limit, h * h / (8.0 * sigma))
        if dt > limit:
            raise CflError(
                f"explicit backward step dt={dt:g} exceeds the stability bound {limit:g}"
            )
        diff = laplacian(phi_next, spec, "potential").values
        return ScalarField(g, explicit_part + dt * sigma * diff)
    raise ValueError(f"unknown scheme {scheme!r}")
