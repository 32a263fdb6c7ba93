"""Conservative forward advance of the density equation

    d rho/dt - div(rho f^beta(rho) grad phi) - sigma lap rho = 0

by a donor-cell upwind finite-volume scheme. Both the density and the
congestion factor in the flux are evaluated at the upwind cell, which
preserves positivity and stalls outflow from saturated cells. Diffusion
is either explicit (flux form) or an implicit 5-point solve.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import CflError
from .grid import (
    Exit,
    Inflow,
    Periodic,
    ScalarField,
    Wall,
    _dirichlet_value,
    cached_helmholtz_solver,
    divergence_from_faces,
    fill_ghosts,
)
from .model import saturation_power


@dataclass(frozen=True)
class FpStepConfig:
    diffusion_mode: str = "implicit"
    cfl_safety: float = 0.9

    def __post_init__(self):
        if self.diffusion_mode not in ("implicit", "explicit"):
            raise ValueError(f"unknown diffusion mode {self.diffusion_mode!r}")
        if not 0.0 < self.cfl_safety <= 1.0:
            raise ValueError("cfl_safety must lie in (0, 1]")


def _face_gradient_signs(phi_field, potential_bc):
    """Raw face-normal drift direction g = -grad phi . n on all faces.

    Returns (gx, gy) with shapes (nx+1, ny) and (nx, ny+1); boundary faces
    use the potential-spec ghosts, so Dirichlet faces see the two-point
    difference against the face value.
    """
    g = fill_ghosts(phi_field, potential_bc, "potential")
    grid = phi_field.grid
    gx = -(g[1:, 1:-1] - g[:-1, 1:-1]) / grid.dx
    gy = -(g[1:-1, 1:] - g[1:-1, :-1]) / grid.dy
    return gx, gy


def _exterior_density(rho, density_bc, edge, axis_slice):
    """Donor value seen from outside the domain across a boundary face."""
    cond = density_bc.edge(edge)
    if isinstance(cond, Periodic):
        return {"left": rho[-1, :], "right": rho[0, :],
                "bottom": rho[:, -1], "top": rho[:, 0]}[edge]
    if isinstance(cond, Wall):
        return axis_slice  # flux is zeroed at walls; value is inert
    return np.full_like(axis_slice, _dirichlet_value(cond, "density"))


def _merge_wrap_drift(g, lower_cond, upper_cond, axis):
    """Unify the two boundary faces into one wrapped face when the
    density is periodic along an axis but the potential is not.

    The wrapped face must carry the periodic extension of the velocity.
    The gradient at the *downstream* Dirichlet face is determined by the
    donor cell alone (its ghost mirrors the face data), which keeps the
    flux paired with the donor's own eikonal data; the upstream face
    gradient instead integrates value fluctuations across the whole
    domain and must not be used. Fall back to the nearest interior faces
    when the downstream edge carries no Dirichlet data.
    """
    if axis == 1:
        g = g.T
    lower_face, upper_face = g[0, :], g[-1, :]
    interior = 0.5 * (g[1, :] + g[-2, :])
    downstream_plus = isinstance(upper_cond, (Exit, Inflow))
    downstream_minus = isinstance(lower_cond, (Exit, Inflow))
    wrap = np.where(
        interior >= 0.0,
        upper_face if downstream_plus else interior,
        lower_face if downstream_minus else interior,
    )
    g[0, :] = wrap
    g[-1, :] = wrap


def _face_upwind(rho, density_bc):
    """Left/right (bottom/top) donor candidates on x- and y-faces."""
    nx, ny = rho.shape
    lx = np.empty((nx + 1, ny))
    rx = np.empty((nx + 1, ny))
    lx[1:, :] = rho
    rx[:-1, :] = rho
    lx[0, :] = _exterior_density(rho, density_bc, "left", rho[0, :])
    rx[-1, :] = _exterior_density(rho, density_bc, "right", rho[-1, :])

    by_ = np.empty((nx, ny + 1))
    ty = np.empty((nx, ny + 1))
    by_[:, 1:] = rho
    ty[:, :-1] = rho
    by_[:, 0] = _exterior_density(rho, density_bc, "bottom", rho[:, 0])
    ty[:, -1] = _exterior_density(rho, density_bc, "top", rho[:, -1])
    return lx, rx, by_, ty


def _wall_face_masks(grid, density_bc):
    wx = np.zeros((grid.nx + 1, grid.ny), dtype=bool)
    wy = np.zeros((grid.nx, grid.ny + 1), dtype=bool)
    if isinstance(density_bc.left, Wall):
        wx[0, :] = True
    if isinstance(density_bc.right, Wall):
        wx[-1, :] = True
    if isinstance(density_bc.bottom, Wall):
        wy[:, 0] = True
    if isinstance(density_bc.top, Wall):
        wy[:, -1] = True
    return wx, wy


def _mass_flux_density(rho, params):
    """q(rho) = rho f^beta(rho), the transported mass per unit drift.

    Unimodal on [0, rho_max] with maximizer rho_max / (1 + beta); for
    beta = 0 it is linear (f^0 == 1) and the saturation acts only
    through the eikonal feedback.
    """
    return rho * saturation_power(rho, params.beta, params)


def _critical_density(params):
    return params.rho_max / (1.0 + params.beta)


def _godunov_face_flux(g, rho_minus, rho_plus, params):
    """Godunov (supply-demand) flux for the unimodal q through faces
    with signed drift g; rho_minus / rho_plus sit on the lower / upper
    side of the face. Reduces to the donor-cell flux whenever both
    states are on the same monotone branch of q.
    """
    crit = _critical_density(params)
    demand_minus = _mass_flux_density(np.minimum(rho_minus, crit), params)
    supply_minus = _mass_flux_density(np.maximum(rho_minus, crit), params)
    demand_plus = _mass_flux_density(np.minimum(rho_plus, crit), params)
    supply_plus = _mass_flux_density(np.maximum(rho_plus, crit), params)
    forward = np.minimum(demand_minus, supply_plus)   # flow toward +axis
    backward = np.minimum(demand_plus, supply_minus)  # flow toward -axis
    return g * np.where(g >= 0.0, forward, backward)


def _assemble_advection(rho_field, phi_field, params, density_bc, potential_bc):
    """Face velocities and advective fluxes.

    The reported velocity is b = f^beta(rho_up) g with g the face drift
    and rho_up the donor value. The advective *flux* is the Godunov
    supply-demand flux g * q_god(rho_-, rho_+): q = rho f^beta is not
    monotone in rho, and donoring the flux by the drift sign alone is
    downwind of the characteristic above the critical density, which is
    linearly unstable. When the density is periodic along an axis while
    phi is not, the two boundary faces are one wrapped face carrying the
    periodic extension of the velocity.
    """
    rho = rho_field.values
    gx, gy = _face_gradient_signs(phi_field, potential_bc)
    if density_bc.periodic_x and not potential_bc.periodic_x:
        _merge_wrap_drift(gx, potential_bc.left, potential_bc.right, axis=0)
    if density_bc.periodic_y and not potential_bc.periodic_y:
        _merge_wrap_drift(gy, potential_bc.bottom, potential_bc.top, axis=1)

    lx, rx, by_, ty = _face_upwind(rho, density_bc)
    up_x = np.where(gx >= 0.0, lx, rx)
    up_y = np.where(gy >= 0.0, by_, ty)
    bx = saturation_power(up_x, params.beta, params) * gx
    by = saturation_power(up_y, params.beta, params) * gy
    flux_x = _godunov_face_flux(gx, lx, rx, params)
    flux_y = _godunov_face_flux(gy, by_, ty, params)

    wx, wy = _wall_face_masks(rho_field.grid, density_bc)
    for arr in (bx, flux_x):
        arr[wx] = 0.0
    for arr in (by, flux_y):
        arr[wy] = 0.0
    return bx, by, flux_x, flux_y


def _wavespeed(rho, g, params):
    """|dq/drho| * |g| evaluated at the given states (CFL guard)."""
    b = params.beta
    slope = saturation_power(rho, b, params) \
        - b * rho * saturation_power(rho, b - 1.0, params)
    return np.abs(slope * g)


def transport_velocity(rho_field, phi_field, params, density_bc, potential_bc=None):
    """Face-normal transport velocities b = -f^beta(rho_up) grad phi . n.

    Returns (bx, by) with shapes (nx+1, ny) and (nx, ny+1).
    """
    if potential_bc is None:
        potential_bc = density_bc
    bx, by, _, _ = _assemble_advection(rho_field, phi_field, params, density_bc, potential_bc)
    return bx, by


def cfl_max_dt(velocities, params, grid, config=None):
    """Largest stable step: cfl_safety * min(dx/max|bx|, dy/max|by|,
    and in explicit mode h^2/(4 sigma)). Unbounded (inf) when every
    velocity vanishes and no explicit diffusion limit applies."""
    if config is None:
        config = FpStepConfig()
    bx, by = velocities
    limit = math.inf
    max_bx = float(np.abs(bx).max())
    max_by = float(np.abs(by).max())
    if max_bx > 0.0:
        limit = min(limit, grid.dx / max_bx)
    if max_by > 0.0:
        limit = min(limit, grid.dy / max_by)
    if config.diffusion_mode == "explicit" and params.sigma > 0.0:
        h = min(grid.dx, grid.dy)
        limit = min(limit, h * h / (4.0 * params.sigma))
    return config.cfl_safety * limit


def stable_dt(rho_field, phi_field, params, density_bc, potential_bc=None, config=None):
    """Largest step accepted by `step_fp`.

    Tightens the per-axis velocity bound of `cfl_max_dt` with the
    dimensional-sum wavespeed bound dt (sx/dx + sy/dy) <= 1, where s is
    the Godunov wavespeed |dq/drho| |g| over the face states actually
    present: the sum form is what monotonicity of the combined 2D update
    needs."""
    if potential_bc is None:
        potential_bc = density_bc
    if config is None:
        config = FpStepConfig()
    grid = rho_field.grid
    bx, by, _, _ = _assemble_advection(rho_field, phi_field, params,
                                       density_bc, potential_bc)
    limit = cfl_max_dt((bx, by), params, grid, config) / config.cfl_safety
    gx, gy = _face_gradient_signs(phi_field, potential_bc)
    lx, rx, by_, ty = _face_upwind(rho_field.values, density_bc)
    sx = max(np.max(_wavespeed(lx, gx, params)), np.max(_wavespeed(rx, gx, params)))
    sy = max(np.max(_wavespeed(by_, gy, params)), np.max(_wavespeed(ty, gy, params)))
    rate = sx / grid.dx + sy / grid.dy
    if config.diffusion_mode == "explicit" and params.sigma > 0.0:
        rate += 2.0 * params.sigma * (1.0 / grid.dx ** 2 + 1.0 / grid.dy ** 2)
    if rate > 0.0:
        limit = min(limit, 1.0 / rate)
    return config.cfl_safety * limit


def _diffusive_flux(rho_field, density_bc, sigma):
    g = fill_ghosts(rho_field, density_bc, "density")
    grid = rho_field.grid
    dx_flux = sigma * (g[1:, 1:-1] - g[:-1, 1:-1]) / grid.dx
    dy_flux = sigma * (g[1:-1, 1:] - g[1:-1, :-1]) / grid.dy
    wx, wy = _wall_face_masks(grid, density_bc)
    dx_flux[wx] = 0.0
    dy_flux[wy] = 0.0
    return dx_flux, dy_flux


def step_fp(rho_field, phi_field, dt, params, density_bc, potential_bc=None, config=None):
    """One conservative step rho -> rho + dt div(-rho u + sigma grad rho).

    dt must respect `cfl_max_dt` for the assembled velocities (advection
    always; diffusion only in explicit mode). Negative results beyond
    -1e-12 raise (scheme bug sentinel); the roundoff band [-1e-12, 0) is
    clamped to zero so positivity holds exactly.
    """
    if potential_bc is None:
        potential_bc = density_bc
    if config is None:
        config = FpStepConfig()
    grid = rho_field.grid
    sigma = params.sigma

    bx, by, flux_ax, flux_ay = _assemble_advection(
        rho_field, phi_field, params, density_bc, potential_bc
    )
    max_dt = stable_dt(rho_field, phi_field, params, density_bc, potential_bc, config)
    if dt > max_dt:
        raise CflError(f"dt={dt:g} exceeds the CFL bound {max_dt:g}")

    if config.diffusion_mode == "explicit" or sigma == 0.0:
        dfx, dfy = (0.0, 0.0) if sigma == 0.0 else _diffusive_flux(rho_field, density_bc, sigma)
        total_x = -flux_ax + dfx
        total_y = -flux_ay + dfy
        new = rho_field.values + dt * divergence_from_faces(grid, total_x, total_y)
    else:
        advected = rho_field.values + dt * divergence_from_faces(grid, -flux_ax, -flux_ay)
        solve = cached_helmholtz_solver(grid, density_bc, "density", dt * sigma)
        new = solve(advected.ravel()).reshape(grid.nx, grid.ny)

    low = float(new.min())
    if low < -1e-12:
        raise RuntimeError(
            f"density went negative ({low:.3e}); upwind scheme invariant broken"
        )
    np.clip(new, 0.0, None, out=new)
    return ScalarField(grid, new)
