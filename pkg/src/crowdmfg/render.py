"""Snapshot rendering: binary PPM heatmaps and subsampled arrow fields.

A fixed 256-entry colormap table keeps the images hash-comparable; no
plotting stack is involved. Arrow CSVs hold the feedback velocity
u = -f^beta(rho) grad phi at every k-th cell for quiver-style plots.
"""

import numpy as np

from ._viridis import VIRIDIS
from .grid import gradient_central
from .model import optimal_velocity

_TABLE = np.asarray(VIRIDIS, dtype=np.uint8)


def render_ppm(field, path, vmin=0.0, vmax=1.0):
    """Write the field as a binary PPM (P6) heatmap with linear value
    scaling between vmin and vmax; rows run top-to-bottom (y decreasing).
    """
    if vmax <= vmin:
        raise ValueError("vmax must exceed vmin")
    v = field.values
    scale = np.clip((v - vmin) / (vmax - vmin), 0.0, 1.0)
    idx = np.rint(scale * 255.0).astype(np.intp)
    rgb = _TABLE[idx]                       # (nx, ny, 3)
    image = rgb.transpose(1, 0, 2)[::-1]    # (ny, nx, 3), top row = max y
    with open(path, "wb") as fh:
        fh.write(f"P6\n{field.grid.nx} {field.grid.ny}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def write_arrow_csv(path, rho_field, phi_field, params, potential_bc, stride=4):
    """CSV of x,y,ux,uy at every `stride`-th cell center."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    g = rho_field.grid
    grad = gradient_central(phi_field, potential_bc, "potential").stacked()
    u = optimal_velocity(rho_field.values, grad, params)
    x, y = g.cell_centers()
    with open(path, "w", newline="") as fh:
        fh.write("x,y,ux,uy\n")
        for i in range(0, g.nx, stride):
            for j in range(0, g.ny, stride):
                fh.write(
                    f"{x[i, j]:.15g},{y[i, j]:.15g},"
                    f"{u[i, j, 0]:.15g},{u[i, j, 1]:.15g}\n"
                )
