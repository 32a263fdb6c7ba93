"""Uniform cell-centered rectangular mesh, boundary conditions, fields,
and the discrete operators shared by the solvers.

Field values live at cell centers ((i+1/2)dx, (j+1/2)dy) and are stored
as (nx, ny) arrays indexed [i, j] with i along x. Boundary conditions are
declared per edge; `fill_ghosts` translates them into one ghost layer so
every stencil below is a plain interior formula.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse


# ---------------------------------------------------------------------------
# mesh and boundary conditions


@dataclass(frozen=True)
class Grid2D:
    nx: int
    ny: int
    lx: float
    ly: float

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ValueError(f"need nx, ny >= 4, got {self.nx} x {self.ny}")
        if self.lx <= 0.0 or self.ly <= 0.0:
            raise ValueError("domain extents must be positive")

    @property
    def dx(self):
        return self.lx / self.nx

    @property
    def dy(self):
        return self.ly / self.ny

    @property
    def cell_area(self):
        return self.dx * self.dy

    @property
    def xs(self):
        """Cell-center x coordinates, shape (nx,)."""
        return (np.arange(self.nx) + 0.5) * self.dx

    @property
    def ys(self):
        return (np.arange(self.ny) + 0.5) * self.dy

    def cell_centers(self):
        """Meshgrids X, Y of shape (nx, ny)."""
        return np.meshgrid(self.xs, self.ys, indexing="ij")


@dataclass(frozen=True)
class Periodic:
    pass


@dataclass(frozen=True)
class Exit:
    """Outflow edge: phi = 0 and rho = 0 Dirichlet at the face."""


@dataclass(frozen=True)
class Inflow:
    """Inflow edge carrying Dirichlet data for both fields."""

    rho_b: float = 0.0
    phi_b: float = 0.0


@dataclass(frozen=True)
class Wall:
    """Insulating edge: no total flux for rho, homogeneous Neumann for phi."""


EDGES = ("left", "right", "bottom", "top")


@dataclass(frozen=True)
class BoundarySpec:
    left: object
    right: object
    bottom: object
    top: object

    def __post_init__(self):
        for a, b in (("left", "right"), ("bottom", "top")):
            pa = isinstance(getattr(self, a), Periodic)
            pb = isinstance(getattr(self, b), Periodic)
            if pa != pb:
                raise ValueError(
                    f"periodic edges must be paired: {a} is "
                    f"{'periodic' if pa else 'not periodic'} but {b} is not"
                )

    def edge(self, name):
        return getattr(self, name)

    @property
    def periodic_x(self):
        return isinstance(self.left, Periodic)

    @property
    def periodic_y(self):
        return isinstance(self.bottom, Periodic)

    @property
    def has_anchor(self):
        """True when some edge carries Dirichlet data (Exit or Inflow)."""
        return any(isinstance(self.edge(e), (Exit, Inflow)) for e in EDGES)

    @classmethod
    def all_periodic(cls):
        return cls(Periodic(), Periodic(), Periodic(), Periodic())

    @classmethod
    def all_walls(cls):
        return cls(Wall(), Wall(), Wall(), Wall())


def _dirichlet_value(cond, kind):
    """Face value imposed by a Dirichlet-type condition, or None."""
    if isinstance(cond, Exit):
        return 0.0
    if isinstance(cond, Inflow):
        return cond.rho_b if kind == "density" else cond.phi_b
    return None


# ---------------------------------------------------------------------------
# fields


@dataclass
class ScalarField:
    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.nx, self.grid.ny):
            raise ValueError(
                f"values shape {self.values.shape} does not match grid "
                f"({self.grid.nx}, {self.grid.ny})"
            )

    @classmethod
    def full(cls, grid, value):
        return cls(grid, np.full((grid.nx, grid.ny), float(value)))

    @classmethod
    def from_function(cls, grid, fn):
        x, y = grid.cell_centers()
        return cls(grid, np.asarray(fn(x, y), dtype=float))

    def copy(self):
        return ScalarField(self.grid, self.values.copy())

    def validate_finite(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite entries")


@dataclass
class VectorField:
    grid: Grid2D
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        shape = (self.grid.nx, self.grid.ny)
        if self.x.shape != shape or self.y.shape != shape:
            raise ValueError("component shapes do not match grid")

    def magnitude(self):
        return np.hypot(self.x, self.y)

    def stacked(self):
        """Components merged on a trailing axis, shape (nx, ny, 2)."""
        return np.stack([self.x, self.y], axis=-1)


# ---------------------------------------------------------------------------
# ghost filling and stencils


def fill_ghosts(fld, spec, kind):
    """Return the (nx+2, ny+2) ghost-extended array for `fld`.

    kind is "density" or "potential" and selects the Dirichlet value
    used by Exit/Inflow edges. Periodic wraps, Wall copies (zero normal
    derivative), Dirichlet mirrors so the face average equals the data.
    """
    if kind not in ("density", "potential"):
        raise ValueError(f"kind must be 'density' or 'potential', got {kind!r}")
    v = fld.values
    nx, ny = v.shape
    g = np.empty((nx + 2, ny + 2))
    g[1:-1, 1:-1] = v

    def ghost(cond, interior, opposite):
        if isinstance(cond, Periodic):
            return opposite
        if isinstance(cond, Wall):
            return interior
        vb = _dirichlet_value(cond, kind)
        return 2.0 * vb - interior

    g[0, 1:-1] = ghost(spec.left, v[0, :], v[-1, :])
    g[-1, 1:-1] = ghost(spec.right, v[-1, :], v[0, :])
    g[1:-1, 0] = ghost(spec.bottom, v[:, 0], v[:, -1])
    g[1:-1, -1] = ghost(spec.top, v[:, -1], v[:, 0])
    # corners are not consumed by the 5-point stencils; copy adjacents
    g[0, 0], g[0, -1] = g[0, 1], g[0, -2]
    g[-1, 0], g[-1, -1] = g[-1, 1], g[-1, -2]
    return g


def gradient_central(fld, spec, kind):
    """Second-order central gradient as a VectorField."""
    g = fill_ghosts(fld, spec, kind)
    gx = (g[2:, 1:-1] - g[:-2, 1:-1]) / (2.0 * fld.grid.dx)
    gy = (g[1:-1, 2:] - g[1:-1, :-2]) / (2.0 * fld.grid.dy)
    return VectorField(fld.grid, gx, gy)


def laplacian(fld, spec, kind):
    """Five-point Laplacian as a ScalarField."""
    g = fill_ghosts(fld, spec, kind)
    dx2, dy2 = fld.grid.dx ** 2, fld.grid.dy ** 2
    lap = (g[2:, 1:-1] - 2.0 * g[1:-1, 1:-1] + g[:-2, 1:-1]) / dx2 \
        + (g[1:-1, 2:] - 2.0 * g[1:-1, 1:-1] + g[1:-1, :-2]) / dy2
    return ScalarField(fld.grid, lap)


def divergence_from_faces(grid, flux_x, flux_y):
    """Cell divergence of face-normal fluxes.

    flux_x has shape (nx+1, ny) (x-faces), flux_y (nx, ny+1) (y-faces);
    both hold the flux component in the positive axis direction.
    """
    div = (flux_x[1:, :] - flux_x[:-1, :]) / grid.dx \
        + (flux_y[:, 1:] - flux_y[:, :-1]) / grid.dy
    return div


# ---------------------------------------------------------------------------
# integrals and norms (midpoint rule throughout)


def integrate(fld):
    return float(fld.values.sum() * fld.grid.cell_area)


def l1_distance(fld_a, fld_b):
    if fld_a.grid != fld_b.grid:
        raise ValueError("fields live on different grids")
    return float(np.abs(fld_a.values - fld_b.values).sum() * fld_a.grid.cell_area)


def linf(fld):
    return float(np.abs(fld.values).max())


def variance(fld):
    """Area-averaged variance of the field values about their mean.

    Vanishes exactly for constant fields; shrinks as a density field
    flattens toward uniform and grows under concentration.
    """
    v = fld.values
    return float(np.mean((v - v.mean()) ** 2))


def mass_weighted_spread(fld):
    """Second spatial moment about the center of mass, weighted by the
    field (mass) values: sum rho |x - xbar|^2 / sum rho. Grows under pure
    diffusion. Returns 0 for a zero field.
    """
    v = fld.values
    total = v.sum()
    if total == 0.0:
        return 0.0
    x, y = fld.grid.cell_centers()
    xbar = (v * x).sum() / total
    ybar = (v * y).sum() / total
    return float((v * ((x - xbar) ** 2 + (y - ybar) ** 2)).sum() / total)


# ---------------------------------------------------------------------------
# sparse Laplacian with boundary conditions (for implicit solves)


def build_laplacian(grid, spec, kind):
    """Assemble the 5-point Laplacian under `spec` as (L, c) with
    lap(v).ravel() == L @ v.ravel() + c.

    L is CSC for fast factorization; c carries the Dirichlet data
    contribution (zero for wall/periodic edges).
    """
    nx, ny = grid.nx, grid.ny
    n = nx * ny
    inv_dx2, inv_dy2 = 1.0 / grid.dx ** 2, 1.0 / grid.dy ** 2

    def idx(i, j):
        return i * ny + j

    rows, cols, vals = [], [], []
    c = np.zeros(n)

    def add(r, cidx, v):
        rows.append(r)
        cols.append(cidx)
        vals.append(v)

    for i in range(nx):
        for j in range(ny):
            r = idx(i, j)
            diag = 0.0
            # x neighbors
            for di, edge_name in ((-1, "left"), (+1, "right")):
                ii = i + di
                if 0 <= ii < nx:
                    add(r, idx(ii, j), inv_dx2)
                    diag -= inv_dx2
                else:
                    cond = spec.edge(edge_name)
                    if isinstance(cond, Periodic):
                        add(r, idx(ii % nx, j), inv_dx2)
                        diag -= inv_dx2
                    elif isinstance(cond, Wall):
                        pass  # ghost = interior: +v -2v +v contributes -0
                    else:
                        vb = _dirichlet_value(cond, kind)
                        # ghost = 2 vb - v
                        diag -= 2.0 * inv_dx2
                        c[r] += 2.0 * vb * inv_dx2
            # y neighbors
            for dj, edge_name in ((-1, "bottom"), (+1, "top")):
                jj = j + dj
                if 0 <= jj < ny:
                    add(r, idx(i, jj), inv_dy2)
                    diag -= inv_dy2
                else:
                    cond = spec.edge(edge_name)
                    if isinstance(cond, Periodic):
                        add(r, idx(i, jj % ny), inv_dy2)
                        diag -= inv_dy2
                    elif isinstance(cond, Wall):
                        pass
                    else:
                        vb = _dirichlet_value(cond, kind)
                        diag -= 2.0 * inv_dy2
                        c[r] += 2.0 * vb * inv_dy2
            add(r, r, diag)

    lap = sparse.csc_matrix((vals, (rows, cols)), shape=(n, n))
    return lap, c


_helmholtz_cache = {}


def cached_helmholtz_solver(grid, spec, kind, coef):
    """LU factorization of (I - coef * Laplacian_bc), cached.

    Returns (solve, c) where solve maps a flat rhs to the flat solution
    of (I - coef L) v = rhs + coef c.
    """
    key = (grid, spec, kind, float(coef))
    hit = _helmholtz_cache.get(key)
    if hit is None:
        lap, c = build_laplacian(grid, spec, kind)
        a = sparse.identity(lap.shape[0], format="csc") - coef * lap
        lu = sparse.linalg.splu(a)
        hit = (lu, c)
        _helmholtz_cache[key] = hit
    lu, c = hit

    def solve(rhs_flat):
        return lu.solve(rhs_flat + coef * c)

    return solve


# ---------------------------------------------------------------------------
# snapshot files: text and binary variants share the 5-value header
# (nx, ny, lx, ly, time); values are written line-per-row with rows along
# y, i.e. line j holds v[0, j] ... v[nx-1, j].


def write_field_text(path, fld, time=0.0):
    g = fld.grid
    with open(path, "w") as fh:
        fh.write(f"{g.nx} {g.ny} {g.lx:.17g} {g.ly:.17g} {time:.17g}\n")
        for j in range(g.ny):
            fh.write(" ".join(f"{v:.17g}" for v in fld.values[:, j]))
            fh.write("\n")


def read_field_text(path):
    with open(path) as fh:
        header = fh.readline().split()
        nx, ny = int(header[0]), int(header[1])
        lx, ly, time = float(header[2]), float(header[3]), float(header[4])
        vals = np.loadtxt(fh, ndmin=2)
    if vals.shape != (ny, nx):
        raise ValueError(f"snapshot body {vals.shape} does not match header")
    return ScalarField(Grid2D(nx, ny, lx, ly), vals.T.copy()), time


def write_field_binary(path, fld, time=0.0):
    g = fld.grid
    header = np.array([g.nx, g.ny, g.lx, g.ly, time], dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(fld.values.T, dtype="<f8").tobytes())


def read_field_binary(path):
    raw = np.fromfile(path, dtype="<f8")
    nx, ny = int(raw[0]), int(raw[1])
    lx, ly, time = float(raw[2]), float(raw[3]), float(raw[4])
    body = raw[5:]
    if body.size != nx * ny:
        raise ValueError("snapshot body size does not match header")
    vals = body.reshape(ny, nx).T.copy()
    return ScalarField(Grid2D(nx, ny, lx, ly), vals), time


def read_field(path):
    """Sniff text vs binary snapshot by trying the text header first."""
    with open(path, "rb") as fh:
        head = fh.read(128)
    try:
        head.decode("ascii")
        return read_field_text(path)
    except (UnicodeDecodeError, ValueError):
        return read_field_binary(path)
