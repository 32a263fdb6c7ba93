"""crowdmfg: structured-grid solvers for congestion-aware crowd dynamics.

The package couples a conservative upwind Fokker-Planck step with
stationary and time-dependent value-function solvers, orchestrates the
quasi-stationary and forward-backward (fixed point) couplings, and
provides a particle-level realization of the same feedback control for
mean-field comparisons.
"""

from .coupling import (
    AssumptionReport,
    DiagnosticsRow,
    MfgProblem,
    QuasiStationaryRun,
    Trajectory,
    beta_sweep,
    check_assumptions,
    energy_identity_residual,
    run_quasi_stationary,
    solve_mfg_picard,
    vanishing_viscosity_sweep,
)
from .errors import CflError, ConfigError, ConvergenceError, DensityBoundError
from .fp import FpStepConfig, cfl_max_dt, step_fp, transport_velocity
from .grid import (
    BoundarySpec,
    Exit,
    Grid2D,
    Inflow,
    Periodic,
    ScalarField,
    VectorField,
    Wall,
    gradient_central,
    integrate,
    l1_distance,
    laplacian,
    linf,
    mass_weighted_spread,
    read_field,
    read_field_binary,
    read_field_text,
    variance,
    write_field_binary,
    write_field_text,
)
from .hjb import (
    StationaryHjbConfig,
    SweepingConfig,
    eikonal_rhs,
    solve_eikonal_sweeping,
    solve_viscous_stationary_hjb,
    step_backward_hjb,
)
from .model import (
    ModelParams,
    hamiltonian,
    hamiltonian_p,
    hamiltonian_pp,
    hamiltonian_rho,
    hamiltonian_rho_p,
    is_psd,
    lagrangian,
    legendre_sup_bruteforce,
    monotonicity_matrix,
    optimal_velocity,
    saturation,
    saturation_floored,
    saturation_power,
)
from .particles import (
    McCostEstimate,
    ParticleEnsemble,
    estimate_density,
    mc_cost_estimate,
    run_mean_field_comparison,
    step_particles,
)
from .config import RunConfig, load_config, parse_config, serialize

__version__ = "0.1.0"
