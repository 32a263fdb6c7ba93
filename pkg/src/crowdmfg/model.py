"""Pointwise model algebra for the congestion-weighted crowd model.

Everything here is a pure function of (density rho, co-state p, params).
The congestion factor is f(rho) = (rho_max - rho)_+ and the exponent
beta in [0, 2] interpolates between crowd-seeking (beta=0), density-blind
(beta=1) and congestion-avoiding (beta=2) behavior:

    running cost   L(rho, v) = 1/2 f^-beta |v|^2 + 1/2 f^(2-beta)
    Hamiltonian    H(rho, p) = 1/2 f^beta |p|^2 - 1/2 f^(2-beta)
    feedback       u(rho, grad_phi) = -f^beta grad_phi

Scalar arguments and numpy arrays are both accepted; vector quantities
(v, p, gradients) use a trailing axis of length 2.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ModelParams:
    """Model constants: exponent beta, capacity rho_max, viscosity sigma.

    `f_floor` regularizes negative powers of the congestion factor near
    rho = rho_max; it is used *only* where such powers appear. The zero
    default resolves to 1e-6 * rho_max.
    """

    beta: float
    rho_max: float = 1.0
    sigma: float = 0.0
    f_floor: float = 0.0

    def __post_init__(self):
        if self.f_floor == 0.0:
            object.__setattr__(self, "f_floor", 1e-6 * self.rho_max)
        if not 0.0 <= self.beta <= 2.0:
            raise ValueError(f"beta must lie in [0, 2], got {self.beta}")
        if self.rho_max <= 0.0:
            raise ValueError(f"rho_max must be positive, got {self.rho_max}")
        if self.sigma < 0.0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        if not 0.0 < self.f_floor < self.rho_max:
            raise ValueError(
                f"f_floor must lie in (0, rho_max), got {self.f_floor}"
            )


def saturation(rho, params):
    """Congestion factor f(rho) = max(rho_max - rho, 0)."""
    return np.maximum(params.rho_max - rho, 0.0)


def saturation_floored(rho, params):
    """f(rho) clamped from below by f_floor; for negative powers only."""
    return np.maximum(saturation(rho, params), params.f_floor)


def saturation_power(rho, exponent, params):
    """f(rho)**exponent, with the floored base whenever exponent < 0.

    The convention f**0 == 1 holds even at f = 0 (float pow does this),
    which keeps the beta=0 and beta=2 edge terms continuous.
    """
    base = saturation_floored(rho, params) if exponent < 0 else saturation(rho, params)
    return base ** exponent


def lagrangian(rho, v, params):
    """Running cost L = 1/2 f^-beta |v|^2 + 1/2 f^(2-beta)."""
    v = np.asarray(v, dtype=float)
    v2 = np.sum(v * v, axis=-1)
    b = params.beta
    return 0.5 * saturation_power(rho, -b, params) * v2 \
        + 0.5 * saturation_power(rho, 2.0 - b, params)


def hamiltonian(rho, p, params):
    """H = 1/2 f^beta |p|^2 - 1/2 f^(2-beta); convex in p."""
    p = np.asarray(p, dtype=float)
    p2 = np.sum(p * p, axis=-1)
    b = params.beta
    return 0.5 * saturation_power(rho, b, params) * p2 \
        - 0.5 * saturation_power(rho, 2.0 - b, params)


def hamiltonian_p(rho, p, params):
    """dH/dp = f^beta p."""
    p = np.asarray(p, dtype=float)
    fb = saturation_power(rho, params.beta, params)
    return np.asarray(fb)[..., np.newaxis] * p


def hamiltonian_rho(rho, p, params):
    """dH/drho = -(beta/2) f^(beta-1) |p|^2 + ((2-beta)/2) f^(1-beta)."""
    p = np.asarray(p, dtype=float)
    p2 = np.sum(p * p, axis=-1)
    b = params.beta
    # the coefficient multiplies first so a zero coefficient kills a
    # floored (finite but large) power instead of propagating it
    term1 = (-0.5 * b) * saturation_power(rho, b - 1.0, params) * p2
    term2 = (0.5 * (2.0 - b)) * saturation_power(rho, 1.0 - b, params)
    return term1 + term2


def hamiltonian_rho_p(rho, p, params):
    """d2H/(drho dp) = -beta f^(beta-1) p."""
    p = np.asarray(p, dtype=float)
    b = params.beta
    coeff = -b * saturation_power(rho, b - 1.0, params)
    return np.asarray(coeff)[..., np.newaxis] * p


def hamiltonian_pp(rho, params):
    """d2H/dp2 = f^beta * Identity; returns the scalar coefficient."""
    return saturation_power(rho, params.beta, params)


def optimal_velocity(rho, grad_phi, params):
    """Feedback control u = -f^beta(rho) grad_phi = -dH/dp(rho, grad_phi)."""
    return -hamiltonian_p(rho, grad_phi, params)


def legendre_sup_bruteforce(rho, p, params, q_range, q_step):
    """Brute-force sup_q [q.p - L(rho, q)] over a square q-grid.

    Independent oracle for `hamiltonian`. Raises ValueError when the
    maximizer lands on the grid boundary, which means q_range missed the
    analytic maximizer q* = f^beta p.
    """
    p = np.asarray(p, dtype=float)
    qs = np.arange(-q_range, q_range + 0.5 * q_step, q_step)
    qx, qy = np.meshgrid(qs, qs, indexing="ij")
    b = params.beta
    half_inv = 0.5 * saturation_power(rho, -b, params)
    const = 0.5 * saturation_power(rho, 2.0 - b, params)
    vals = qx * p[0] + qy * p[1] - half_inv * (qx * qx + qy * qy) - const
    k = int(np.argmax(vals))
    i, j = np.unravel_index(k, vals.shape)
    n = qs.size
    if i == 0 or j == 0 or i == n - 1 or j == n - 1:
        raise ValueError(
            "supremum attained on the q-grid boundary; enlarge q_range "
            f"(maximizer near q=({qs[i]:g}, {qs[j]:g}))"
        )
    return float(vals[i, j])


def monotonicity_matrix(rho, p, params):
    """Symmetric 3x3 block matrix whose positive semi-definiteness is the
    Lasry-Lions uniqueness condition:

        [ -(2/rho) H_rho    H_rho_p^T ]
        [  H_rho_p          2 H_pp I  ]

    Requires rho > 0 (the 1/rho entry is singular at 0).
    """
    if rho <= 0.0:
        raise ValueError(f"monotonicity matrix needs rho > 0, got {rho}")
    p = np.asarray(p, dtype=float)
    m = np.empty((3, 3))
    m[0, 0] = -(2.0 / rho) * hamiltonian_rho(rho, p, params)
    hrp = hamiltonian_rho_p(rho, p, params)
    m[0, 1:] = hrp
    m[1:, 0] = hrp
    m[1:, 1:] = 2.0 * hamiltonian_pp(rho, params) * np.eye(2)
    return m


def is_psd(matrix, tol=1e-12):
    """True when the smallest eigenvalue of the symmetric matrix >= -tol."""
    eig = np.linalg.eigvalsh(matrix)
    return bool(eig[0] >= -tol)
