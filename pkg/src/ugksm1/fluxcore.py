"""Time-integrated interface coefficients and shared flux assembly.

The interface flux of the scheme blends an upwinded kinetic part (A-term on
half moments of the two cell ansatz), an isotropic equilibrium part (C-term),
and gradient parts (D-terms) whose weights A-D come from integrating the
BGK characteristic solution over the time step. Both the Cartesian and the
triangle solvers assemble their fluxes through this module; they differ only
in geometry, slopes, and rotations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as npoly

from .physics import (
    RegimeParams,
    SpeedGrid,
    maxwell_psi_flux_matrix,
    maxwellian_m0,
    temperature,
)

W_SERIES_CUT = 0.5
W_EXP_FLOOR = -700.0

# Taylor coefficients (low order first) of the three series in w:
#   S = P - 1      = sum_{n>=1} w^n/(n+1)!         (A = (1+S)/eta, C = -S/eta)
#   B/k            = sum_{n>=1} n w^n/(n+1)!
#   -D/k           = sum_{n>=2} (n-1) w^n/(n+1)!
# Sixteen terms keep the truncation below 1e-18 relative at |w| = 0.5, while
# the direct expressions lose ~1e-12 to cancellation there (D ~ w^2/6).
_N_SERIES = 16
_FACT = [math.factorial(n + 1) for n in range(_N_SERIES + 1)]
_S_COEF = np.array([0.0] + [1.0 / _FACT[n] for n in range(1, _N_SERIES + 1)])
_B_COEF = np.array([0.0] + [n / _FACT[n] for n in range(1, _N_SERIES + 1)])
_D_COEF = np.array([0.0, 0.0] + [(n - 1.0) / _FACT[n] for n in range(2, _N_SERIES + 1)])


@dataclass
class CoeffQuad:
    """Interface coefficients A, B, C, D at w = -nu*dt (arrays or scalars)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    w: np.ndarray


def coefficients(dt, eta, epsilon, sigma) -> CoeffQuad:
    """Coefficient quadruple of the time-integrated characteristic solution.

    w = -(sigma/(eps*eta))*dt;
    A = -(1-e^w)/(eta w),            B = (eps/(sigma eta))(e^w + (1-e^w)/w),
    C = (1/eta)(1 + (1-e^w)/w),      D = -(eps/(sigma eta))(1 + e^w + 2(1-e^w)/w).
    A sixteen-term series takes over below |w| = 0.5 (keeping A + C = 1/eta
    exact there as well); e^w is clamped to zero below w = -700.
    """
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0.0) or np.any(np.asarray(dt) <= 0.0):
        raise ValueError("coefficients need dt > 0 and sigma > 0")
    w = -(sigma / (epsilon * eta)) * dt
    scalar = w.ndim == 0
    w = np.atleast_1d(w)
    A = np.empty_like(w)
    B = np.empty_like(w)
    C = np.empty_like(w)
    D = np.empty_like(w)
    k = np.atleast_1d(epsilon / (np.asarray(sigma) * eta))
    k = np.broadcast_to(k, w.shape)

    small = np.abs(w) < W_SERIES_CUT
    if np.any(small):
        ws = w[small]
        ks = k[small]
        S = npoly.polyval(ws, _S_COEF)
        A[small] = (1.0 + S) / eta
        C[small] = -S / eta
        B[small] = ks * npoly.polyval(ws, _B_COEF)
        D[small] = -ks * npoly.polyval(ws, _D_COEF)
    big = ~small
    if np.any(big):
        wb = w[big]
        kb = k[big]
        E = np.where(wb < W_EXP_FLOOR, 0.0, np.exp(np.maximum(wb, W_EXP_FLOOR)))
        # P = -(1 - e^w)/w = expm1(w)/w, positive and in (0, 1) for w < 0
        P = np.expm1(np.maximum(wb, W_EXP_FLOOR)) / wb
        P = np.where(wb < W_EXP_FLOOR, -1.0 / wb, P)
        A[big] = P / eta
        C[big] = (1.0 - P) / eta
        B[big] = kb * (E - P)
        D[big] = -kb * (1.0 + E - 2.0 * P)
    if scalar:
        return CoeffQuad(A=A[0], B=B[0], C=C[0], D=D[0], w=w[0])
    return CoeffQuad(A=A, B=B, C=C, D=D, w=w)


def _psi_contract(c, v):
    """Psi(v)^T c = c1 + (v^2/2) c2 for slope-coefficient pairs c (..., 2)."""
    return c[..., 0, None] + 0.5 * c[..., 1, None] * (v * v)[None if c.ndim > 1 else ...]


def interior_flux(
    fam_K: dict,
    fam_L: dict,
    rho_e,
    q_e,
    coeffs: CoeffQuad,
    c_plus,
    c_minus,
    n,
    grid: SpeedGrid,
    regime: RegimeParams,
    bterm: tuple | None = None,
):
    """Interface flux between cells K (minus side) and L (plus side).

    fam_K: plus-half families of the K ansatz gathered at the interface
    (keys h0p, hvp with shapes (..., nv) and (..., nv, 3)); fam_L the
    minus-half families of L. c_plus / c_minus: K-contracted sums and
    differences of the two half-slopes, (..., 2). n: unit normal, (3,) or
    (..., 3). bterm: optional (bb0, bbv) second-order reconstruction
    moments. Returns (chi0 (..., nv), chi1 (..., nv, 3), phi (..., 2)).
    """
    v = grid.nodes
    rho_e = np.asarray(rho_e, dtype=float)
    q_e = np.asarray(q_e, dtype=float)
    T_e = temperature(rho_e, q_e)
    M0 = maxwellian_m0(rho_e[..., None], T_e[..., None], v)
    A = np.asarray(coeffs.A)[..., None]
    C = np.asarray(coeffs.C)[..., None]
    D = np.asarray(coeffs.D)[..., None]

    n = np.asarray(n, dtype=float)
    n_b = n if n.ndim == 1 else n[..., None, :]

    chi0 = A * v * (fam_K["h0p"] + fam_L["h0m"])
    chi1 = A[..., None] * v[:, None] * (fam_K["hvp"] + fam_L["hvm"])
    chi1 += (C * (v / 3.0) * M0)[..., None] * n_b
    if bterm is not None:
        B = np.asarray(coeffs.B)[..., None]
        bb0, bbv = bterm
        chi0 = chi0 + B * v * v * bb0
        chi1 = chi1 + (B * v * v)[..., None] * bbv
    phi = np.empty(np.asarray(rho_e).shape + (2,))
    phi[..., 0] = grid.moment(chi0, power=2)
    phi[..., 1] = 0.5 * grid.moment(chi0, power=4)

    chi0 = chi0 + (D / 6.0) * v * v * M0 * _psi_contract(np.asarray(c_plus), v)
    chi1 = chi1 + ((D / 8.0) * v * v * M0 * _psi_contract(np.asarray(c_minus), v))[
        ..., None
    ] * n_b

    P = maxwell_psi_flux_matrix(rho_e, q_e)
    phi += (np.asarray(coeffs.D) / 6.0)[..., None] * np.einsum(
        "...ij,...j->...i", P, np.asarray(c_plus)
    )
    return chi0, chi1, phi


def boundary_outflux(
    fam_b: dict,
    fam_K: dict,
    rho_b,
    q_b,
    coeffs: CoeffQuad,
    c_b,
    n,
    grid: SpeedGrid,
    regime: RegimeParams,
):
    """Outward flux through a boundary face with imposed interface state.

    n is the outward normal; fam_b holds the minus-half (incoming) families
    of the imposed distribution, fam_K the plus-half families of the interior
    cell ansatz. c_b is the K-contracted one-sided slope (X_b - X_K)/delta_b.
    The equilibrium C-part splits into its half-sphere moments M0/4 and
    (M0/6) n. Returns (chi0, chi1, phi) as in interior_flux.
    """
    v = grid.nodes
    rho_b = np.asarray(rho_b, dtype=float)
    q_b = np.asarray(q_b, dtype=float)
    T_b = temperature(rho_b, q_b)
    M0 = maxwellian_m0(rho_b[..., None], T_b[..., None], v)
    A = np.asarray(coeffs.A)[..., None]
    C = np.asarray(coeffs.C)[..., None]
    D = np.asarray(coeffs.D)[..., None]
    inv_eta = 1.0 / regime.eta

    n = np.asarray(n, dtype=float)
    n_b = n if n.ndim == 1 else n[..., None, :]

    chi0 = inv_eta * v * fam_b["h0m"] + A * v * fam_K["h0p"] + C * v * (M0 / 4.0)
    chi1 = inv_eta * v[:, None] * fam_b["hvm"] + A[..., None] * v[:, None] * fam_K["hvp"]
    chi1 += (C * (v / 6.0) * M0)[..., None] * n_b

    phi = np.empty(np.asarray(rho_b).shape + (2,))
    phi[..., 0] = grid.moment(chi0, power=2)
    phi[..., 1] = 0.5 * grid.moment(chi0, power=4)

    c_b = np.asarray(c_b)
    chi0 = chi0 + (D / 6.0) * v * v * M0 * _psi_contract(c_b, v)
    chi1 = chi1 + ((D / 8.0) * v * v * M0 * _psi_contract(c_b, v))[..., None] * n_b

    P = maxwell_psi_flux_matrix(rho_b, q_b)
    phi += (np.asarray(coeffs.D) / 6.0)[..., None] * np.einsum("...ij,...j->...i", P, c_b)
    return chi0, chi1, phi


def implicit_source_update(U, W_new, nu_new, dt, grid: SpeedGrid, div0, div1,
                           crank_nicolson=False, nu_old=None, M0_old=None):
    """Relaxation-implicit mesoscopic update after the macro update.

    U: (..., nv, 4); div0/div1: flux divergences of (f0, f1). The implicit
    Euler form divides the transported state by (1 + dt nu'); the
    Crank-Nicolson variant applies the trapezoidal source split using the
    previous-step equilibrium gap (needs nu_old and M0_old).
    """
    rho, q = W_new[..., 0], W_new[..., 1]
    M0_new = maxwellian_m0(rho[..., None], temperature(rho, q)[..., None], grid.nodes)
    nu = np.asarray(nu_new)[..., None]
    out = np.empty_like(U)
    if not crank_nicolson:
        den = 1.0 + dt * nu
        out[..., 0] = (U[..., 0] - dt * div0 + dt * nu * M0_new) / den
        out[..., 1:] = (U[..., 1:] - dt * div1) / (den[..., None])
        return out
    nu_o = np.asarray(nu_old)[..., None]
    den = 1.0 + 0.5 * dt * nu
    s0_old = nu_o * (M0_old - U[..., 0])
    out[..., 0] = (U[..., 0] - dt * div0 + 0.5 * dt * (s0_old + nu * M0_new)) / den
    out[..., 1:] = (U[..., 1:] - dt * div1 + 0.5 * dt * (-nu_o[..., None] * U[..., 1:])) / (
        den[..., None]
    )
    return out
