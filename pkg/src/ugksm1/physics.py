"""Non-dimensional model constants, Maxwellian equilibrium, speed quadrature,
macro-moment extraction, and the K-matrices tying Maxwellian gradients to
gradients of each macroscopic variable set.

The kinetic unknown is the pair of angular moments U = (f0, f1) of a
distribution f(t, x, v, Omega); the macroscopic unknowns are W = (rho, q)
with T = 2q/(3 rho). Velocity moments are taken against Psi = (1, v^2/2)
with the v^2 speed weight.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import InvalidStateError, RealizabilityError

TWO_PI = 2.0 * np.pi
FOUR_PI = 4.0 * np.pi


@dataclass(frozen=True)
class RegimeParams:
    """Scaling numbers of the non-dimensional model.

    epsilon : Knudsen number (mean free path / macroscopic length)
    eta     : Strouhal-like velocity-scale ratio; diffusion scaling is eta = epsilon
    c_sigma : opacity constant C in sigma = C rho / T^(3/2)
    """

    epsilon: float
    eta: float
    c_sigma: float = 1.0

    def __post_init__(self):
        for name in ("epsilon", "eta", "c_sigma"):
            val = getattr(self, name)
            if not np.isfinite(val) or val <= 0.0:
                raise InvalidStateError(f"{name} must be positive and finite, got {val!r}")


@dataclass(frozen=True)
class MacroState:
    """Pointwise macroscopic state (rho, q); T is derived, never stored."""

    rho: float
    q: float

    def __post_init__(self):
        if not (np.isfinite(self.rho) and np.isfinite(self.q)):
            raise InvalidStateError(f"non-finite macro state ({self.rho}, {self.q})")
        if self.rho <= 0.0 or self.q <= 0.0:
            raise InvalidStateError(f"macro state must be positive, got ({self.rho}, {self.q})")

    @property
    def T(self) -> float:
        return 2.0 * self.q / (3.0 * self.rho)


def temperature(rho, q):
    """T = 2q/(3 rho), elementwise."""
    return 2.0 * np.asarray(q) / (3.0 * np.asarray(rho))


def maxwellian(rho, T, v):
    """Isotropic equilibrium rho/(2 pi T)^(3/2) * exp(-v^2/(2T)).

    Broadcasts over any mix of array arguments.
    """
    rho = np.asarray(rho, dtype=float)
    T = np.asarray(T, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(T <= 0.0) or np.any(rho < 0.0):
        raise InvalidStateError("maxwellian needs T > 0 and rho >= 0")
    out = rho / (TWO_PI * T) ** 1.5 * np.exp(-(v * v) / (2.0 * T))
    if not np.all(np.isfinite(out)):
        raise InvalidStateError("non-finite Maxwellian value")
    return out


def maxwellian_m0(rho, T, v):
    """Zeroth angular moment of the equilibrium: M0 = 4 pi M."""
    return FOUR_PI * maxwellian(rho, T, v)


def opacity(rho, T, c_sigma=1.0):
    """sigma = C rho / T^(3/2)."""
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0.0):
        raise InvalidStateError("opacity needs T > 0")
    return c_sigma * np.asarray(rho) / T**1.5


def collision_frequency(rho, q, regime: RegimeParams):
    """(sigma, nu) with sigma = C rho/T^(3/2) and nu = sigma/(epsilon eta)."""
    T = temperature(rho, q)
    sigma = opacity(rho, T, regime.c_sigma)
    nu = sigma / (regime.epsilon * regime.eta)
    return sigma, nu


@dataclass(frozen=True)
class SpeedGrid:
    """Uniform speed grid on [0, v_max] with composite-trapezoid weights.

    The v^2 weight of spherical coordinates kills the v=0 endpoint, so no
    special-casing is needed there.
    """

    v_max: float
    n_v: int

    def __post_init__(self):
        if self.n_v < 2 or self.v_max <= 0.0:
            raise InvalidStateError("speed grid needs n_v >= 2 and v_max > 0")

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.v_max, self.n_v)

    @property
    def dv(self) -> float:
        return self.v_max / (self.n_v - 1)

    @property
    def weights(self) -> np.ndarray:
        w = np.full(self.n_v, self.dv)
        w[0] *= 0.5
        w[-1] *= 0.5
        return w

    def moment(self, values: np.ndarray, power: int = 0, axis: int = -1) -> np.ndarray:
        """Trapezoid of v^power * values over the grid, along `axis`."""
        v = self.nodes**power if power else np.ones(self.n_v)
        return np.tensordot(
            np.moveaxis(np.asarray(values), axis, -1), self.weights * v, axes=([-1], [0])
        )


def macro_from_f0(f0_profile: np.ndarray, grid: SpeedGrid):
    """(rho, q) = trapezoid of v^2 (1, v^2/2) f0 over the speed grid.

    The speed axis is the last one; leading axes are preserved (scalars for
    a single profile).
    """
    f0_profile = np.asarray(f0_profile, dtype=float)
    if np.any(f0_profile < 0.0):
        raise RealizabilityError("negative f0 entries")
    rho = grid.moment(f0_profile, power=2)
    q = 0.5 * grid.moment(f0_profile, power=4)
    if rho.ndim == 0:
        return float(rho), float(q)
    return rho, q


class VariableSet(enum.Enum):
    """Choice of macroscopic variable pair X used in gradient reconstructions.

    CONSERVATIVE: X = (rho, q); NONCONSERVATIVE: X = (rho, T);
    ENERGY: X = (q, y) with y = q^2/rho. Each gives a different discrete
    diffusion-limit scheme.
    """

    CONSERVATIVE = "conservative"
    NONCONSERVATIVE = "nonconservative"
    ENERGY = "energy"


def vars_from_macro(rho, q, varset: VariableSet):
    """(X1, X2) in the chosen variable set, elementwise."""
    rho = np.asarray(rho, dtype=float)
    q = np.asarray(q, dtype=float)
    if varset is VariableSet.CONSERVATIVE:
        return rho, q
    if varset is VariableSet.NONCONSERVATIVE:
        return rho, temperature(rho, q)
    return q, q * q / rho


def k_coeff(rho, q, varset: VariableSet) -> np.ndarray:
    """Coefficient matrix Ktilde with Psi(v)^T Ktilde dX = d(ln M) along dX.

    Returned with shape (..., 2, 2), broadcasting over the state arrays.
    """
    rho = np.asarray(rho, dtype=float)
    q = np.asarray(q, dtype=float)
    out = np.empty(np.broadcast(rho, q).shape + (2, 2))
    if varset is VariableSet.CONSERVATIVE:
        out[..., 0, 0] = 2.5 / rho
        out[..., 0, 1] = -1.5 / q
        out[..., 1, 0] = -1.5 / q
        out[..., 1, 1] = 1.5 * rho / (q * q)
    elif varset is VariableSet.NONCONSERVATIVE:
        T = temperature(rho, q)
        out[..., 0, 0] = 1.0 / rho
        out[..., 0, 1] = -1.5 / T
        out[..., 1, 0] = 0.0
        out[..., 1, 1] = 1.0 / (T * T)
    else:
        y = q * q / rho
        out[..., 0, 0] = 3.5 / q
        out[..., 0, 1] = -2.5 / y
        out[..., 1, 0] = -1.5 / y
        out[..., 1, 1] = 1.5 * q / (y * y)
    return out


def k_matrix(varset: VariableSet, state: MacroState, v) -> np.ndarray:
    """M[state](v) times the variable set's coefficient matrix."""
    m = maxwellian(state.rho, state.T, v)
    return np.asarray(m)[..., None, None] * k_coeff(state.rho, state.q, varset)


def maxwell_psi_flux_matrix(rho, q) -> np.ndarray:
    """P = integral of v^4 Psi Psi^T M0 dv, closed form.

    P = [[3 rho T, 15 rho T^2 / 2], [15 rho T^2 / 2, 105 rho T^3 / 4]].
    Contracting (D/6) P Ktilde with summed half-slopes gives the exact
    macroscopic D-flux, which the speed trapezoid would only approximate.
    """
    rho = np.asarray(rho, dtype=float)
    q = np.asarray(q, dtype=float)
    T = temperature(rho, q)
    out = np.empty(np.broadcast(rho, q).shape + (2, 2))
    out[..., 0, 0] = 3.0 * rho * T
    out[..., 0, 1] = 7.5 * rho * T * T
    out[..., 1, 0] = out[..., 0, 1]
    out[..., 1, 1] = 26.25 * rho * T**3
    return out


def diffusive_flux_matrix(rho, q, varset: VariableSet) -> np.ndarray:
    """G = P Ktilde, so the macroscopic D-flux is (D/6) G (delta- X + delta+ X)."""
    return maxwell_psi_flux_matrix(rho, q) @ k_coeff(rho, q, varset)
