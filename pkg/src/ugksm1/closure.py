"""M1 entropic closure: moments <-> entropic variables, the closing tensor f2,
the ansatz Jacobian for second-order reconstruction, and realizability.

The ansatz is f_hat(Omega) = exp(alpha + beta.Omega). Writing x = ||beta||,
u = ||f1||/f0 and d = f1/||f1||, the closure relations are

    u = z(x) = coth(x) - 1/x,
    alpha = ln(f0 x / (4 pi sinh x)),
    f2 = f0 (u/x) I + f0 (1 - 3u/x) d x d.

All maps are provided both pointwise (validating) and batched (mask-based,
used by the solvers).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DegenerateDensityError, RealizabilityError
from .physics import FOUR_PI

# Below this f0 the ansatz is treated as vacuum: all half moments vanish and
# second-order reconstruction is dropped.
F0_THRESHOLD = 1.0e-8

# Rounding guard: u is clamped to this before inversion when realizability
# already passed; every clamp is counted by the batch path.
U_CLAMP = 1.0 - 1.0e-12

_SMALL_BETA = 1.0e-4


@dataclass(frozen=True)
class EntropicVars:
    alpha: float
    beta: np.ndarray  # 3-vector


class RealizabilityReport(NamedTuple):
    ok: bool
    u: float
    reason: str | None


def z(x):
    """z(x) = coth(x) - 1/x, continuously extended by 0 at x = 0; odd-series
    branch below x = 0.2 avoids the cancellation of the direct form."""
    x = np.asarray(x, dtype=float)
    small = x < 0.2
    xs = np.where(small, x, 0.0)
    x2 = xs * xs
    series = xs * (1.0 / 3.0 + x2 * (-1.0 / 45.0 + x2 * (2.0 / 945.0 + x2 * (-1.0 / 4725.0 + x2 * (2.0 / 93555.0)))))
    xl = np.where(small, 1.0, x)
    with np.errstate(over="ignore"):
        coth = 1.0 + 2.0 / np.expm1(np.minimum(2.0 * xl, 1400.0))
    direct = coth - 1.0 / xl
    out = np.where(small, series, direct)
    return out if out.ndim else float(out)


def _z_prime(x):
    """z'(x) = 1/x^2 - 1/sinh(x)^2 with a series branch below x = 0.2."""
    x = np.asarray(x, dtype=float)
    small = x < 0.2
    xs = np.where(small, x, 0.0)
    x2 = xs * xs
    series = 1.0 / 3.0 + x2 * (-1.0 / 15.0 + x2 * (2.0 / 189.0 - x2 / 675.0))
    xl = np.where(small, 1.0, np.minimum(x, 350.0))
    direct = 1.0 / (xl * xl) - 1.0 / np.sinh(xl) ** 2
    direct = np.where(x > 350.0, 1.0 / np.maximum(x, 1.0) ** 2, direct)
    return np.where(small, series, direct)


def z_inverse(u):
    """x with |z(x) - u| <= 1e-12, for u in [0, 1).

    Series x = 3u + (9/5)u^3 below u = 1e-5; elsewhere safeguarded Newton
    bracketed by [0, 3u/(1-u)] (z is increasing and z(3u/(1-u)) >= u).
    """
    scalar = np.ndim(u) == 0
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if np.any(u < 0.0):
        raise ValueError("anisotropy u must be nonnegative")
    if np.any(u >= 1.0):
        raise RealizabilityError("anisotropy u >= 1 is not realizable")
    out = 3.0 * u + 1.8 * u**3
    solve = u >= 1.0e-5
    if np.any(solve):
        uu = u[solve]
        lo = np.zeros_like(uu)
        hi = 3.0 * uu / (1.0 - uu)
        # Pade initial guess, then Newton with bisection safeguard
        x = uu * (3.0 - uu * uu) / (1.0 - uu * uu)
        x = np.clip(x, lo, hi)
        for _ in range(100):
            fx = z(x) - uu
            lo = np.where(fx < 0.0, x, lo)
            hi = np.where(fx > 0.0, x, hi)
            if np.all(np.abs(fx) <= 1.0e-12):
                break
            step = fx / _z_prime(x)
            xn = x - step
            bad = (xn <= lo) | (xn >= hi) | ~np.isfinite(xn)
            x = np.where(bad, 0.5 * (lo + hi), xn)
        out[solve] = x
    return float(out[0]) if scalar else out


def _log_sinhc(x):
    """ln(sinh(x)/x), stable across scales."""
    x = np.asarray(x, dtype=float)
    small = x < 0.5
    xs = np.where(small, x, 0.0)
    x2 = xs * xs
    ser = np.log1p(x2 / 6.0 * (1.0 + x2 / 20.0 * (1.0 + x2 / 42.0)))
    xl = np.where(small, 1.0, x)
    large = xl + np.log1p(-np.exp(-2.0 * np.minimum(xl, 700.0))) - np.log(2.0 * xl)
    return np.where(small, ser, large)


def entropic_from_moments(f0: float, f1) -> EntropicVars:
    """Entropic variables (alpha, beta) reproducing the moments (f0, f1)."""
    f1 = np.asarray(f1, dtype=float)
    if f0 <= 0.0:
        raise DegenerateDensityError("f0 <= 0 has no ansatz; treat as f_hat = 0")
    f1n = float(np.linalg.norm(f1))
    u = f1n / f0
    if u >= 1.0:
        raise RealizabilityError(f"u = {u} >= 1")
    if f1n == 0.0:
        return EntropicVars(alpha=float(np.log(f0 / FOUR_PI)), beta=np.zeros(3))
    x = z_inverse(u)
    alpha = np.log(f0 / FOUR_PI) - _log_sinhc(x)
    return EntropicVars(alpha=float(alpha), beta=(x / f1n) * f1)


def moments_of_ansatz(alpha, beta_norm):
    """Closed-form totals of the ansatz: f0 and the signed f1 component along
    the beta direction (f1 = value * d)."""
    alpha = np.asarray(alpha, dtype=float)
    x = np.asarray(beta_norm, dtype=float)
    f0 = FOUR_PI * np.exp(alpha + _log_sinhc(x))
    return f0, f0 * z(x)


def eddington_ratio(u, x=None):
    """a = u/x extended by 1/3 at the origin; f2 = f0 (a I + (1-3a) d x d)."""
    u = np.asarray(u, dtype=float)
    if x is None:
        x = z_inverse(u)
    x = np.asarray(x, dtype=float)
    small = x < _SMALL_BETA
    x2 = np.where(small, x, 0.0) ** 2
    series = 1.0 / 3.0 - x2 / 45.0 + 2.0 * x2 * x2 / 945.0
    direct = np.where(small, 1.0, u) / np.where(small, 3.0, x)
    return np.where(small, series, direct)


def closure_f2(f0: float, f1) -> np.ndarray:
    """Second angular moment tensor of the ansatz; trace(f2) = f0."""
    f1 = np.asarray(f1, dtype=float)
    rep = realizability_check(f0, f1)
    if not rep.ok:
        raise RealizabilityError(rep.reason)
    if f0 == 0.0:
        return np.zeros((3, 3))
    f1n = float(np.linalg.norm(f1))
    u = f1n / f0
    a = float(eddington_ratio(u))
    d = f1 / f1n if f1n > 0.0 else np.zeros(3)
    return f0 * (a * np.eye(3) + (1.0 - 3.0 * a) * np.outer(d, d))


def realizability_check(f0: float, f1) -> RealizabilityReport:
    """Accepts f0 > 0 with ||f1||/f0 < 1, and the exact zero vector."""
    f1 = np.asarray(f1, dtype=float)
    f1n = float(np.linalg.norm(f1))
    if f0 == 0.0:
        if f1n == 0.0:
            return RealizabilityReport(True, 0.0, None)
        return RealizabilityReport(False, np.inf, "f0 = 0 with f1 != 0")
    if f0 < 0.0:
        return RealizabilityReport(False, np.inf, f"f0 = {f0} < 0")
    u = f1n / f0
    if u >= 1.0:
        return RealizabilityReport(False, u, f"u = {u} >= 1")
    return RealizabilityReport(True, u, None)


def jacobian_entropic(f0: float, f1, threshold: float = F0_THRESHOLD) -> np.ndarray:
    """J = d Lambda / d U, the inverse of the moment matrix [[f0, f1^T], [f1, f2]].

    Closed form with xi = 1 - 2u/x - u^2:
      J = (1/(f0 xi)) [[1 - 2u/x, -u^T], [-u, (x/u) xi I + (1 - (x/u) xi) d x d]]
    """
    f1 = np.asarray(f1, dtype=float)
    if f0 <= threshold:
        raise DegenerateDensityError(f"f0 = {f0} <= threshold {threshold}")
    f1n = float(np.linalg.norm(f1))
    u = f1n / f0
    if u >= 1.0:
        raise RealizabilityError(f"u = {u} >= 1")
    x = z_inverse(u)
    a = float(eddington_ratio(u, x))
    x_over_u = 1.0 / a if u < 1.0e-5 else x / u
    xi = 1.0 - 2.0 * a - u * u
    d = f1 / f1n if f1n > 0.0 else np.zeros(3)
    uvec = u * d
    J = np.empty((4, 4))
    J[0, 0] = 1.0 - 2.0 * a
    J[0, 1:] = -uvec
    J[1:, 0] = -uvec
    J[1:, 1:] = x_over_u * xi * np.eye(3) + (1.0 - x_over_u * xi) * np.outer(d, d)
    return J / (f0 * xi)


def ansatz_slope_coefficients(f0: float, f1, dU, threshold: float = F0_THRESHOLD) -> np.ndarray:
    """c = J^T dU, so that the ansatz perturbation is (c . m(Omega)) f_hat
    with m = (1, Omega). J is symmetric, so J^T = J."""
    J = jacobian_entropic(f0, f1, threshold)
    return J @ np.asarray(dU, dtype=float)


# ---------------------------------------------------------------------------
# batched closure maps used by the solvers


def entropic_batch(f0, f1, threshold: float = F0_THRESHOLD):
    """Vectorized closure solve over arbitrary leading shape.

    f0: (...,), f1: (..., 3). Returns (alpha, beta, active, n_clamped):
    alpha (...,), beta (..., 3), active boolean mask (f0 > threshold). At
    inactive entries alpha/beta are zero placeholders (f_hat = 0 behavior).
    Anisotropy is clamped to U_CLAMP where rounding pushed it past; the count
    is returned. Negative f0 above -threshold is treated as vacuum; anything
    more negative raises.
    """
    f0 = np.asarray(f0, dtype=float)
    f1 = np.asarray(f1, dtype=float)
    if np.any(f0 < -threshold) or not np.all(np.isfinite(f0)):
        raise RealizabilityError("f0 significantly negative or non-finite")
    active = f0 > threshold
    f0safe = np.where(active, f0, 1.0)
    f1n = np.linalg.norm(f1, axis=-1)
    u = np.where(active, f1n / f0safe, 0.0)
    n_clamped = int(np.count_nonzero((u > U_CLAMP) & active))
    u = np.minimum(u, U_CLAMP)
    x = z_inverse_batch(u)
    alpha = np.where(active, np.log(f0safe / FOUR_PI) - _log_sinhc(x), 0.0)
    scale = np.where(active & (f1n > 0.0), x / np.where(f1n > 0.0, f1n, 1.0), 0.0)
    beta = scale[..., None] * f1
    return alpha, beta, active, n_clamped


def z_inverse_batch(u):
    """z_inverse on already-clamped arrays (no realizability checks)."""
    u = np.asarray(u, dtype=float)
    out = 3.0 * u + 1.8 * u**3
    solve = u >= 1.0e-5
    if np.any(solve):
        flat = z_inverse(u[solve])
        out = out.copy()
        out[solve] = flat
    return out


def f2_dot_n_batch(f0, f1, n):
    """f2 . n = f0 (a n + (1-3a) (d.n) d) for batched states and normals.

    f0 (...,), f1 (..., 3), n broadcastable to (..., 3). Vacuum entries give 0.
    """
    f0 = np.asarray(f0, dtype=float)
    f1 = np.asarray(f1, dtype=float)
    n = np.broadcast_to(np.asarray(n, dtype=float), f1.shape)
    f1n = np.linalg.norm(f1, axis=-1)
    pos = f0 > 0.0
    u = np.where(pos, f1n / np.where(pos, f0, 1.0), 0.0)
    u = np.minimum(u, U_CLAMP)
    a = eddington_ratio(u, z_inverse_batch(u))
    d = f1 / np.where(f1n > 0.0, f1n, 1.0)[..., None]
    dn = np.einsum("...k,...k->...", d, n)
    return f0[..., None] * (a[..., None] * n + ((1.0 - 3.0 * a) * dn)[..., None] * d)


def jacobian_batch(f0, f1, threshold: float = F0_THRESHOLD):
    """Batched ansatz Jacobians: (..., 4, 4) plus validity mask.

    Entries with f0 <= threshold get an identity placeholder and mask False
    (second-order terms are dropped there).
    """
    f0 = np.asarray(f0, dtype=float)
    f1 = np.asarray(f1, dtype=float)
    active = f0 > threshold
    f0safe = np.where(active, f0, 1.0)
    f1n = np.linalg.norm(f1, axis=-1)
    u = np.where(active, f1n / f0safe, 0.0)
    u = np.minimum(u, U_CLAMP)
    x = z_inverse_batch(u)
    a = eddington_ratio(u, x)
    small = u < 1.0e-5
    x_over_u = np.where(small, 1.0 / a, x / np.where(small, 1.0, u))
    xi = 1.0 - 2.0 * a - u * u
    d = f1 / np.where(f1n > 0.0, f1n, 1.0)[..., None]
    uvec = u[..., None] * d
    J = np.zeros(f0.shape + (4, 4))
    J[..., 0, 0] = 1.0 - 2.0 * a
    J[..., 0, 1:] = -uvec
    J[..., 1:, 0] = -uvec
    J[..., 1:, 1:] = (x_over_u * xi)[..., None, None] * np.eye(3) + (
        1.0 - x_over_u * xi
    )[..., None, None] * np.einsum("...i,...j->...ij", d, d)
    J /= (f0safe * xi)[..., None, None]
    J[~active] = np.eye(4)
    return J, active
