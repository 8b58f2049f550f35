"""Low-level numerical kernels: scaled modified Bessel functions and the
Gauss-Legendre accumulation of half-moment family tables.

The table layout, for one ansatz entry with rotated-frame parameters
(alpha, bz, bxy) and GL nodes mu_j, weights w_j on [0,1], s_j = sqrt(1-mu_j^2):

    E_j(sign) = exp(alpha + sign*bz*mu_j + a_j) * Ie_n(a_j),  a_j = bxy*s_j

    G0[k] = sum_j w_j mu_j^k E_j(I0e)          k = 0..4
    G1[k] = sum_j w_j mu_j^k s_j E_j(I1e)      k = 0..3
    G2[k] = sum_j w_j mu_j^k s_j^2 E_j(I2e)    k = 0..2

with Ie_n(a) = exp(-a) I_n(a). The summed exponent alpha + bz*mu + a is
bounded by alpha + ||beta||, which stays moderate for any realizable ansatz,
so no further scaling is needed. The minus-half tables use bz -> -bz; sign
bookkeeping against mu-parity is done by the assembly layer.

Everything exists twice: a vectorized numpy form (reference) and a numba
njit form (used when numba imports and UGKSM1_NO_NUMBA is unset). The two
are equivalence-tested.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:  # pragma: no cover - environment dependent
    if os.environ.get("UGKSM1_NO_NUMBA"):
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        if args and callable(args[0]):
            return args[0]
        return wrap


_SERIES_CUT = 30.0  # power series below, asymptotic expansion above


@njit(cache=True)
def _ive_series(n, x):
    """exp(-x) I_n(x) by the ascending power series, for 0 <= x <= 30."""
    half = 0.5 * x
    term = 1.0
    for k in range(1, n + 1):
        term *= half / k
    total = term
    x24 = half * half
    for k in range(1, 80):
        term *= x24 / (k * (n + k))
        total += term
        if term < 1.0e-17 * total:
            break
    return total * math.exp(-x)


@njit(cache=True)
def _ive_asymptotic(n, x):
    """exp(-x) I_n(x) by the large-argument expansion, for x > 30."""
    mu = 4.0 * n * n
    term = 1.0
    total = 1.0
    for k in range(1, 14):
        term *= -(mu - (2.0 * k - 1.0) ** 2) / (k * 8.0 * x)
        total += term
        if abs(term) < 1.0e-18:
            break
    return total / math.sqrt(2.0 * math.pi * x)


@njit(cache=True)
def _ive(n, x):
    if x <= _SERIES_CUT:
        return _ive_series(n, x)
    return _ive_asymptotic(n, x)


def ive_np(n, x):
    """Vectorized exp(-x) I_n(x) on x >= 0 (numpy reference path)."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = x <= _SERIES_CUT
    if np.any(small):
        xs = x[small]
        half = 0.5 * xs
        term = np.ones_like(xs)
        for k in range(1, n + 1):
            term *= half / k
        total = term.copy()
        x24 = half * half
        for k in range(1, 80):
            term = term * x24 / (k * (n + k))
            total += term
            if np.all(term < 1.0e-17 * total):
                break
        out[small] = total * np.exp(-xs)
    if np.any(~small):
        xl = x[~small]
        mu = 4.0 * n * n
        term = np.ones_like(xl)
        total = np.ones_like(xl)
        for k in range(1, 14):
            term = term * (-(mu - (2.0 * k - 1.0) ** 2) / (k * 8.0 * xl))
            total += term
        out[~small] = total / np.sqrt(2.0 * np.pi * xl)
    return out


@njit(cache=True)
def _tables_nb(alpha, bz, bxy, active, mu, w, order2, G0p, G0m, G1p, G1m, G2p, G2m):
    n_entries = alpha.shape[0]
    n_mu = mu.shape[0]
    for i in range(n_entries):
        if not active[i]:
            continue
        a_i, bz_i, bxy_i = alpha[i], bz[i], bxy[i]
        if bxy_i == 0.0:
            # beta along the axis: azimuthal integrals collapse and only the
            # I0 family survives. Exponentiate the combined argument: for
            # strongly beamed entries alpha ~ -|beta| and the split form
            # exp(alpha)*exp(-bz*mu) underflows to 0/0 even though the
            # product is an ordinary number.
            for j in range(n_mu):
                m = mu[j]
                ep = math.exp(a_i + bz_i * m)
                em = math.exp(a_i - bz_i * m)
                wj = w[j]
                m2 = m * m
                G0p[i, 0] += wj * ep
                G0m[i, 0] += wj * em
                G0p[i, 1] += wj * m * ep
                G0m[i, 1] += wj * m * em
                G0p[i, 2] += wj * m2 * ep
                G0m[i, 2] += wj * m2 * em
                if order2:
                    G0p[i, 3] += wj * m2 * m * ep
                    G0m[i, 3] += wj * m2 * m * em
                    G0p[i, 4] += wj * m2 * m2 * ep
                    G0m[i, 4] += wj * m2 * m2 * em
            continue
        for j in range(n_mu):
            m = mu[j]
            s2 = 1.0 - m * m
            s = math.sqrt(s2) if s2 > 0.0 else 0.0
            a = bxy_i * s
            if a > 1.0e-300:
                i0 = _ive(0, a)
                i1 = _ive(1, a)
                i2 = _ive(2, a) if order2 else 0.0
            else:
                i0, i1, i2 = 1.0, 0.0, 0.0
            ep = math.exp(a_i + bz_i * m + a)
            em = math.exp(a_i - bz_i * m + a)
            wj = w[j]
            m2 = m * m
            # I0 family, k = 0..4
            c = wj * i0
            G0p[i, 0] += c * ep
            G0m[i, 0] += c * em
            G0p[i, 1] += c * m * ep
            G0m[i, 1] += c * m * em
            G0p[i, 2] += c * m2 * ep
            G0m[i, 2] += c * m2 * em
            if order2:
                G0p[i, 3] += c * m2 * m * ep
                G0m[i, 3] += c * m2 * m * em
                G0p[i, 4] += c * m2 * m2 * ep
                G0m[i, 4] += c * m2 * m2 * em
            # I1 family (s weight), k = 0..3
            c = wj * s * i1
            G1p[i, 0] += c * ep
            G1m[i, 0] += c * em
            G1p[i, 1] += c * m * ep
            G1m[i, 1] += c * m * em
            if order2:
                G1p[i, 2] += c * m2 * ep
                G1m[i, 2] += c * m2 * em
                G1p[i, 3] += c * m2 * m * ep
                G1m[i, 3] += c * m2 * m * em
                # I2 family (s^2 weight), k = 0..2
                c = wj * s2 * i2
                G2p[i, 0] += c * ep
                G2m[i, 0] += c * em
                G2p[i, 1] += c * m * ep
                G2m[i, 1] += c * m * em
                G2p[i, 2] += c * m2 * ep
                G2m[i, 2] += c * m2 * em


def _tables_np(alpha, bz, bxy, active, mu, w, order2, G0p, G0m, G1p, G1m, G2p, G2m):
    if not np.any(active):
        return
    al = alpha[active]
    bzs = bz[active]
    bxys = bxy[active]
    s2 = 1.0 - mu * mu
    s = np.sqrt(np.maximum(s2, 0.0))
    a = bxys[:, None] * s[None, :]
    i0 = ive_np(0, a.ravel()).reshape(a.shape)
    i1 = ive_np(1, a.ravel()).reshape(a.shape)
    ep = np.exp(al[:, None] + bzs[:, None] * mu[None, :] + a)
    em = np.exp(al[:, None] - bzs[:, None] * mu[None, :] + a)
    kmax0 = 5 if order2 else 3
    vander = np.stack([w * mu**k for k in range(5)], axis=1)  # (n_mu, 5)
    e0p = ep * i0
    e0m = em * i0
    G0p[active, :kmax0] = e0p @ vander[:, :kmax0]
    G0m[active, :kmax0] = e0m @ vander[:, :kmax0]
    kmax1 = 4 if order2 else 2
    e1p = ep * (i1 * s[None, :])
    e1m = em * (i1 * s[None, :])
    G1p[active, :kmax1] = e1p @ vander[:, :kmax1]
    G1m[active, :kmax1] = e1m @ vander[:, :kmax1]
    if order2:
        i2 = ive_np(2, a.ravel()).reshape(a.shape)
        e2p = ep * (i2 * s2[None, :])
        e2m = em * (i2 * s2[None, :])
        G2p[active] = e2p @ vander[:, :3]
        G2m[active] = e2m @ vander[:, :3]


def family_tables(alpha, bz, bxy, active, mu, w, order2=False, force_numpy=False):
    """Half-moment base tables for a batch of rotated ansatz parameters.

    All inputs 1D of common length (flattened by the caller). Returns
    (G0p, G0m, G1p, G1m, G2p, G2m); inactive entries are all-zero rows.
    """
    n = alpha.shape[0]
    G0p = np.zeros((n, 5))
    G0m = np.zeros((n, 5))
    G1p = np.zeros((n, 4))
    G1m = np.zeros((n, 4))
    G2p = np.zeros((n, 3))
    G2m = np.zeros((n, 3))
    args = (alpha, bz, bxy, active, mu, w, bool(order2), G0p, G0m, G1p, G1m, G2p, G2m)
    if HAVE_NUMBA and not force_numpy:
        _tables_nb(*args)
    else:
        _tables_np(*args)
    return G0p, G0m, G1p, G1m, G2p, G2m
