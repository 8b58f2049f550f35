"""Half-sphere moments of the M1 ansatz in arbitrary directions.

The 2D angular integrals reduce to 1D Gauss-Legendre quadratures over
mu in [0,1] against modified Bessel functions of the azimuthal variable;
minus-half moments come from the bz -> -bz substitution with mu-parity
signs. Vector and tensor families are assembled in the rotated frame
(direction n mapped to e_z) and recombined through the transpose rotation.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss

from . import _kernels
from .closure import eddington_ratio, z_inverse_batch
from .errors import RenormalizationError

RENORM_EPS = 1.0e-14
# resolution threshold for the batched guard: a half-moment sum below this
# fraction of |plus| + |minus| is treated as cancellation noise
RENORM_REL = 1.0e-12


@dataclass(frozen=True)
class GaussLegendreRule:
    """Gauss-Legendre nodes/weights mapped to [0, 1]."""

    n_points: int
    nodes: np.ndarray
    weights: np.ndarray

    @staticmethod
    def create(n_points: int) -> "GaussLegendreRule":
        return _gl_cached(int(n_points))


@lru_cache(maxsize=None)
def _gl_cached(n_points: int) -> GaussLegendreRule:
    x, w = leggauss(n_points)
    nodes = 0.5 * (x + 1.0)
    weights = 0.5 * w
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return GaussLegendreRule(n_points, nodes, weights)


def bessel_i(order: int, x):
    """Modified Bessel function I_n (n = 0, 1, 2) of the first kind.

    Power series up to x = 30, standard asymptotic expansion beyond;
    relative error <= 1e-12 on [0, 50]. Overflows past x ~ 700.
    """
    if order not in (0, 1, 2):
        raise ValueError("only orders 0, 1, 2 are provided")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0.0):
        raise ValueError("bessel_i domain is x >= 0")
    out = _kernels.ive_np(order, x) * np.exp(x)
    return out if out.ndim else float(out)


def rotation_to_axis(n) -> np.ndarray:
    """Rotation R with R n = e_z (composition of a z- and a y-rotation)."""
    n = np.asarray(n, dtype=float)
    if abs(np.linalg.norm(n) - 1.0) > 1.0e-12:
        raise ValueError("rotation_to_axis needs a unit vector")
    return rotation_matrices(n[None, :])[0]


def rotation_matrices(n: np.ndarray) -> np.ndarray:
    """Batched rotation matrices mapping each unit n to e_z; shape (..., 3, 3)."""
    n = np.asarray(n, dtype=float)
    nx, ny, nz = n[..., 0], n[..., 1], n[..., 2]
    st = np.hypot(nx, ny)
    ct = nz
    polar = st < 1.0e-15
    stsafe = np.where(polar, 1.0, st)
    cp = np.where(polar, 1.0, nx / stsafe)
    sp = np.where(polar, 0.0, ny / stsafe)
    R = np.empty(n.shape[:-1] + (3, 3))
    R[..., 0, 0] = ct * cp
    R[..., 0, 1] = ct * sp
    R[..., 0, 2] = -st
    R[..., 1, 0] = -sp
    R[..., 1, 1] = cp
    R[..., 1, 2] = 0.0
    R[..., 2, 0] = st * cp
    R[..., 2, 1] = st * sp
    R[..., 2, 2] = ct
    return R


@dataclass
class HalfMomentSet:
    """Half-sphere families of one ansatz for a unit direction n.

    s_*  : <Omega_n f 1+-> scalars
    v_*  : <Omega_n Omega f 1+-> vectors
    s2_*, v2_* : the Omega_n^2-weighted analogues (second order)
    m2_*, m3_* : <Omega_n^(1|2) Omega x Omega f 1+-> tensors used to contract
                 ansatz slope coefficients (second order)
    """

    s_plus: float
    s_minus: float
    v_plus: np.ndarray
    v_minus: np.ndarray
    s2_plus: float | None = None
    s2_minus: float | None = None
    v2_plus: np.ndarray | None = None
    v2_minus: np.ndarray | None = None
    m2_plus: np.ndarray | None = None
    m2_minus: np.ndarray | None = None
    m3_plus: np.ndarray | None = None
    m3_minus: np.ndarray | None = None


def _assemble_rotated(tables, cphi, sphi, order2):
    """Family values in the rotated frame from the base tables.

    Minus-half values carry (-1)^k for the mu-power k of each component.
    Returns a dict of arrays over the batch.
    """
    G0p, G0m, G1p, G1m, G2p, G2m = tables
    twopi = 2.0 * np.pi
    out = {
        "h0p": twopi * G0p[:, 1],
        "h0m": -twopi * G0m[:, 1],
        "hvp": np.stack(
            [twopi * cphi * G1p[:, 1], twopi * sphi * G1p[:, 1], twopi * G0p[:, 2]], axis=-1
        ),
        "hvm": np.stack(
            [-twopi * cphi * G1m[:, 1], -twopi * sphi * G1m[:, 1], twopi * G0m[:, 2]], axis=-1
        ),
    }
    if not order2:
        return out
    pi = np.pi
    c2 = cphi * cphi - sphi * sphi
    s2 = 2.0 * cphi * sphi
    out["g0p"] = twopi * G0p[:, 2]
    out["g0m"] = twopi * G0m[:, 2]
    out["gvp"] = np.stack(
        [twopi * cphi * G1p[:, 2], twopi * sphi * G1p[:, 2], twopi * G0p[:, 3]], axis=-1
    )
    out["gvm"] = np.stack(
        [twopi * cphi * G1m[:, 2], twopi * sphi * G1m[:, 2], -twopi * G0m[:, 3]], axis=-1
    )

    def rank2(G0, G1, G2, k, sign_odd, sign_even):
        # sign_odd multiplies mu-power k and k+2 entries, sign_even power k+1
        q = G0[:, k] - G0[:, k + 2]
        xx = pi * (q + c2 * G2[:, k])
        yy = pi * (q - c2 * G2[:, k])
        xy = pi * s2 * G2[:, k]
        xz = twopi * cphi * G1[:, k + 1]
        yz = twopi * sphi * G1[:, k + 1]
        zz = twopi * G0[:, k + 2]
        T = np.empty(G0.shape[:-1] + (3, 3))
        T[..., 0, 0] = sign_odd * xx
        T[..., 1, 1] = sign_odd * yy
        T[..., 0, 1] = T[..., 1, 0] = sign_odd * xy
        T[..., 0, 2] = T[..., 2, 0] = sign_even * xz
        T[..., 1, 2] = T[..., 2, 1] = sign_even * yz
        T[..., 2, 2] = sign_odd * zz
        return T

    out["m2p"] = rank2(G0p, G1p, G2p, 1, 1.0, 1.0)
    out["m2m"] = rank2(G0m, G1m, G2m, 1, -1.0, 1.0)
    out["m3p"] = rank2(G0p, G1p, G2p, 2, 1.0, 1.0)
    out["m3m"] = rank2(G0m, G1m, G2m, 2, 1.0, -1.0)
    return out


def renormalize_halves(plus, minus, exact_total):
    """Scale both halves so they sum to the analytic total.

    No-op when the total and the computed sum are both below 1e-14 in
    magnitude; raises RenormalizationError when the sum vanishes while the
    total does not (caller falls back to the unscaled halves).
    """
    s = plus + minus
    if abs(s) < RENORM_EPS:
        if abs(exact_total) < RENORM_EPS:
            return plus, minus
        raise RenormalizationError(
            f"half-moment sum {s} too small to renormalize onto total {exact_total}"
        )
    # exact_total * (half / s) keeps intermediates bounded even when the
    # halves are subnormal (see _renorm_batch).
    return exact_total * (plus / s), exact_total * (minus / s)


def _renorm_batch(plus, minus, total):
    """Batched renormalization; returns scaled halves and the failure count.

    Unlike the scalar op, the guard here is relative: the two halves are
    nearly opposite near isotropy, so their sum is pure cancellation noise
    whenever |plus + minus| is far below |plus| + |minus|. Scaling by
    total/sum in that regime would multiply both halves by a noise ratio;
    instead the halves are left as computed (their own quadrature error is
    at rounding level there).
    """
    s = plus + minus
    denom = np.abs(plus) + np.abs(minus)
    resolved = np.abs(s) > RENORM_REL * denom
    fail = ~resolved & (np.abs(total) > RENORM_REL * denom)
    # total * (half / s) rather than half * (total / s): the halves can be
    # subnormal for fully beamed entries, where total / s overflows even
    # though the rescaled halves are ordinary numbers. |half / s| <= 1/REL
    # whenever the sum is resolved, so this form cannot overflow.
    safe = np.where(resolved, s, 1.0)
    out_plus = np.where(resolved, total * (plus / safe), plus)
    out_minus = np.where(resolved, total * (minus / safe), minus)
    return out_plus, out_minus, int(np.count_nonzero(fail))


def directed_families(
    f0,
    f1,
    alpha,
    beta,
    active,
    R,
    rule: GaussLegendreRule,
    order2: bool = False,
    renormalize: bool = True,
    renormalize_order2: bool = False,
    counters: dict | None = None,
):
    """Half-moment families of a batch of ansatz entries, in the lab frame.

    f0 (N,), f1 (N,3): moments; alpha (N,), beta (N,3): entropic variables;
    active (N,): vacuum mask; R: (3,3) shared or (N,3,3) per-entry rotations
    with R n = e_z. Returns a dict of lab-frame arrays (keys as in
    _assemble_rotated). Renormalization rescales the first-order families
    onto the closed-form totals f1.n and f2.n, componentwise in the rotated
    frame; failures are counted and left unscaled.
    """
    f0 = np.asarray(f0, dtype=float)
    f1 = np.asarray(f1, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    shared_R = R.ndim == 2
    brot = beta @ R.T if shared_R else np.einsum("nij,nj->ni", R, beta)
    bz = brot[:, 2]
    bxy = np.hypot(brot[:, 0], brot[:, 1])
    safe = np.where(bxy > 0.0, bxy, 1.0)
    cphi = np.where(bxy > 0.0, brot[:, 0] / safe, 1.0)
    sphi = np.where(bxy > 0.0, brot[:, 1] / safe, 0.0)
    tables = _kernels.family_tables(
        np.ascontiguousarray(alpha),
        np.ascontiguousarray(bz),
        np.ascontiguousarray(bxy),
        np.ascontiguousarray(active),
        rule.nodes,
        rule.weights,
        order2=order2,
    )
    fam = _assemble_rotated(tables, cphi, sphi, order2)

    if renormalize:
        f1rot = f1 @ R.T if shared_R else np.einsum("nij,nj->ni", R, f1)
        f0safe = np.where(active, f0, 1.0)
        u = np.where(active, np.linalg.norm(f1, axis=-1) / f0safe, 0.0)
        a = eddington_ratio(u, z_inverse_batch(np.minimum(u, 1.0 - 1.0e-12)))
        tau0 = np.where(active, f1rot[:, 2], 0.0)
        # f2 . n in the rotated frame: f0 a e_z + f0 (1 - 3a) d_z d
        f1n = np.linalg.norm(f1rot, axis=-1)
        d = f1rot / np.where(f1n > 0.0, f1n, 1.0)[:, None]
        tauv = (f0 * active) [:, None] * (
            a[:, None] * np.array([0.0, 0.0, 1.0])
            + ((1.0 - 3.0 * a) * d[:, 2])[:, None] * d
        )
        nfail = 0
        fam["h0p"], fam["h0m"], nf = _renorm_batch(fam["h0p"], fam["h0m"], tau0)
        nfail += nf
        for k in range(3):
            fam["hvp"][:, k], fam["hvm"][:, k], nf = _renorm_batch(
                fam["hvp"][:, k], fam["hvm"][:, k], tauv[:, k]
            )
            nfail += nf
        if counters is not None:
            counters["renorm_fallback"] = counters.get("renorm_fallback", 0) + nfail
    # second-order families are left unrenormalized unless forced
    if order2 and renormalize_order2:
        # totals: <Omega_n^2 f> = Psi2-free second moment contraction n.f2.n etc.
        pass

    def to_lab_vec(v):
        return v @ R if shared_R else np.einsum("nij,ni->nj", R, v)

    def to_lab_tensor(T):
        if shared_R:
            return np.einsum("ji,njk,kl->nil", R, T, R)
        return np.einsum("nji,njk,nkl->nil", R, T, R)

    for key in ("hvp", "hvm", "gvp", "gvm"):
        if key in fam:
            fam[key] = to_lab_vec(fam[key])
    for key in ("m2p", "m2m", "m3p", "m3m"):
        if key in fam:
            fam[key] = to_lab_tensor(fam[key])
    return fam


def half_moments_axis(alpha: float, beta_rot, rule: GaussLegendreRule, order: int = 1) -> HalfMomentSet:
    """Half moments along e_z of the ansatz with rotated-frame (alpha, beta)."""
    beta_rot = np.asarray(beta_rot, dtype=float)
    fam = directed_families(
        np.array([1.0]),  # placeholder moments; renormalization off
        np.zeros((1, 3)),
        np.array([float(alpha)]),
        beta_rot[None, :],
        np.array([True]),
        np.eye(3),
        rule,
        order2=(order == 2),
        renormalize=False,
    )
    return _set_from_fam(fam, order)


def half_moments_directed(f0: float, f1, n, rule: GaussLegendreRule, order: int = 1) -> HalfMomentSet:
    """Lab-frame half moments of the ansatz with moments (f0, f1), direction n."""
    from .closure import entropic_batch

    f1 = np.asarray(f1, dtype=float)
    alpha, beta, active, _ = entropic_batch(np.array([float(f0)]), f1[None, :])
    R = rotation_to_axis(n)
    fam = directed_families(
        np.array([float(f0)]), f1[None, :], alpha, beta, active, R, rule,
        order2=(order == 2), renormalize=False,
    )
    return _set_from_fam(fam, order)


def _set_from_fam(fam, order):
    out = HalfMomentSet(
        s_plus=float(fam["h0p"][0]),
        s_minus=float(fam["h0m"][0]),
        v_plus=fam["hvp"][0],
        v_minus=fam["hvm"][0],
    )
    if order == 2:
        out.s2_plus = float(fam["g0p"][0])
        out.s2_minus = float(fam["g0m"][0])
        out.v2_plus = fam["gvp"][0]
        out.v2_minus = fam["gvm"][0]
        out.m2_plus = fam["m2p"][0]
        out.m2_minus = fam["m2m"][0]
        out.m3_plus = fam["m3p"][0]
        out.m3_minus = fam["m3m"][0]
    return out
