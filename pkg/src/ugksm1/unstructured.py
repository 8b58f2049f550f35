"""Finite-volume solver on triangle meshes.

Edge fluxes reuse the shared interface assembly with per-edge rotations; the
gradient (D-term) slopes come in three modes that differ in how the normal
gradient is reconstructed on the edge diamond. Diamond and ModifiedDiamond
use nodal values interpolated from cell averages and stay consistent on
deformed meshes; Naive uses only the two cell centers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
import scipy.sparse as sp

from . import fluxcore
from .angular import GaussLegendreRule, directed_families, rotation_matrices
from .closure import F0_THRESHOLD, entropic_batch
from .errors import ConfigError, GeometryError, StepFailure
from .fluxcore import coefficients
from .mesh import EdgeGeom, NodalLSWeights, TriMesh, edge_geometry, nodal_ls_weights
from .physics import (
    RegimeParams,
    SpeedGrid,
    VariableSet,
    collision_frequency,
    k_coeff,
    maxwellian_m0,
    temperature,
    vars_from_macro,
)
from .structured import BCKind, BoundarySide, _beam_moments

_GRAD_EIG = 5.0 + np.sqrt(10.0)


class GradientMode(Enum):
    NAIVE = "naive"
    DIAMOND = "diamond"
    MODIFIED_DIAMOND = "modified_diamond"


@dataclass
class EdgeSlopes:
    """Per-edge normal half-slopes in the chosen variable set, per unit length.

    delta_minus / delta_plus: (E, 2) K-side and L-side slopes; x_e_value:
    interface value of the variables used in the construction; W_e: macro
    interface state for Maxwellian/coefficient evaluation; target: the
    mode's normal-gradient approximation, equal to the half-slope mean.
    """

    delta_minus: np.ndarray
    delta_plus: np.ndarray
    x_e_value: np.ndarray
    W_e: np.ndarray
    target: np.ndarray


def _interface_w(W_K, W_L, frac_minus, frac_plus, total):
    """Interpolated interface value -((f+ - f-)/(2 total)) dW + mean."""
    dW = W_L - W_K
    return 0.5 * (W_K + W_L) - ((frac_plus - frac_minus) / (2.0 * total))[..., None] * dW


def _xvars(W, varset):
    return np.stack(vars_from_macro(W[..., 0], W[..., 1], varset), axis=-1)


def edge_slopes_naive(geom: EdgeGeom, W_K, W_L, varset=VariableSet.CONSERVATIVE) -> EdgeSlopes:
    """Two-point half slopes split at the centroid-line crossing.

    delta_minus = (X_e - X_K)/l-, delta_plus = (X_L - X_e)/l+ with the
    interpolated X_e; both equal (X_L - X_K)/l by construction.
    """
    lm, lp, l = geom.l_minus, geom.l_plus, geom.l
    if np.any(lm <= 0.0) or np.any(lp <= 0.0):
        raise GeometryError("nonpositive centroid half-distance")
    X_K, X_L = _xvars(np.asarray(W_K, float), varset), _xvars(np.asarray(W_L, float), varset)
    X_e = _interface_w(X_K, X_L, lm, lp, l)
    dm = (X_e - X_K) / lm[..., None]
    dp = (X_L - X_e) / lp[..., None]
    W_e = _interface_w(np.asarray(W_K, float), np.asarray(W_L, float), lm, lp, l)
    target = (X_L - X_K) / l[..., None]
    return EdgeSlopes(dm, dp, X_e, W_e, target)


def edge_slopes_diamond(
    geom: EdgeGeom, W_K, W_L, nodal_minus, nodal_plus, varset=VariableSet.CONSERVATIVE
) -> EdgeSlopes:
    """Diamond half slopes: two-point normal part plus the tangential
    correction kappa (X+ - X-)/|e| built from the edge-endpoint values."""
    hm, hp, h = geom.h_minus, geom.h_plus, geom.h
    if np.any(hm <= 0.0) or np.any(hp <= 0.0):
        raise GeometryError("nonpositive diamond half-height")
    X_K, X_L = _xvars(np.asarray(W_K, float), varset), _xvars(np.asarray(W_L, float), varset)
    X_e = _interface_w(X_K, X_L, hm, hp, h)
    tang = (geom.kappa / geom.length)[..., None] * (
        np.asarray(nodal_plus, float) - np.asarray(nodal_minus, float)
    )
    dm = (X_e - X_K) / hm[..., None] - tang
    dp = (X_L - X_e) / hp[..., None] - tang
    W_e = _interface_w(np.asarray(W_K, float), np.asarray(W_L, float), hm, hp, h)
    target = (X_L - X_K) / h[..., None] - tang
    return EdgeSlopes(dm, dp, X_e, W_e, target)


def edge_slopes_modified_diamond(
    geom: EdgeGeom,
    W_K,
    W_L,
    star_minus,
    star_plus,
    nodal_minus,
    nodal_plus,
    varset=VariableSet.CONSERVATIVE,
) -> EdgeSlopes:
    """Symmetrized diamond slopes with the common half-height min(h-, h+).

    star_minus / star_plus are the cell values extrapolated to the
    symmetrized points on the centroid line (already in X variables); the
    half-slope mean is then independent of the interface value.
    """
    hm, hp, h = geom.h_minus, geom.h_plus, geom.h
    if np.any(hm <= 0.0) or np.any(hp <= 0.0):
        raise GeometryError("nonpositive diamond half-height")
    h0 = np.minimum(hm, hp)
    Xm = np.asarray(star_minus, dtype=float)
    Xp = np.asarray(star_plus, dtype=float)
    W_K = np.asarray(W_K, float)
    W_L = np.asarray(W_L, float)
    X_K, X_L = _xvars(W_K, varset), _xvars(W_L, varset)
    X_e = _interface_w(X_K, X_L, hm, hp, h)
    tang = (geom.kappa / geom.length)[..., None] * (
        np.asarray(nodal_plus, float) - np.asarray(nodal_minus, float)
    )
    dm = (X_e - Xm) / h0[..., None] - tang
    dp = (Xp - X_e) / h0[..., None] - tang
    W_e = _interface_w(W_K, W_L, hm, hp, h)
    target = (Xp - Xm) / (2.0 * h0[..., None]) - tang
    return EdgeSlopes(dm, dp, X_e, W_e, target)


def slope_consistency_error(slopes: EdgeSlopes) -> float:
    """Max |mean half slope - target|, the per-edge consistency residual."""
    mean = 0.5 * (slopes.delta_minus + slopes.delta_plus)
    return float(np.max(np.abs(mean - slopes.target))) if mean.size else 0.0


@dataclass
class CellGradientOperator:
    """Per-triangle gradient of the linear interpolant of nodal values."""

    node_ids: np.ndarray    # (N, 3)
    inv_edges: np.ndarray   # (N, 2, 2), inverse of [[p1-p0], [p2-p0]]

    @staticmethod
    def build(mesh: TriMesh) -> "CellGradientOperator":
        p = mesh.nodes[mesh.cells]
        M = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=1)
        det = M[:, 0, 0] * M[:, 1, 1] - M[:, 0, 1] * M[:, 1, 0]
        inv = np.empty_like(M)
        inv[:, 0, 0] = M[:, 1, 1]
        inv[:, 0, 1] = -M[:, 0, 1]
        inv[:, 1, 0] = -M[:, 1, 0]
        inv[:, 1, 1] = M[:, 0, 0]
        inv /= det[:, None, None]
        return CellGradientOperator(node_ids=mesh.cells, inv_edges=inv)

    def __call__(self, nodal_values: np.ndarray) -> np.ndarray:
        """Gradients (N, 2, comps...) of the P1 field with the given nodal data."""
        u = np.asarray(nodal_values, dtype=float)[self.node_ids]
        du = np.stack([u[:, 1] - u[:, 0], u[:, 2] - u[:, 0]], axis=1)
        return np.einsum("nij,nj...->ni...", self.inv_edges, du)


@dataclass
class TriBC:
    """Boundary treatment for triangle meshes: a default side condition and
    optional per-tag overrides (tags from the mesh's line elements)."""

    default: BoundarySide
    by_tag: dict = field(default_factory=dict)

    def side_for(self, tag: int) -> BoundarySide:
        return self.by_tag.get(tag, self.default)

    @staticmethod
    def all_neumann() -> "TriBC":
        return TriBC(default=BoundarySide.neumann())


@dataclass
class TriState:
    """Cell-centered solution and configuration on a triangle mesh."""

    mesh: TriMesh
    geom: EdgeGeom
    nodal: NodalLSWeights
    grid: SpeedGrid
    rule: GaussLegendreRule
    regime: RegimeParams
    W: np.ndarray            # (N, 2)
    U: np.ndarray            # (N, nv, 4)
    t: float = 0.0
    varset: VariableSet = VariableSet.CONSERVATIVE
    mode: GradientMode = GradientMode.DIAMOND
    renormalize: bool = True
    f0_threshold: float = F0_THRESHOLD
    kinetic_term_floor: float = 1.0e-8
    counters: dict = field(default_factory=dict)
    kinetic_interface_state: bool = False
    _edge_R: np.ndarray | None = field(default=None, repr=False)
    _cell_grad: CellGradientOperator | None = field(default=None, repr=False)
    _scatter: sp.csr_matrix | None = field(default=None, repr=False)

    def __post_init__(self):
        n = self.mesh.n_cells
        if self.W.shape != (n, 2):
            raise ConfigError(f"W must have shape {(n, 2)}")
        if self.U.shape != (n, self.grid.n_v, 4):
            raise ConfigError(f"U must have shape {(n, self.grid.n_v, 4)}")
        if self._edge_R is None:
            n3 = np.zeros((self.geom.n.shape[0], 3))
            n3[:, :2] = self.geom.n
            object.__setattr__(self, "_edge_R", rotation_matrices(n3))
        if self._cell_grad is None and self.mode is GradientMode.MODIFIED_DIAMOND:
            object.__setattr__(self, "_cell_grad", CellGradientOperator.build(self.mesh))
        if self._scatter is None:
            object.__setattr__(self, "_scatter", _divergence_operator(self.mesh, self.geom))

    def totals(self) -> tuple[float, float]:
        areas = self.mesh.areas
        return (
            float(np.sum(self.W[:, 0] * areas)),
            float(np.sum(self.W[:, 1] * areas)),
        )


def _divergence_operator(mesh: TriMesh, geom: EdgeGeom) -> sp.csr_matrix:
    """Sparse map from per-edge outward fluxes to per-cell divergences.

    Row K accumulates +|e|/|K| over its edges seen as the minus cell and
    -|e|/|L| where it is the plus cell.
    """
    E = len(geom.length)
    K = mesh.edge_cells[:, 0]
    L = mesh.edge_cells[:, 1]
    rows = [K]
    cols = [np.arange(E)]
    vals = [geom.length / mesh.areas[K]]
    inside = mesh.interior
    rows.append(L[inside])
    cols.append(np.arange(E)[inside])
    vals.append(-geom.length[inside] / mesh.areas[L[inside]])
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(mesh.n_cells, E),
    )
    return mat.tocsr()


def tri_equilibrium_state(
    mesh: TriMesh,
    grid: SpeedGrid,
    rule: GaussLegendreRule,
    regime: RegimeParams,
    rho,
    T,
    **kwargs,
) -> TriState:
    """Maxwellian state from (rho, T) given as scalars, arrays, or callables
    of the centroid coordinates."""
    c = mesh.centroids
    if callable(rho):
        rho = rho(c[:, 0], c[:, 1])
    if callable(T):
        T = T(c[:, 0], c[:, 1])
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (mesh.n_cells,))
    T = np.broadcast_to(np.asarray(T, dtype=float), (mesh.n_cells,))
    W = np.stack([rho, 1.5 * rho * T], axis=-1)
    U = np.zeros((mesh.n_cells, grid.n_v, 4))
    U[..., 0] = maxwellian_m0(rho[:, None], T[:, None], grid.nodes)
    geom = kwargs.pop("geom", None) or edge_geometry(mesh)
    nodal = kwargs.pop("nodal", None) or nodal_ls_weights(mesh)
    return TriState(
        mesh=mesh, geom=geom, nodal=nodal, grid=grid, rule=rule, regime=regime,
        W=W, U=U, **kwargs,
    )


def cfl_dt_tri(state: TriState, cfl_number: float = 0.3, sigma0: float = 0.0) -> float:
    """Documented step bound with the smallest incircle diameter as length."""
    if not 0.0 < cfl_number <= 1.0:
        raise ConfigError("cfl_number must lie in (0, 1]")
    d = float(np.min(state.mesh.incircle_diameters()))
    return cfl_number * (d / state.grid.v_max + 0.9 * sigma0 * d * d)


def gradient_stable_dt_tri(state: TriState, dt_guess: float, safety: float = 0.8) -> float:
    """Explicit-stability bound of the gradient flux on the triangle mesh.

    Per cell: coef_K = sum_e (|e| / (|K| h_e)) |D_e| lam_e (2/3) and the
    update is stable for dt <= 2/max coef; |D| is evaluated at the previous
    (larger) dt iterate so the result is conservative.
    """
    mesh, geom = state.mesh, state.geom
    rho, q = state.W[:, 0], state.W[:, 1]
    sigma, _ = collision_frequency(rho, q, state.regime)
    K = mesh.edge_cells[:, 0]
    L = np.where(mesh.interior, mesh.edge_cells[:, 1], K)
    sig_e = 0.5 * (sigma[K] + sigma[L])
    T = temperature(rho, q)
    lam_e = _GRAD_EIG * 0.5 * (T[K] + T[L])
    h_e = np.where(mesh.interior, geom.h, np.inf)   # boundary edges carry no D-flux jump
    dt = dt_guess
    for _ in range(6):
        D = np.abs(coefficients(dt, state.regime.eta, state.regime.epsilon, sig_e).D)
        contrib = geom.length / h_e * D * lam_e * (2.0 / 3.0)
        coef = np.zeros(mesh.n_cells)
        np.add.at(coef, K, contrib / mesh.areas[K])
        np.add.at(coef, L, np.where(mesh.interior, contrib / mesh.areas[L], 0.0))
        cmax = float(np.max(coef))
        if cmax <= 0.0:
            return dt_guess
        bound = safety * 2.0 / cmax
        new_dt = min(dt_guess, bound)
        if new_dt >= dt * 0.99:
            return new_dt
        dt = new_dt
    return dt


def _edge_side_families(state: TriState, cells, order_R, alpha, beta, active):
    """Half-moment families of the given cells as seen from each edge."""
    nv = state.grid.n_v
    R_rows = np.repeat(order_R, nv, axis=0)
    f0 = state.U[cells, :, 0].reshape(-1)
    f1 = state.U[cells, :, 1:].reshape(-1, 3)
    fam = directed_families(
        f0,
        f1,
        alpha[cells].reshape(-1),
        beta[cells].reshape(-1, 3),
        active[cells].reshape(-1),
        R_rows,
        state.rule,
        renormalize=state.renormalize,
        counters=state.counters,
    )
    shape = (len(cells), nv)
    return {k: v.reshape(shape + v.shape[1:]) for k, v in fam.items()}


def compute_slopes(state: TriState, W=None) -> EdgeSlopes:
    """Interior-edge slopes for the state's gradient mode.

    Boundary edges get zero slopes and W_e = W_K (their flux is replaced by
    the boundary treatment).
    """
    mesh, geom = state.mesh, state.geom
    W = state.W if W is None else W
    interior = mesh.interior
    K = mesh.edge_cells[:, 0]
    L = np.where(interior, mesh.edge_cells[:, 1], K)
    W_K, W_L = W[K], W[L]
    E = len(K)

    if state.mode is GradientMode.NAIVE:
        # build on interior rows only; fill boundary rows with neutral data
        sl = edge_slopes_naive(_masked_geom(geom, interior), W_K[interior], W_L[interior],
                               state.varset)
        return _expand_slopes(sl, interior, E, W, K, state.varset)

    X_cells = _xvars(W, state.varset)
    nodal_X = state.nodal(X_cells)
    nmin = nodal_X[geom.end_minus]
    nplus = nodal_X[geom.end_plus]
    mg = _masked_geom(geom, interior)
    if state.mode is GradientMode.DIAMOND:
        sl = edge_slopes_diamond(mg, W_K[interior], W_L[interior],
                                 nmin[interior], nplus[interior], state.varset)
        return _expand_slopes(sl, interior, E, W, K, state.varset)

    grads = state._cell_grad(nodal_X)     # (N, 2, 2): d/dx_i of X_j
    h0 = np.minimum(geom.h_minus, np.where(interior, geom.h_plus, geom.h_minus))
    d_c = np.where(interior[:, None], mesh.centroids[L] - mesh.centroids[K], 0.0)
    frac = np.where(interior, h0 / np.where(interior, geom.h, 1.0), 0.0)
    x_m = geom.x_star - frac[:, None] * d_c
    x_p = geom.x_star + frac[:, None] * d_c
    star_m = X_cells[K] + np.einsum("eij,ei->ej", grads[K], x_m - mesh.centroids[K])
    star_p = X_cells[L] + np.einsum("eij,ei->ej", grads[L], x_p - mesh.centroids[L])
    sl = edge_slopes_modified_diamond(
        mg, W_K[interior], W_L[interior], star_m[interior], star_p[interior],
        nmin[interior], nplus[interior], state.varset,
    )
    return _expand_slopes(sl, interior, E, W, K, state.varset)


def _masked_geom(geom: EdgeGeom, mask) -> EdgeGeom:
    take = lambda a: a[mask]
    return EdgeGeom(
        n=take(geom.n), tau=take(geom.tau), x_e=take(geom.x_e),
        x_star=take(geom.x_star), length=take(geom.length), l=take(geom.l),
        l_minus=take(geom.l_minus), l_plus=take(geom.l_plus), h=take(geom.h),
        h_minus=take(geom.h_minus), h_plus=take(geom.h_plus),
        kappa=take(geom.kappa), end_minus=take(geom.end_minus),
        end_plus=take(geom.end_plus), boundary=take(geom.boundary),
    )


def _expand_slopes(sl: EdgeSlopes, interior, E, W, K, varset) -> EdgeSlopes:
    out = EdgeSlopes(
        delta_minus=np.zeros((E, 2)),
        delta_plus=np.zeros((E, 2)),
        x_e_value=_xvars(W[K], varset),
        W_e=W[K].copy(),
        target=np.zeros((E, 2)),
    )
    out.delta_minus[interior] = sl.delta_minus
    out.delta_plus[interior] = sl.delta_plus
    out.x_e_value[interior] = sl.x_e_value
    out.W_e[interior] = sl.W_e
    out.target[interior] = sl.target
    return out


def edge_flux_unstructured(
    state: TriState,
    dt: float,
    slopes: EdgeSlopes,
    families=None,
):
    """Per-edge outward (chi0, chi1, phi) for every edge against its K cell.

    Boundary edges are evaluated against the mirror state (Neumann form);
    Dirichlet replacement happens in the step driver. families: optional
    precomputed (fam_K, fam_L) pair.
    """
    mesh, geom = state.mesh, state.geom
    interior = mesh.interior
    K = mesh.edge_cells[:, 0]
    L = np.where(interior, mesh.edge_cells[:, 1], K)

    sigma, _ = collision_frequency(state.W[:, 0], state.W[:, 1], state.regime)
    sig_e = 0.5 * (sigma[K] + sigma[L])
    coeffs = coefficients(dt, state.regime.eta, state.regime.epsilon, sig_e)

    nv = state.grid.n_v
    if families is not None:
        fam_K, fam_L = families
    elif float(np.max(coeffs.A)) * state.regime.eta < state.kinetic_term_floor:
        # Deep in the diffusion regime the upwinded ansatz part (weight
        # A = P/eta with P -> 0) falls below the floor relative to the
        # retained equilibrium and gradient parts; skip the half-moment
        # families entirely. Dirichlet rows are replaced by the step driver
        # with independently computed families, so they are unaffected.
        zshape = (len(K), nv)
        fam_K = {"h0p": np.zeros(zshape), "hvp": np.zeros(zshape + (3,))}
        fam_L = {"h0m": np.zeros(zshape), "hvm": np.zeros(zshape + (3,))}
    else:
        alpha, beta, active, n_cl = entropic_batch(
            state.U[..., 0].reshape(-1), state.U[..., 1:].reshape(-1, 3),
            threshold=state.f0_threshold,
        )
        if n_cl:
            state.counters["ansatz_clamped"] = state.counters.get("ansatz_clamped", 0) + n_cl
        alpha = alpha.reshape(-1, nv)
        beta = beta.reshape(-1, nv, 3)
        active = active.reshape(-1, nv)
        fam_K = _edge_side_families(state, K, state._edge_R, alpha, beta, active)
        fam_L = _edge_side_families(state, L, state._edge_R, alpha, beta, active)

    W_e = slopes.W_e
    if state.kinetic_interface_state:
        W_e = 0.5 * (state.W[K] + state.W[L])
    Kmat = k_coeff(W_e[:, 0], W_e[:, 1], state.varset)
    c_plus = np.einsum("eij,ej->ei", Kmat, slopes.delta_minus + slopes.delta_plus)
    c_minus = np.einsum("eij,ej->ei", Kmat, slopes.delta_minus - slopes.delta_plus)

    n3 = np.zeros((len(K), 3))
    n3[:, :2] = geom.n
    return fluxcore.interior_flux(
        {"h0p": fam_K["h0p"], "hvp": fam_K["hvp"]},
        {"h0m": fam_L["h0m"], "hvm": fam_L["hvm"]},
        W_e[:, 0],
        W_e[:, 1],
        coeffs,
        c_plus,
        c_minus,
        n3,
        state.grid,
        state.regime,
    )


def _dirichlet_rows(state: TriState, dt: float, bc: TriBC, rows, fam_K_rows):
    """Outward boundary flux on the given Dirichlet edge rows."""
    geom = state.geom
    K = state.mesh.edge_cells[rows, 0]
    n3 = np.zeros((len(rows), 3))
    n3[:, :2] = geom.n[rows]
    x_mid = geom.x_e[rows]
    tags = state.mesh.boundary_tag[rows]
    W_b = np.empty((len(rows), 2))
    f0b = np.empty((len(rows), state.grid.n_v))
    f1b = np.zeros((len(rows), state.grid.n_v, 3))
    for i, (r, tag) in enumerate(zip(rows, tags)):
        side = bc.side_for(int(tag))
        Wb = side.W_b(x_mid[i, 0], x_mid[i, 1]) if callable(side.W_b) else side.W_b
        Wb = np.asarray(Wb, dtype=float).reshape(2)
        W_b[i] = Wb
        f0, f1 = _beam_moments(Wb[None, :], side.u, side.d, state.grid)
        f0b[i] = f0[0]
        f1b[i] = f1[0]
    alpha, beta, active, _ = entropic_batch(
        f0b.reshape(-1), f1b.reshape(-1, 3), threshold=state.f0_threshold
    )
    R_rows = np.repeat(state._edge_R[rows], state.grid.n_v, axis=0)
    fam_b = directed_families(
        f0b.reshape(-1), f1b.reshape(-1, 3), alpha, beta, active, R_rows,
        state.rule, renormalize=state.renormalize,
    )
    shape = (len(rows), state.grid.n_v)
    fam_b = {k: v.reshape(shape + v.shape[1:]) for k, v in fam_b.items()}

    sig_b, _ = collision_frequency(W_b[:, 0], W_b[:, 1], state.regime)
    coeffs = coefficients(dt, state.regime.eta, state.regime.epsilon, sig_b)
    X_K = _xvars(state.W[K], state.varset)
    X_b = _xvars(W_b, state.varset)
    Kmat = k_coeff(W_b[:, 0], W_b[:, 1], state.varset)
    delta_b = geom.h_minus[rows]
    c_b = np.einsum("eij,ej->ei", Kmat, (X_b - X_K) / delta_b[:, None])
    return fluxcore.boundary_outflux(
        fam_b,
        {"h0p": fam_K_rows["h0p"], "hvp": fam_K_rows["hvp"]},
        W_b[:, 0],
        W_b[:, 1],
        coeffs,
        c_b,
        n3,
        state.grid,
        state.regime,
    )


def step_unstructured(state: TriState, dt: float, bc: TriBC) -> TriState:
    """One time step: edge fluxes, macro update, implicit relaxation."""
    mesh = state.mesh
    nv = state.grid.n_v
    interior = mesh.interior
    K = mesh.edge_cells[:, 0]

    slopes = compute_slopes(state)
    chi0, chi1, phi = edge_flux_unstructured(state, dt, slopes)

    dir_rows = np.flatnonzero(
        ~interior
        & np.array([
            bc.side_for(int(t)).kind is BCKind.DIRICHLET for t in mesh.boundary_tag
        ])
    )
    if len(dir_rows):
        # recompute the K-side families for just these rows
        alpha, beta, active, _ = entropic_batch(
            state.U[K[dir_rows], :, 0].reshape(-1),
            state.U[K[dir_rows], :, 1:].reshape(-1, 3),
            threshold=state.f0_threshold,
        )
        R_rows = np.repeat(state._edge_R[dir_rows], nv, axis=0)
        famK = directed_families(
            state.U[K[dir_rows], :, 0].reshape(-1),
            state.U[K[dir_rows], :, 1:].reshape(-1, 3),
            alpha, beta, active, R_rows, state.rule,
            renormalize=state.renormalize,
        )
        shape = (len(dir_rows), nv)
        famK = {k: v.reshape(shape + v.shape[1:]) for k, v in famK.items()}
        c0b, c1b, phib = _dirichlet_rows(state, dt, bc, dir_rows, famK)
        chi0[dir_rows] = c0b
        chi1[dir_rows] = c1b
        phi[dir_rows] = phib

    S = state._scatter
    div_phi = S @ phi
    div0 = S @ chi0
    div1 = (S @ chi1.reshape(len(K), -1)).reshape(mesh.n_cells, nv, 3)

    W_new = state.W - dt * div_phi
    if not np.all(np.isfinite(W_new)):
        bad = int(np.argwhere(~np.isfinite(W_new))[0][0])
        raise StepFailure(f"non-finite macro state at cell {bad}")
    if np.any(W_new <= 0.0):
        bad = int(np.argwhere(W_new <= 0.0)[0][0])
        raise StepFailure(
            f"macro positivity lost at cell {bad}: rho={W_new[bad, 0]:.3e}, "
            f"q={W_new[bad, 1]:.3e}"
        )

    _, nu_new = collision_frequency(W_new[:, 0], W_new[:, 1], state.regime)
    U_new = fluxcore.implicit_source_update(
        state.U, W_new, nu_new, dt, state.grid, div0, div1
    )
    if not np.all(np.isfinite(U_new)):
        bad = int(np.argwhere(~np.isfinite(U_new))[0][0])
        raise StepFailure(f"non-finite moments at cell {bad}")
    f0 = U_new[..., 0]
    if np.any(f0 < -1.0e-12):
        bad = int(np.argwhere(f0 < -1.0e-12)[0][0])
        raise StepFailure(f"moment f0 negative beyond tolerance at cell {bad}")
    f1n = np.linalg.norm(U_new[..., 1:], axis=-1)
    umax = float(np.max(np.where(f0 > state.f0_threshold, f1n / np.maximum(f0, 1e-300), 0.0)))
    state.counters["u_max"] = max(state.counters.get("u_max", 0.0), umax)

    return replace(state, W=W_new, U=U_new, t=state.t + dt)
