"""Comparison solvers: an HLL finite-volume scheme for the moment system and
an explicit reference solver for its diffusion limit.

Both share the main solver's meshes, speed grid, and implicit relaxation so
that differences between runs isolate the flux discretization.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import fluxcore
from .closure import F0_THRESHOLD, f2_dot_n_batch
from .errors import ConfigError, StepFailure
from .mesh import EdgeGeom, NodalLSWeights, StructuredGrid, TriMesh
from .physics import (
    RegimeParams,
    SpeedGrid,
    collision_frequency,
    temperature,
)
from .structured import (
    AXIS_X,
    AXIS_Y,
    BCKind,
    BCSpec,
    BoundarySide,
    SolverState,
    _beam_moments,
    _pad,
)

_N_AXIS3 = (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
_GRAD_EIG = 5.0 + np.sqrt(10.0)


def _m1_flux(U: np.ndarray, v: np.ndarray, eta: float, axis: int) -> np.ndarray:
    """Physical flux (v/eta)(f1.n, f2(U).n) along a coordinate axis.

    U: (..., nv, 4); returns the same shape.
    """
    n = _N_AXIS3[axis]
    lead = U.shape[:-1]
    f0 = U[..., 0].reshape(-1)
    f1 = U[..., 1:].reshape(-1, 3)
    f2n = f2_dot_n_batch(f0, f1, n).reshape(lead + (3,))
    out = np.empty_like(U)
    speed = v / eta
    out[..., 0] = speed * U[..., 1 + axis]
    out[..., 1:] = speed[..., None] * f2n
    return out


def hll_edge_flux(U_K, U_L, v, eta: float, axis: int) -> np.ndarray:
    """Two-wave flux with speeds fixed at +-v/eta.

    F = (F(U_K) + F(U_L))/2 - (v / 2 eta) (U_L - U_K), applied per speed
    node; the characteristic speeds of the moment system are bounded by the
    particle speed, so this choice is always stable if diffusive.
    """
    U_K = np.asarray(U_K, dtype=float)
    U_L = np.asarray(U_L, dtype=float)
    v = np.asarray(v, dtype=float)
    central = 0.5 * (_m1_flux(U_K, v, eta, axis) + _m1_flux(U_L, v, eta, axis))
    return central - (v / (2.0 * eta))[..., None] * (U_L - U_K)


def hll_cfl_dt(state: SolverState, cfl_number: float = 0.5) -> float:
    """Hyperbolic step bound min(dx, dy) * eta / v_max."""
    if not 0.0 < cfl_number <= 1.0:
        raise ConfigError("cfl_number must lie in (0, 1]")
    sg = state.sgrid
    return cfl_number * min(sg.dx, sg.dy) * state.regime.eta / state.grid.v_max


def _hll_axis_divergence(state: SolverState, bc_pair, axis: int):
    """Flux divergence of the HLL scheme along one axis (macro and kinetic)."""
    U = state.U
    if axis == AXIS_Y:
        U = U.swapaxes(0, 1)
        spacing = state.sgrid.dy
    else:
        spacing = state.sgrid.dx
    lo, hi = bc_pair
    A, B = U.shape[0], U.shape[1]
    nv = state.grid.n_v

    Up = _pad(U, 1, lo, hi)
    if lo.kind is BCKind.DIRICHLET or hi.kind is BCKind.DIRICHLET:
        Up = Up.copy()
        for side, sl in ((lo, np.s_[:, 0]), (hi, np.s_[:, -1])):
            if side.kind is not BCKind.DIRICHLET:
                continue
            W_b = side.W_b
            if callable(W_b):
                raise ConfigError("callable Dirichlet profiles are not supported by the HLL baseline")
            f0, f1 = _beam_moments(W_b, side.u, side.d, state.grid)
            ghost = np.zeros((A, nv, 4))
            ghost[..., 0] = f0
            ghost[..., 1:] = f1
            Up[sl] = ghost

    v = state.grid.nodes
    F = hll_edge_flux(Up[:, :-1], Up[:, 1:], v, state.regime.eta, axis)
    divU = (F[:, 1:] - F[:, :-1]) / spacing
    phi0 = F[..., 0]
    div_phi = np.stack(
        [
            (state.grid.moment(phi0[:, 1:], power=2) - state.grid.moment(phi0[:, :-1], power=2)),
            0.5 * (state.grid.moment(phi0[:, 1:], power=4) - state.grid.moment(phi0[:, :-1], power=4)),
        ],
        axis=-1,
    ) / spacing
    if axis == AXIS_Y:
        return div_phi.swapaxes(0, 1), divU.swapaxes(0, 1)
    return div_phi, divU


def step_hll(state: SolverState, dt: float, bc: BCSpec) -> SolverState:
    """One HLL step with the same implicit relaxation as the main scheme."""
    if dt <= 0.0:
        raise ConfigError("dt must be positive")
    ny, nx = state.W.shape[:2]
    div_phi = np.zeros_like(state.W)
    divU = np.zeros_like(state.U)
    for axis in (AXIS_X, AXIS_Y):
        extent = nx if axis == AXIS_X else ny
        pair = bc.pair(axis)
        if extent == 1 and pair[0].kind is pair[1].kind and pair[0].kind is not BCKind.DIRICHLET:
            continue
        dphi, dU = _hll_axis_divergence(state, pair, axis)
        div_phi += dphi
        divU += dU

    W_new = state.W - dt * div_phi
    if not np.all(np.isfinite(W_new)) or np.any(W_new <= 0.0):
        iy, ix = np.argwhere(~(np.isfinite(W_new).all(axis=-1) & (W_new > 0).all(axis=-1)))[0]
        raise StepFailure(
            f"macro positivity lost at cell (iy={iy}, ix={ix}): "
            f"rho={W_new[iy, ix, 0]:.3e}, q={W_new[iy, ix, 1]:.3e}"
        )
    _, nu_new = collision_frequency(W_new[..., 0], W_new[..., 1], state.regime)
    U_new = fluxcore.implicit_source_update(
        state.U, W_new, nu_new, dt, state.grid, divU[..., 0], divU[..., 1:]
    )
    f0 = U_new[..., 0]
    f1n = np.linalg.norm(U_new[..., 1:], axis=-1)
    over = (f1n > f0) & (f0 > state.f0_threshold)
    if np.any(over):
        state.counters["stored_u_over_one"] = (
            state.counters.get("stored_u_over_one", 0) + int(np.count_nonzero(over))
        )
    umax = float(np.max(np.where(f0 > state.f0_threshold, f1n / np.maximum(f0, 1e-300), 0.0)))
    state.counters["u_max"] = max(state.counters.get("u_max", 0.0), umax)
    return replace(state, W=W_new, U=U_new, t=state.t + dt)


# --------------------------------------------------------------------------
# diffusion-limit reference solver
# --------------------------------------------------------------------------


def _diffusion_fluxes(W_K, W_L, grad_q, grad_y, regime):
    """Normal fluxes -(2/(3 sigma)) dq/dn and -(10/(9 sigma)) d(q^2/rho)/dn
    with sigma evaluated at the interface mean state."""
    W_e = 0.5 * (W_K + W_L)
    sigma, _ = collision_frequency(W_e[..., 0], W_e[..., 1], regime)
    return np.stack(
        [-(2.0 / (3.0 * sigma)) * grad_q, -(10.0 / (9.0 * sigma)) * grad_y], axis=-1
    )


@dataclass
class DiffusionState:
    """Cell-centered (rho, q) for the limit diffusion system.

    Exactly one of sgrid (structured) or mesh+geom(+nodal) must be given.
    """

    W: np.ndarray
    regime: RegimeParams
    sgrid: StructuredGrid | None = None
    mesh: TriMesh | None = None
    geom: EdgeGeom | None = None
    nodal: NodalLSWeights | None = None
    t: float = 0.0
    counters: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.sgrid is None) == (self.mesh is None):
            raise ConfigError("give either a structured grid or a triangle mesh")
        if self.sgrid is not None and self.W.shape != (self.sgrid.ny, self.sgrid.nx, 2):
            raise ConfigError("W must have shape (ny, nx, 2)")
        if self.mesh is not None and self.W.shape != (self.mesh.n_cells, 2):
            raise ConfigError("W must have shape (n_cells, 2)")
        if np.any(self.W <= 0.0):
            raise ConfigError("diffusion state requires positive rho and q")

    @property
    def temperature(self) -> np.ndarray:
        return temperature(self.W[..., 0], self.W[..., 1])


def diffusion_stable_dt(state: DiffusionState, safety: float = 0.9) -> float:
    """Step bound from the frozen-coefficient eigenvalues (5 +- sqrt(10)) T
    of the diffusion system divided by 3 sigma."""
    rho, q = state.W[..., 0], state.W[..., 1]
    sigma, _ = collision_frequency(rho, q, state.regime)
    lam = _GRAD_EIG * temperature(rho, q) / (3.0 * sigma)
    if state.sgrid is not None:
        sg = state.sgrid
        geom_sum = 1.0 / sg.dx**2 + (1.0 / sg.dy**2 if sg.ny > 1 else 0.0)
        return safety / (2.0 * float(np.max(lam)) * geom_sum)
    mesh, geom = state.mesh, state.geom
    K = mesh.edge_cells[:, 0]
    L = np.where(mesh.interior, mesh.edge_cells[:, 1], K)
    lam_e = 0.5 * (lam[K] + lam[L])
    h_e = np.where(mesh.interior, geom.h, np.inf)
    contrib = geom.length / h_e * lam_e
    coef = np.zeros(mesh.n_cells)
    np.add.at(coef, K, contrib / mesh.areas[K])
    np.add.at(coef, L, np.where(mesh.interior, contrib / mesh.areas[L], 0.0))
    # Gershgorin: the update matrix row sums are bounded by 2 dt max(coef),
    # so explicit Euler needs dt <= 1 / max(coef).
    return safety / float(np.max(coef))


def diffusion_documented_dt(state: DiffusionState, delta: float | None = None) -> float:
    """The documented explicit step rule 0.4 (3 sigma_min / 2) Delta^2 (3/10)."""
    rho, q = state.W[..., 0], state.W[..., 1]
    sigma, _ = collision_frequency(rho, q, state.regime)
    if delta is None:
        if state.sgrid is not None:
            delta = min(state.sgrid.dx, state.sgrid.dy if state.sgrid.ny > 1 else np.inf)
        else:
            delta = float(np.min(state.mesh.incircle_diameters()))
    return 0.4 * (3.0 * float(np.min(sigma)) / 2.0) * delta * delta * (3.0 / 10.0)


def _structured_diffusion_divergence(state: DiffusionState, bc: BCSpec):
    W = state.W
    sg = state.sgrid
    div = np.zeros_like(W)
    for axis in (AXIS_X, AXIS_Y):
        extent = sg.nx if axis == AXIS_X else sg.ny
        lo, hi = bc.pair(axis)
        if extent == 1 and lo.kind is hi.kind:
            continue
        Wa = W.swapaxes(0, 1) if axis == AXIS_Y else W
        spacing = sg.dy if axis == AXIS_Y else sg.dx
        Wp = _pad(Wa, 1, lo, hi)
        if lo.kind is BCKind.DIRICHLET:
            Wp = Wp.copy()
            Wp[:, 0] = 2.0 * np.asarray(lo.W_b) - Wa[:, 0]  # face value held at W_b
        if hi.kind is BCKind.DIRICHLET:
            Wp = Wp.copy() if lo.kind is not BCKind.DIRICHLET else Wp
            Wp[:, -1] = 2.0 * np.asarray(hi.W_b) - Wa[:, -1]
        q = Wp[..., 1]
        y = Wp[..., 1] ** 2 / Wp[..., 0]
        gq = (q[:, 1:] - q[:, :-1]) / spacing
        gy = (y[:, 1:] - y[:, :-1]) / spacing
        F = _diffusion_fluxes(Wp[:, :-1], Wp[:, 1:], gq, gy, state.regime)
        d = (F[:, 1:] - F[:, :-1]) / spacing
        div += d.swapaxes(0, 1) if axis == AXIS_Y else d
    return div


def _tri_diffusion_divergence(state: DiffusionState):
    """Diamond-gradient divergence on triangles; boundary edges are closed
    (zero normal flux), matching the Neumann setups the reference serves."""
    mesh, geom, nodal = state.mesh, state.geom, state.nodal
    W = state.W
    interior = mesh.interior
    K = mesh.edge_cells[:, 0]
    L = np.where(interior, mesh.edge_cells[:, 1], K)
    q = W[:, 1]
    y = W[:, 1] ** 2 / W[:, 0]
    fields = np.stack([q, y], axis=-1)
    nod = nodal(fields)
    dn = (fields[L] - fields[K]) / np.where(interior, geom.h, 1.0)[:, None]
    tang = (geom.kappa / geom.length)[:, None] * (nod[geom.end_plus] - nod[geom.end_minus])
    grad = np.where(interior[:, None], dn - tang, 0.0)
    F = _diffusion_fluxes(W[K], W[L], grad[:, 0], grad[:, 1], state.regime)
    F[~interior] = 0.0
    div = np.zeros_like(W)
    wK = geom.length / mesh.areas[K]
    np.add.at(div, K, wK[:, None] * F)
    wL = np.where(interior, geom.length / mesh.areas[L], 0.0)
    np.add.at(div, L, -wL[:, None] * F)
    return div


def diffusion_reference_step(state: DiffusionState, dt: float, bc: BCSpec | None = None):
    """Explicit Euler step of the limit diffusion system."""
    if dt <= 0.0:
        raise ConfigError("dt must be positive")
    if state.sgrid is not None:
        if bc is None:
            raise ConfigError("structured diffusion step needs boundary conditions")
        div = _structured_diffusion_divergence(state, bc)
    else:
        div = _tri_diffusion_divergence(state)
    W_new = state.W - dt * div
    if not np.all(np.isfinite(W_new)) or np.any(W_new <= 0.0):
        bad = np.argwhere(~(np.isfinite(W_new).all(axis=-1) & (W_new > 0).all(axis=-1)))[0]
        raise StepFailure(f"diffusion reference lost positivity at cell {tuple(bad)}")
    return replace(state, W=W_new, t=state.t + dt)
