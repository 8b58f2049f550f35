"""Validation for the unstructured solver: slope consistency, mode
reductions, structured-flux reduction, affine-gradient exactness,
equilibrium stationarity, conservation bookkeeping, regime runs, timing."""

import time

import numpy as np

from ugksm1.angular import GaussLegendreRule
from ugksm1.closure import entropic_batch
from ugksm1.mesh import TriMesh, edge_geometry, nodal_ls_weights
from ugksm1.fluxcore import coefficients
from ugksm1.physics import (
    RegimeParams, SpeedGrid, VariableSet, collision_frequency, temperature,
)
from ugksm1.structured import BoundarySide, m1_edge_flux, macro_edge_flux
from ugksm1 import unstructured as uns
from ugksm1.unstructured import (
    GradientMode, TriBC, TriState, cfl_dt_tri, compute_slopes,
    edge_flux_unstructured, edge_slopes_diamond, edge_slopes_modified_diamond,
    edge_slopes_naive, gradient_stable_dt_tri, slope_consistency_error,
    step_unstructured, tri_equilibrium_state,
)

rng = np.random.default_rng(42)
failures = []


def check(name, value, tol):
    ok = value <= tol
    print(f"{'OK ' if ok else 'FAIL'} {name}: {value:.3e} (tol {tol:.1e})")
    if not ok:
        failures.append(name)


def crisscross(nx, ny, lx=1.0, ly=1.0, origin=(0.0, 0.0)):
    """Four triangles per square around a center node; tags 1..4 = W,E,S,N."""
    xs = origin[0] + np.linspace(0.0, lx, nx + 1)
    ys = origin[1] + np.linspace(0.0, ly, ny + 1)
    gx, gy = np.meshgrid(xs, ys)
    grid_nodes = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    cx, cy = np.meshgrid(0.5 * (xs[:-1] + xs[1:]), 0.5 * (ys[:-1] + ys[1:]))
    centers = np.stack([cx.ravel(), cy.ravel()], axis=-1)
    nodes = np.vstack([grid_nodes, centers])
    ng = (nx + 1) * (ny + 1)

    def nid(i, j):
        return j * (nx + 1) + i

    cells = []
    for j in range(ny):
        for i in range(nx):
            c = ng + j * nx + i
            n00, n10 = nid(i, j), nid(i + 1, j)
            n11, n01 = nid(i + 1, j + 1), nid(i, j + 1)
            cells += [[n00, n10, c], [n10, n11, c], [n11, n01, c], [n01, n00, c]]
    tags = {}
    for j in range(ny):
        tags[(nid(0, j), nid(0, j + 1))] = 1
        tags[(nid(nx, j), nid(nx, j + 1))] = 2
    for i in range(nx):
        tags[(nid(i, 0), nid(i + 1, 0))] = 3
        tags[(nid(i, ny), nid(i + 1, ny))] = 4
    return TriMesh(nodes, np.array(cells), edge_tags=tags)


def deform(mesh_builder, amplitude, seed):
    nx, ny, lx, ly = mesh_builder
    base = crisscross(nx, ny, lx, ly)
    r = np.random.default_rng(seed)
    nodes = base.nodes.copy()
    dx, dy = lx / nx, ly / ny
    ng = (nx + 1) * (ny + 1)
    interior_grid = np.ones(ng, dtype=bool)
    xs, ys = nodes[:ng, 0], nodes[:ng, 1]
    eps = 1e-12
    interior_grid &= (xs > eps) & (xs < lx - eps) & (ys > eps) & (ys < ly - eps)
    shift = (r.random((ng, 2)) - 0.5) * amplitude * np.array([dx, dy])
    nodes[:ng][interior_grid] += shift[interior_grid]
    # recompute centers as mean of the (possibly moved) square corners
    for j in range(ny):
        for i in range(nx):
            ids = [j * (nx + 1) + i, j * (nx + 1) + i + 1,
                   (j + 1) * (nx + 1) + i + 1, (j + 1) * (nx + 1) + i]
            nodes[ng + j * nx + i] = nodes[ids].mean(axis=0)
    # rebuild with same connectivity and tags
    tags = {tuple(e): t for e, t in zip(base.edges, base.boundary_tag) if t > 0}
    return TriMesh(nodes, base.cells, edge_tags=tags)


grid = SpeedGrid(n_v=24, v_max=10.0)
rule = GaussLegendreRule.create(8)
reg1 = RegimeParams(epsilon=1.0, eta=1.0)
regd = RegimeParams(epsilon=1.0e-8, eta=1.0)

# ---------------------------------------------------------------- consistency
mesh = deform((7, 6, 1.0, 1.0), amplitude=0.8, seed=3)
geom = edge_geometry(mesh)
nodal = nodal_ls_weights(mesh)
c = mesh.centroids
rho_f = 1.0 + 0.3 * np.sin(2 * np.pi * c[:, 0]) * np.cos(np.pi * c[:, 1])
T_f = 1.0 + 0.5 * c[:, 0] + 0.2 * c[:, 1] ** 2

for varset in VariableSet:
    st = tri_equilibrium_state(mesh, grid, rule, reg1, rho_f, T_f,
                               geom=geom, nodal=nodal, varset=varset)
    for mode in GradientMode:
        st2 = TriState(**{**st.__dict__, "mode": mode})
        sl = compute_slopes(st2)
        check(f"consistency {varset.name}/{mode.name}", slope_consistency_error(sl), 1e-12)

# ------------------------------------------------- mode reduction on crisscross
mesh_r = crisscross(6, 5)
geom_r = edge_geometry(mesh_r)
nodal_r = nodal_ls_weights(mesh_r)
c = mesh_r.centroids
rho_r = 1.2 + 0.4 * np.sin(2 * np.pi * c[:, 0]) * np.cos(2 * np.pi * c[:, 1])
T_r = 0.9 + 0.3 * np.cos(np.pi * c[:, 0] * c[:, 1])
st_d = tri_equilibrium_state(mesh_r, grid, rule, reg1, rho_r, T_r,
                             geom=geom_r, nodal=nodal_r, mode=GradientMode.DIAMOND)
st_md = TriState(**{**st_d.__dict__, "mode": GradientMode.MODIFIED_DIAMOND,
                    "_cell_grad": None})
sl_d = compute_slopes(st_d)
sl_md = compute_slopes(st_md)
sym = mesh_r.interior & (np.abs(geom_r.h_minus - np.where(mesh_r.interior, geom_r.h_plus, 0)) < 1e-13)
print(f"symmetric diamond edges: {sym.sum()}/{mesh_r.interior.sum()} interior")
dmax = max(
    np.max(np.abs(sl_d.delta_minus[sym] - sl_md.delta_minus[sym])),
    np.max(np.abs(sl_d.delta_plus[sym] - sl_md.delta_plus[sym])),
)
check("ModifiedDiamond == Diamond at symmetric diamonds", float(dmax), 1e-11)

# Naive == Diamond on kappa=0 symmetric edges with l == h
k0 = sym & (np.abs(geom_r.kappa) < 1e-13) & (np.abs(geom_r.l - geom_r.h) < 1e-13)
print(f"kappa=0 orthogonal edges: {k0.sum()}")
sl_n = compute_slopes(TriState(**{**st_d.__dict__, "mode": GradientMode.NAIVE}))
nd = max(
    np.max(np.abs(sl_n.delta_minus[k0] - sl_d.delta_minus[k0])),
    np.max(np.abs(sl_n.delta_plus[k0] - sl_d.delta_plus[k0])),
)
check("Naive == Diamond on orthogonal symmetric edges", float(nd), 1e-11)

# --------------------------------------------- structured-flux reduction
# pick a vertical interior kappa=0 edge; compare against m1_edge_flux
idx = np.flatnonzero(k0 & (np.abs(geom_r.n[:, 1]) < 1e-13))
e = int(idx[0])
K_c, L_c = mesh_r.edge_cells[e]
# non-equilibrium states: add anisotropy
U = st_d.U.copy()
f0 = U[:, :, 0]
U[:, :, 1] = 0.35 * f0 * 0.7
U[:, :, 2] = 0.35 * f0 * 0.3
st_a = TriState(**{**st_d.__dict__, "U": U, "mode": GradientMode.NAIVE})
dt = 4e-4
sl_a = compute_slopes(st_a)
chi0, chi1, phi = edge_flux_unstructured(st_a, dt, sl_a)
sgn = 1.0 if geom_r.n[e, 0] > 0 else -1.0
spacing = geom_r.l[e]
Kp, Lp = (K_c, L_c) if sgn > 0 else (L_c, K_c)
sig_all, _ = collision_frequency(st_a.W[:, 0], st_a.W[:, 1], reg1)
cq = coefficients(dt, reg1.eta, reg1.epsilon, 0.5 * (sig_all[K_c] + sig_all[L_c]))
args = (U[Kp], U[Lp], st_a.W[Kp], st_a.W[Lp], cq, 0, spacing, grid, rule, reg1)
c0s, c1s = m1_edge_flux(*args, renormalize=True)
phis = macro_edge_flux(*args, renormalize=True)
rel = np.max(np.abs(sgn * chi0[e] - c0s)) / max(np.max(np.abs(c0s)), 1e-30)
rel1 = np.max(np.abs(sgn * chi1[e] - c1s)) / max(np.max(np.abs(c1s)), 1e-30)
relp = np.max(np.abs(sgn * phi[e] - phis)) / max(np.max(np.abs(phis)), 1e-30)
check("structured reduction chi0", float(rel), 1e-12)
check("structured reduction chi1", float(rel1), 1e-12)
check("structured reduction phi", float(relp), 1e-12)

# --------------------------------------------- affine-field gradient exactness
mesh_a = deform((9, 8, 1.0, 1.0), amplitude=0.7, seed=11)
geom_a = edge_geometry(mesh_a)
nodal_a = nodal_ls_weights(mesh_a)
ca = mesh_a.centroids
G_rho = np.array([0.35, -0.2])
G_q = np.array([-0.15, 0.45])
rho_aff = 2.0 + ca @ G_rho
q_aff = 3.0 + ca @ G_q
T_aff = temperature(rho_aff, q_aff)
st_aff = tri_equilibrium_state(mesh_a, grid, rule, reg1, rho_aff, T_aff,
                               geom=geom_a, nodal=nodal_a)
fb = set(nodal_a.fallback_nodes.tolist())
cell_has_fb = np.array([any(int(n) in fb for n in tri) for tri in mesh_a.cells])
KK = mesh_a.edge_cells[:, 0]
LL = np.where(mesh_a.interior, mesh_a.edge_cells[:, 1], KK)
touches_fb = np.array([
    (int(a) in fb) or (int(b) in fb)
    for a, b in zip(geom_a.end_minus, geom_a.end_plus)
]) | cell_has_fb[KK] | cell_has_fb[LL]
inn = mesh_a.interior & ~touches_fb
for mode in (GradientMode.DIAMOND, GradientMode.MODIFIED_DIAMOND):
    stm = TriState(**{**st_aff.__dict__, "mode": mode, "_cell_grad": None})
    sl = compute_slopes(stm)
    exact = np.stack([geom_a.n @ G_rho, geom_a.n @ G_q], axis=-1)
    err = np.max(np.abs(0.5 * (sl.delta_minus + sl.delta_plus) - exact)[inn])
    check(f"affine normal gradient exact ({mode.name})", float(err), 1e-11)
stn = TriState(**{**st_aff.__dict__, "mode": GradientMode.NAIVE})
sln = compute_slopes(stn)
exact = np.stack([geom_a.n @ G_rho, geom_a.n @ G_q], axis=-1)
naive_err = np.max(np.abs(0.5 * (sln.delta_minus + sln.delta_plus) - exact)[inn])
print(f"    naive gradient error on deformed mesh (expected O(1)): {naive_err:.3e}")

# --------------------------------------------- equilibrium stationarity
for eps in (1.0, 1e-2, 1e-8):
    regx = RegimeParams(epsilon=eps, eta=1.0)
    st0 = tri_equilibrium_state(mesh_a, grid, rule, regx, 1.0, 1.0,
                                geom=geom_a, nodal=nodal_a)
    dt0 = min(cfl_dt_tri(st0), gradient_stable_dt_tri(st0, cfl_dt_tri(st0)))
    s = st0
    bc = TriBC.all_neumann()
    for _ in range(20):
        s = step_unstructured(s, dt0, bc)
    relW = np.max(np.abs(s.W - st0.W) / np.abs(st0.W))
    relU = np.max(np.abs(s.U[..., 0] - st0.U[..., 0]) / np.max(st0.U[..., 0]))
    check(f"equilibrium W stationary eps={eps:g}", float(relW), 1e-13)
    check(f"equilibrium f0 stationary eps={eps:g}", float(relU), 1e-13)

# --------------------------------------------- conservation bookkeeping
st_c = tri_equilibrium_state(mesh_r, grid, rule, reg1, rho_r, T_r,
                             geom=geom_r, nodal=nodal_r)
Uc = st_c.U.copy()
Uc[:, :, 1] = 0.3 * Uc[:, :, 0]
st_c = TriState(**{**st_c.__dict__, "U": Uc})
bc = TriBC.all_neumann()
dtc = 0.5 * min(cfl_dt_tri(st_c), gradient_stable_dt_tri(st_c, cfl_dt_tri(st_c)))
s = st_c
bflux = np.zeros(2)
bedges = np.flatnonzero(~mesh_r.interior)
for _ in range(10):
    sl = compute_slopes(s)
    _, _, phi = edge_flux_unstructured(s, dtc, sl)
    bflux += dtc * np.sum(phi[bedges] * geom_r.length[bedges, None], axis=0)
    s = step_unstructured(s, dtc, bc)
tot0 = np.array(st_c.totals())
tot1 = np.array(s.totals())
drift = np.max(np.abs(tot1 - tot0 + bflux) / np.abs(tot0))
check("conservation (interior antisymmetry) with boundary bookkeeping", float(drift), 1e-13)

# --------------------------------------------- regime runs on deformed mesh
x0 = mesh_a.centroids[:, 0]
T_step = 1.0 + 1.0 / (1.0 + np.exp(-(x0 - 0.5) / 0.05))
for eps, nsteps in ((1.0, 30), (1e-8, 30)):
    regx = RegimeParams(epsilon=eps, eta=1.0)
    st0 = tri_equilibrium_state(mesh_a, grid, rule, regx, 1.0, T_step,
                                geom=geom_a, nodal=nodal_a)
    dtg = cfl_dt_tri(st0)
    s = st0
    t0 = time.perf_counter()
    for _ in range(nsteps):
        dt_s = min(dtg, gradient_stable_dt_tri(s, dtg))
        s = step_unstructured(s, dt_s, bc)
    el = time.perf_counter() - t0
    ok = np.all(np.isfinite(s.W)) and np.all(s.W[:, 0] > 0)
    print(f"{'OK ' if ok else 'FAIL'} step run eps={eps:g}: {nsteps} steps, "
          f"{1e3 * el / nsteps:.1f} ms/step, u_max={s.counters.get('u_max', 0):.3f}, t={s.t:.4g}")
    if not ok:
        failures.append(f"run eps={eps}")

# --------------------------------------------- Dirichlet boundary smoke test
st_dir = tri_equilibrium_state(mesh_r, grid, rule, reg1, 1.0, 1.0,
                               geom=geom_r, nodal=nodal_r)
hot = BoundarySide.dirichlet(lambda x, y: (np.full_like(np.asarray(x, float), 1.0),
                                           np.full_like(np.asarray(x, float), 3.0)))
bc_dir = TriBC(default=BoundarySide.neumann(), by_tag={1: hot})
s = st_dir
dtd = 0.5 * cfl_dt_tri(st_dir)
for _ in range(20):
    s = step_unstructured(s, dtd, bc_dir)
west = np.abs(mesh_r.centroids[:, 0]) < 0.2
ok = s.W[west, 1].mean() > st_dir.W[west, 1].mean() + 1e-4 and np.all(np.isfinite(s.W))
print(f"{'OK ' if ok else 'FAIL'} Dirichlet hot wall heats west cells "
      f"(q {st_dir.W[west, 1].mean():.4f} -> {s.W[west, 1].mean():.4f})")
if not ok:
    failures.append("dirichlet wall")

# --------------------------------------------- timing on a 4k mesh (criterion scale)
mesh_4k = crisscross(32, 32)
st4 = tri_equilibrium_state(mesh_4k, grid, rule, regd, 1.0, 1.0)
dt4 = cfl_dt_tri(st4)
s = st4
t0 = time.perf_counter()
for _ in range(5):
    s = step_unstructured(s, dt4, bc)
el = (time.perf_counter() - t0) / 5
print(f"timing 4096-cell equilibrium step: {1e3 * el:.0f} ms/step")
m = np.max(np.abs(s.W - st4.W))
check("4k equilibrium 5 steps drift", float(m), 1e-13)

print("\nALL OK" if not failures else f"\nFAILURES: {failures}")
