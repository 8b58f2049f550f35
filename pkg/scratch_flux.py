"""Validation for fluxcore + structured before freezing tests."""
import numpy as np
import mpmath as mp

from ugksm1.fluxcore import coefficients, _psi_contract
from ugksm1.physics import (
    RegimeParams, SpeedGrid, VariableSet, collision_frequency, temperature,
    maxwellian_m0, k_coeff, vars_from_macro, diffusive_flux_matrix,
)
from ugksm1.angular import GaussLegendreRule
from ugksm1 import structured as st

mp.mp.dps = 50


def mp_coeffs(dt, eta, eps, sigma):
    dt, eta, eps, sigma = map(mp.mpf, (dt, eta, eps, sigma))
    nu = sigma / (eps * eta)
    w = -nu * dt
    E = mp.e**w
    P = mp.expm1(w) / w
    A = P / eta
    C = (1 - P) / eta
    k = eps / (sigma * eta)
    B = k * (E - P)
    D = -k * (1 + E - 2 * P)
    return [float(x) for x in (A, B, C, D)]


def check(name, err, tol):
    flag = "OK " if err <= tol else "FAIL"
    print(f"{flag} {name}: {err:.3e} (tol {tol:.0e})")
    return err <= tol


ok = True

# --- coefficients vs 50-digit oracle across magnitudes and the series seam
for dt, eta, eps, sig in [
    (1e-3, 1.0, 1.0, 1.0),
    (1e-3, 1.0, 1e-2, 0.35),
    (1e-5, 1e-8, 1e-8, 3.8),
    (1e-9, 1.0, 1.0, 1.0),       # deep series branch
    (0.49, 1.0, 1.0, 1.0),       # just under the seam
    (0.51, 1.0, 1.0, 1.0),       # just over the seam
    (2.0, 1.0, 1.0, 1.0),
    (1e3, 1.0, 1.0, 1.0),
]:
    got = coefficients(dt, eta, eps, sig)
    ref = mp_coeffs(dt, eta, eps, sig)
    rel = max(
        abs(g - r) / max(abs(r), 1e-300)
        for g, r in zip((got.A, got.B, got.C, got.D), ref)
    )
    ok &= check(f"coeffs dt={dt} eta={eta} eps={eps}", rel, 1e-12)

# --- A + C == 1/eta across w in [-1e3, 0]
dts = np.logspace(-12, 3, 400)
co = coefficients(dts, 1.0, 1.0, 1.0)
ok &= check("A+C == 1/eta sweep", float(np.max(np.abs(co.A + co.C - 1.0))), 1e-13)
co2 = coefficients(dts, 0.37, 0.02, 1.7)
ok &= check("A+C == 1/eta (eta=0.37)", float(np.max(np.abs(co2.A + co2.C - 1 / 0.37))), 1e-13 / 0.37)

# limits
c0 = coefficients(1e-12, 2.0, 1.0, 1.0)
lim0 = (1 / 2.0, -1e-12 / (2 * 4.0), 0.0, 0.0)
err0 = max(abs(c0.A - lim0[0]), abs(c0.B - lim0[1]) / abs(lim0[1]), abs(c0.C), abs(c0.D))
ok &= check("w->0 limits", float(err0), 1e-6)
cinf = coefficients(1e9, 1e-4, 1e-4, 2.0)   # eta = eps
errinf = max(abs(cinf.A), abs(cinf.B), abs(cinf.C - 1e4) / 1e4, abs(cinf.D + 1 / 2.0) / 0.5)
ok &= check("w->-inf limits (D -> -1/sigma at eta=eps)", float(errinf), 1e-6)

# w < -700 overflow clamp
chuge = coefficients(1e6, 1e-3, 1e-3, 1.0)
assert np.isfinite([chuge.A, chuge.B, chuge.C, chuge.D]).all(), "overflow in coefficients"
print("OK  no overflow at w = -1e12")

# --- _psi_contract shapes
v = np.linspace(0.1, 12, 7)
c1 = np.array([2.0, 3.0])
r1 = _psi_contract(c1, v)
assert r1.shape == (7,) and np.allclose(r1, 2 + 1.5 * v * v)
cB = np.random.default_rng(0).normal(size=(4, 5, 2))
rB = _psi_contract(cB, v)
assert rB.shape == (4, 5, 7)
assert np.allclose(rB, cB[..., :1] + 0.5 * cB[..., 1:] * (v * v))
print("OK  _psi_contract shapes")

# --- interface flux: identical isotropic equilibrium on both sides
grid = SpeedGrid(v_max=12.0, n_v=50)
rule = GaussLegendreRule.create(10)
reg = RegimeParams(epsilon=1.0, eta=1.0, c_sigma=1.0)
rho, T = 1.3, 0.8
q = 1.5 * rho * T
W = np.array([rho, q])
U = np.zeros((grid.n_v, 4))
U[:, 0] = maxwellian_m0(rho, T, grid.nodes)
sig, _ = collision_frequency(rho, q, reg)
co = coefficients(2e-3, reg.eta, reg.epsilon, sig)
chi0, chi1 = st.m1_edge_flux(U, U, W, W, co, 0, 0.02, grid, rule, reg)
M0 = U[:, 0]
act = M0 > 1e-8   # ansatz nodes; below the vacuum threshold halves are dropped
ok &= check("equilibrium chi0 == 0", float(np.max(np.abs(chi0[act])) / M0.max()), 1e-13)
expect1 = (co.A + co.C) * (grid.nodes / 3.0) * M0
err1 = max(
    float(np.max(np.abs((chi1[:, 0] - expect1)[act])) / expect1.max()),
    float(np.max(np.abs(chi1[act][:, 1:]) / expect1.max())),
)
ok &= check("equilibrium chi1 == (A+C)(v/3)M0 n (active nodes)", err1, 1e-12)
phi = st.macro_edge_flux(U, U, W, W, co, 0, 0.02, grid, rule, reg)
ok &= check("equilibrium phi == 0", float(np.max(np.abs(phi))), 1e-12)

# same with renormalization on (production path)
chi0r, chi1r = st.m1_edge_flux(U, U, W, W, co, 0, 0.02, grid, rule, reg, renormalize=True)
ok &= check("equilibrium chi0 == 0 (renorm)", float(np.max(np.abs(chi0r)) / M0.max()), 1e-13)

# --- diffusion limit: macro flux matches the closed forms, all varsets
regd = RegimeParams(epsilon=1e-8, eta=1e-8, c_sigma=1.0)
W_K = np.array([1.1, 1.9])
W_L = np.array([1.0, 2.2])
dx = 0.01
def maxw_state(Wv):
    Uv = np.zeros((grid.n_v, 4))
    Uv[:, 0] = maxwellian_m0(Wv[0], temperature(Wv[0], Wv[1]), grid.nodes)
    return Uv
U_K, U_L = maxw_state(W_K), maxw_state(W_L)
W_e = 0.5 * (W_K + W_L)
sig_e, _ = collision_frequency(W_e[0], W_e[1], regd)
cod = coefficients(1e-3, regd.eta, regd.epsilon, sig_e)
closed_rho = -(2.0 / (3.0 * sig_e)) * (W_L[1] - W_K[1]) / dx
yK = W_K[1] ** 2 / W_K[0]
yL = W_L[1] ** 2 / W_L[0]
closed_q = -(10.0 / (9.0 * sig_e)) * (yL - yK) / dx
rho_e, q_e = W_e
T_e = temperature(rho_e, q_e)
Pm = np.array([[3 * rho_e * T_e, 7.5 * rho_e * T_e**2],
               [7.5 * rho_e * T_e**2, 26.25 * rho_e * T_e**3]])
for vs in VariableSet:
    phid = st.macro_edge_flux(U_K, U_L, W_K, W_L, cod, 0, dx, grid, rule, regd,
                              varset=vs, renormalize=True)
    # closed form: phi = (D/6) P(W_e) Ktilde(W_e) (X_L - X_K) * 2/dx
    X_K = np.array(vars_from_macro(*W_K, vs))
    X_L = np.array(vars_from_macro(*W_L, vs))
    Kt = k_coeff(rho_e, q_e, vs)
    own = (-1.0 / sig_e / 6.0) * (Pm @ (Kt @ (X_L - X_K))) * 2 / dx
    rel = float(np.max(np.abs(phid - own)) / np.max(np.abs(own)))
    ok &= check(f"diffusion-limit phi closed form [{vs.name}]", rel, 1e-6)
    if vs is VariableSet.CONSERVATIVE:
        rel2 = abs(phid[0] - closed_rho) / abs(closed_rho)
        ok &= check("diffusion-limit literal rho row", rel2, 1e-6)

# --- boundary detailed balance: imposed state equals interior equilibrium
side = st.BoundarySide.dirichlet(np.tile(W, (3, 1)))
sgrid3 = __import__("ugksm1.mesh", fromlist=["StructuredGrid"]).StructuredGrid(
    nx=4, ny=3, dx=0.02, dy=0.02
)
state3 = st.equilibrium_state(sgrid3, grid, rule, reg, rho, T)
c0b, c1b, phib = st.boundary_flux(state3, 2e-3, side, st.AXIS_X, low_end=True)
ok &= check("Dirichlet detailed balance chi0 (active)",
            float(np.max(np.abs(c0b[:, act])) / M0.max()), 1e-13)
# phi integrates the tiny inactive-tail C-term; compare against an active-only bound
ok &= check("Dirichlet detailed balance phi", float(np.max(np.abs(phib))), 1e-7)
n_out = np.array([-1.0, 0.0, 0.0])
exp_b = (grid.nodes / 3.0 / reg.eta)[None, :, None] * M0[None, :, None] * n_out
ok &= check("Dirichlet detailed balance chi1 (active)",
            float(np.max(np.abs((c1b - exp_b)[:, act, :])) / np.max(np.abs(exp_b))), 1e-12)

# --- step(): exact equilibrium preservation, three regimes
from ugksm1.mesh import StructuredGrid
for eps in (1.0, 1e-2, 1e-8):
    regs = RegimeParams(epsilon=eps, eta=eps if eps < 1 else 1.0, c_sigma=1.0)
    sg = StructuredGrid(nx=6, ny=5, dx=1 / 6, dy=1 / 5)
    s0 = st.equilibrium_state(sg, grid, rule, regs, 1.2, 0.9)
    bc = st.BCSpec.all_neumann()
    dt = st.gradient_stable_dt(s0, st.cfl_dt(s0, 0.3, 0.0))
    s = s0
    for _ in range(20):
        s = st.step(s, dt, bc)
    drift = max(
        float(np.max(np.abs(s.W - s0.W)) / np.max(np.abs(s0.W))),
        float(np.max(np.abs(s.U - s0.U)) / np.max(np.abs(s0.U))),
    )
    ok &= check(f"equilibrium preservation eps={eps}", drift, 1e-12)

# --- conservation under periodic BCs with an anisotropic perturbation
sg = StructuredGrid(nx=16, ny=8, dx=1 / 16, dy=1 / 8)
xc, yc = sg.center_mesh()
T_f = 1.0 + 0.25 * np.sin(2 * np.pi * xc)
s0 = st.equilibrium_state(sg, grid, rule, reg, 1.0, T_f)
s0.U[..., 1] = 0.5 * s0.U[..., 0]   # f1 = 0.5 f0 e_x
# W already consistent: macro moments depend only on f0
bc = st.BCSpec.all_periodic()
dt = st.gradient_stable_dt(s0, st.cfl_dt(s0, 0.3, 0.0))
tot0 = s0.totals()
s = s0
for _ in range(50):
    s = st.step(s, dt, bc)
tot = s.totals()
drift = max(abs(tot[0] - tot0[0]) / abs(tot0[0]), abs(tot[1] - tot0[1]) / abs(tot0[1]))
ok &= check("periodic conservation 50 steps", drift, 1e-12)
print("u_max seen:", s.counters.get("u_max"), "renorm_fallback:", s.counters.get("renorm_fallback", 0))

print("\nALL OK" if ok else "\nFAILURES PRESENT")
