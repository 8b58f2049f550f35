import numpy as np
from numpy.polynomial.legendre import leggauss

from ugksm1.angular import (GaussLegendreRule, directed_families, half_moments_directed,
                            rotation_to_axis, rotation_matrices, bessel_i)
from ugksm1.closure import entropic_batch

rng = np.random.default_rng(7)

# --- rotation sanity
for _ in range(200):
    v = rng.normal(size=3)
    n = v / np.linalg.norm(v)
    R = rotation_to_axis(n)
    assert np.allclose(R @ n, [0, 0, 1], atol=1e-14)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-14)
    assert abs(np.linalg.det(R) - 1) < 1e-12
print("rotations ok (incl poles)", rotation_to_axis([0,0,1.0])[0,0], rotation_to_axis([0,0,-1.0])[0,0])

# --- dense oracle in the rotated frame
def oracle(alpha, beta_rot, nmu=400, nphi=800):
    xm, wm = leggauss(nmu)
    mu_p = 0.5 * (xm + 1);  w_p = 0.5 * wm          # [0,1]
    mu_m = -mu_p;           w_m = w_p               # [-1,0]
    phi = (np.arange(nphi) + 0.5) * 2 * np.pi / nphi
    wphi = 2 * np.pi / nphi
    out = {}
    for sgn, mu, w in (("p", mu_p, w_p), ("m", mu_m, w_m)):
        s = np.sqrt(1 - mu**2)
        Ox = s[:, None] * np.cos(phi)[None, :]
        Oy = s[:, None] * np.sin(phi)[None, :]
        Oz = mu[:, None] * np.ones_like(phi)[None, :]
        f = np.exp(alpha + beta_rot[0] * Ox + beta_rot[1] * Oy + beta_rot[2] * Oz)
        W = w[:, None] * wphi
        def I(g):
            return float(np.sum(W * g * f))
        out["h0" + sgn] = I(Oz)
        out["hv" + sgn] = np.array([I(Oz * Ox), I(Oz * Oy), I(Oz * Oz)])
        out["g0" + sgn] = I(Oz * Oz)
        out["gv" + sgn] = np.array([I(Oz**2 * Ox), I(Oz**2 * Oy), I(Oz**3)])
        comps = {}
        for (i, a) in enumerate((Ox, Oy, Oz)):
            for (j, b) in enumerate((Ox, Oy, Oz)):
                comps[(i, j)] = None
        m2 = np.empty((3, 3)); m3 = np.empty((3, 3))
        for i, a in enumerate((Ox, Oy, Oz)):
            for j, b in enumerate((Ox, Oy, Oz)):
                m2[i, j] = I(Oz * a * b)
                m3[i, j] = I(Oz * Oz * a * b)
        out["m2" + sgn] = m2
        out["m3" + sgn] = m3
    return out

rule = GaussLegendreRule.create(10)
worst = {k: 0.0 for k in ("h0", "hv", "g0", "gv", "m2", "m3")}
for trial in range(40):
    f0 = float(rng.uniform(0.1, 10.0))
    u = float(rng.uniform(0, 0.985))
    d = rng.normal(size=3); d /= np.linalg.norm(d)
    f1 = f0 * u * d
    nvec = rng.normal(size=3); nvec /= np.linalg.norm(nvec)
    alpha, beta, active, _ = entropic_batch(np.array([f0]), f1[None, :])
    if np.linalg.norm(beta[0]) > 5.0:   # rule n=10 contract is ||beta|| <= 5
        continue
    R = rotation_to_axis(nvec)
    fam = directed_families(np.array([f0]), f1[None, :], alpha, beta, active, R, rule,
                            order2=True, renormalize=False)
    brot = R @ beta[0]
    orc = oracle(alpha[0], brot)
    Rt = R.T
    ref = {
        "h0p": orc["h0p"], "h0m": orc["h0m"],
        "hvp": Rt @ orc["hvp"], "hvm": Rt @ orc["hvm"],
        "g0p": orc["g0p"], "g0m": orc["g0m"],
        "gvp": Rt @ orc["gvp"], "gvm": Rt @ orc["gvm"],
        "m2p": Rt @ orc["m2p"] @ R, "m2m": Rt @ orc["m2m"] @ R,
        "m3p": Rt @ orc["m3p"] @ R, "m3m": Rt @ orc["m3m"] @ R,
    }
    scale = max(1.0, f0)
    for base in worst:
        for sgn in "pm":
            err = np.max(np.abs(np.asarray(fam[base + sgn][0]) - np.asarray(ref[base + sgn]))) / scale
            worst[base] = max(worst[base], err)
print("worst rel family errors vs dense cubature:", {k: f"{v:.2e}" for k, v in worst.items()})

# isotropic shortcut checks
hm = half_moments_directed(2.0, np.zeros(3), np.array([0.0, 1.0, 0.0]), rule, order=2)
print("iso: s+ =", hm.s_plus, "(expect 0.5 = f0/4), v+ . n =", hm.v_plus @ np.array([0,1,0.]),
      "(expect 1/3 = f0/6)")
print("iso zz tensor m2+ nn:", np.array([0,1,0.]) @ hm.m2_plus @ np.array([0,1,0.]), "(expect f0/8 = 0.25)")

# renormalization path: totals must match closed forms after scaling
from ugksm1.closure import f2_dot_n_batch
f0a = rng.uniform(0.5, 3.0, size=64)
ua = rng.uniform(0, 0.98, size=64)
da = rng.normal(size=(64, 3)); da /= np.linalg.norm(da, axis=1)[:, None]
f1a = f0a[:, None] * ua[:, None] * da
na = rng.normal(size=(64, 3)); na /= np.linalg.norm(na, axis=1)[:, None]
Ra = rotation_matrices(na)
al, be, act, _ = entropic_batch(f0a, f1a)
ctr = {}
fam = directed_families(f0a, f1a, al, be, act, Ra, GaussLegendreRule.create(10),
                        renormalize=True, counters=ctr)
tot0 = np.einsum("ni,ni->n", f1a, na)
totv = f2_dot_n_batch(f0a, f1a, na)
e0 = np.max(np.abs(fam["h0p"] + fam["h0m"] - tot0))
ev = np.max(np.abs(fam["hvp"] + fam["hvm"] - totv))
print("renormalized totals: |sum-exact| h0", f"{e0:.2e}", "hv", f"{ev:.2e}", "fallbacks:", ctr)

print("bessel_i(1, 3.7) =", bessel_i(1, 3.7))
