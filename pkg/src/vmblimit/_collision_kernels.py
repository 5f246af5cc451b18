"""Hot loops of the collision quadrature, in numba and in vectorized numpy.

Both paths walk the same event set. An event is a representative node pair (v, u)
with v in the fundamental domain of the lattice symmetry group, plus one node ω of
the hemisphere rule rotated onto v - u. Post-collision values are read through an
11-point stencil that reproduces every quadratic polynomial exactly.
"""

from __future__ import annotations

import math

import numpy as np

from ._accel import USE_NUMBA, njit, prange

STENCIL = 11
CHUNK = 20000


# ---------------------------------------------------------------- numba path


@njit(cache=True)
def _stencil_nb(p0, p1, p2, x0, dv, n, idx, w):
    """Fill idx/w with the quadratic-exact stencil of point p; False if p leaves the hull."""
    kk0 = 0
    kk1 = 0
    kk2 = 0
    th0 = 0.0
    th1 = 0.0
    th2 = 0.0
    for i in range(3):
        if i == 0:
            p = p0
        elif i == 1:
            p = p1
        else:
            p = p2
        t = (p - x0) / dv
        if t < 0.0 or t > n - 1:
            return False
        k = int(math.floor(t))
        if k > n - 2:
            k = n - 2
        th = t - k
        if i == 0:
            kk0 = k
            th0 = th
        elif i == 1:
            kk1 = k
            th1 = th
        else:
            kk2 = k
            th2 = th
    for bits in range(8):
        b0 = bits & 1
        b1 = (bits >> 1) & 1
        b2 = (bits >> 2) & 1
        f0 = th0 if b0 else 1.0 - th0
        f1 = th1 if b1 else 1.0 - th1
        f2 = th2 if b2 else 1.0 - th2
        idx[bits] = ((kk0 + b0) * n + (kk1 + b1)) * n + (kk2 + b2)
        w[bits] = f0 * f1 * f2
    base = (kk0 * n + kk1) * n + kk2
    for i in range(3):
        if i == 0:
            th = th0
            k = kk0
            step = n * n
        elif i == 1:
            th = th1
            k = kk1
            step = n
        else:
            th = th2
            k = kk2
            step = 1
        c = -0.5 * th * (1.0 - th)
        bit = 1 << i
        if k >= 1:
            idx[8 + i] = base - step
            w[8 + i] = c
            w[0] += -2.0 * c
            w[bit] += c
        else:
            idx[8 + i] = base + 2 * step
            w[8 + i] = c
            w[0] += c
            w[bit] += -2.0 * c
    return True


@njit(cache=True)
def _frame_nb(z0, z1, z2):
    zn = math.sqrt(z0 * z0 + z1 * z1 + z2 * z2)
    a0 = z0 / zn
    a1 = z1 / zn
    a2 = z2 / zn
    h = 0
    m = abs(a0)
    if abs(a1) < m:
        h = 1
        m = abs(a1)
    if abs(a2) < m:
        h = 2
    ah = a0 if h == 0 else (a1 if h == 1 else a2)
    e0 = -ah * a0
    e1 = -ah * a1
    e2 = -ah * a2
    if h == 0:
        e0 += 1.0
    elif h == 1:
        e1 += 1.0
    else:
        e2 += 1.0
    en = math.sqrt(e0 * e0 + e1 * e1 + e2 * e2)
    e0 /= en
    e1 /= en
    e2 /= en
    f0 = a1 * e2 - a2 * e1
    f1 = a2 * e0 - a0 * e2
    f2 = a0 * e1 - a1 * e0
    return zn, a0, a1, a2, e0, e1, e2, f0, f1, f2


@njit(cache=True)
def assemble_nb(rep_v, rep_u, rep_w, nodes, mu, x0, dv, n, gamma, cth, cphi, sphi, wq, As, Ad):
    """Accumulate the representative blocks of the sum and difference operators.

    For every event with weight c: As += c/2 (a+b)(a+b)ᵀ and Ad += c/2 (aaᵀ + bbᵀ),
    where a = S(v') - e_v and b = S(u') - e_u.
    """
    ia = np.empty(STENCIL, np.int64)
    wa = np.empty(STENCIL, np.float64)
    ib = np.empty(STENCIL, np.int64)
    wb = np.empty(STENCIL, np.float64)
    ja = np.empty(STENCIL + 1, np.int64)
    xa = np.empty(STENCIL + 1, np.float64)
    js = np.empty(2 * STENCIL + 2, np.int64)
    xs = np.empty(2 * STENCIL + 2, np.float64)
    nc = cth.shape[0]
    nphi = cphi.shape[0]
    dv6 = dv**6
    for r in range(rep_v.shape[0]):
        iv = rep_v[r]
        iu = rep_u[r]
        v0 = nodes[iv, 0]
        v1 = nodes[iv, 1]
        v2 = nodes[iv, 2]
        u0 = nodes[iu, 0]
        u1 = nodes[iu, 1]
        u2 = nodes[iu, 2]
        zn, a0, a1, a2, e0, e1, e2, f0, f1, f2 = _frame_nb(v0 - u0, v1 - u1, v2 - u2)
        kin = dv6 * zn**gamma * mu[iv] * mu[iu] * rep_w[r]
        for k in range(nc):
            c = cth[k]
            s = math.sqrt(1.0 - c * c)
            zw = zn * c
            for j in range(nphi):
                o0 = c * a0 + s * (cphi[j] * e0 + sphi[j] * f0)
                o1 = c * a1 + s * (cphi[j] * e1 + sphi[j] * f1)
                o2 = c * a2 + s * (cphi[j] * e2 + sphi[j] * f2)
                if not _stencil_nb(v0 - zw * o0, v1 - zw * o1, v2 - zw * o2, x0, dv, n, ia, wa):
                    continue
                if not _stencil_nb(u0 + zw * o0, u1 + zw * o1, u2 + zw * o2, x0, dv, n, ib, wb):
                    continue
                half = 0.5 * kin * wq[k, j]
                for m in range(STENCIL):
                    js[m] = ia[m]
                    xs[m] = wa[m]
                    js[STENCIL + m] = ib[m]
                    xs[STENCIL + m] = wb[m]
                js[2 * STENCIL] = iv
                xs[2 * STENCIL] = -1.0
                js[2 * STENCIL + 1] = iu
                xs[2 * STENCIL + 1] = -1.0
                tot = 2 * STENCIL + 2
                for p in range(tot):
                    hp = half * xs[p]
                    row = js[p]
                    for q in range(tot):
                        As[row, js[q]] += hp * xs[q]
                for side in range(2):
                    for m in range(STENCIL):
                        ja[m] = ia[m] if side == 0 else ib[m]
                        xa[m] = wa[m] if side == 0 else wb[m]
                    ja[STENCIL] = iv if side == 0 else iu
                    xa[STENCIL] = -1.0
                    for p in range(STENCIL + 1):
                        hp = half * xa[p]
                        row = ja[p]
                        for q in range(STENCIL + 1):
                            Ad[row, ja[q]] += hp * xa[q]


@njit(cache=True, parallel=True)
def collide_nb(rep_v, rep_u, rep_w, nodes, mu, x0, dv, n, gamma, cth, cphi, sphi, wq, gmap, hF, hG, out):
    """Weak-form collision sum over all group images of the representative events.

    out[b, :] accumulates Δv³·Q(F_b, G_b) with F = μ hF, G = μ hG. Batch rows run
    in parallel; each owns its output row.
    """
    nb = hF.shape[0]
    for bb in prange(nb):
        _collide_row(rep_v, rep_u, rep_w, nodes, mu, x0, dv, n, gamma, cth, cphi, sphi, wq, gmap,
                     hF[bb], hG[bb], out[bb])


@njit(cache=True)
def _collide_row(rep_v, rep_u, rep_w, nodes, mu, x0, dv, n, gamma, cth, cphi, sphi, wq, gmap, hf, hg, out):
    ia = np.empty(STENCIL, np.int64)
    wa = np.empty(STENCIL, np.float64)
    ib = np.empty(STENCIL, np.int64)
    wb = np.empty(STENCIL, np.float64)
    nc = cth.shape[0]
    nphi = cphi.shape[0]
    ng = gmap.shape[0]
    dv6 = dv**6
    for r in range(rep_v.shape[0]):
        iv = rep_v[r]
        iu = rep_u[r]
        v0 = nodes[iv, 0]
        v1 = nodes[iv, 1]
        v2 = nodes[iv, 2]
        u0 = nodes[iu, 0]
        u1 = nodes[iu, 1]
        u2 = nodes[iu, 2]
        zn, a0, a1, a2, e0, e1, e2, f0, f1, f2 = _frame_nb(v0 - u0, v1 - u1, v2 - u2)
        kin = dv6 * zn**gamma * mu[iv] * mu[iu] * rep_w[r]
        for k in range(nc):
            c = cth[k]
            s = math.sqrt(1.0 - c * c)
            zw = zn * c
            for j in range(nphi):
                o0 = c * a0 + s * (cphi[j] * e0 + sphi[j] * f0)
                o1 = c * a1 + s * (cphi[j] * e1 + sphi[j] * f1)
                o2 = c * a2 + s * (cphi[j] * e2 + sphi[j] * f2)
                if not _stencil_nb(v0 - zw * o0, v1 - zw * o1, v2 - zw * o2, x0, dv, n, ia, wa):
                    continue
                if not _stencil_nb(u0 + zw * o0, u1 + zw * o1, u2 + zw * o2, x0, dv, n, ib, wb):
                    continue
                coef = -0.25 * kin * wq[k, j]
                for g in range(ng):
                    gv = gmap[g, iv]
                    gu = gmap[g, iu]
                    fa = 0.0
                    ga_ = 0.0
                    fb = 0.0
                    gb_ = 0.0
                    for m in range(STENCIL):
                        pa = gmap[g, ia[m]]
                        pb = gmap[g, ib[m]]
                        fa += wa[m] * hf[pa]
                        ga_ += wa[m] * hg[pa]
                        fb += wb[m] * hf[pb]
                        gb_ += wb[m] * hg[pb]
                    d1 = coef * (fa * gb_ - hf[gv] * hg[gu])
                    d2 = coef * (fb * ga_ - hf[gu] * hg[gv])
                    for m in range(STENCIL):
                        out[gmap[g, ia[m]]] += d1 * wa[m]
                        out[gmap[g, ib[m]]] += d2 * wb[m]
                    out[gv] -= d1
                    out[gu] -= d2


# ---------------------------------------------------------------- numpy path


def stencil_np(p: np.ndarray, x0: float, dv: float, n: int):
    """Vectorized stencil for points p (M, 3); returns (ok, idx (M, 11), w (M, 11))."""
    t = (p - x0) / dv
    ok = np.all((t >= 0.0) & (t <= n - 1), axis=1)
    k = np.minimum(np.floor(t).astype(np.int64), n - 2)
    k = np.maximum(k, 0)
    th = t - k
    M = p.shape[0]
    idx = np.empty((M, STENCIL), np.int64)
    w = np.empty((M, STENCIL))
    for bits in range(8):
        b = np.array([(bits >> i) & 1 for i in range(3)])
        f = np.where(b[None, :] == 1, th, 1.0 - th)
        idx[:, bits] = ((k[:, 0] + b[0]) * n + (k[:, 1] + b[1])) * n + (k[:, 2] + b[2])
        w[:, bits] = f[:, 0] * f[:, 1] * f[:, 2]
    base = (k[:, 0] * n + k[:, 1]) * n + k[:, 2]
    steps = (n * n, n, 1)
    for i in range(3):
        c = -0.5 * th[:, i] * (1.0 - th[:, i])
        bit = 1 << i
        low = k[:, i] >= 1
        idx[:, 8 + i] = np.where(low, base - steps[i], base + 2 * steps[i])
        w[:, 8 + i] = c
        w[:, 0] += np.where(low, -2.0 * c, c)
        w[:, bit] += np.where(low, c, -2.0 * c)
    return ok, idx, w


def _frames_np(z: np.ndarray):
    zn = np.linalg.norm(z, axis=1)
    a = z / zn[:, None]
    h = np.argmin(np.abs(a), axis=1)
    eh = np.zeros_like(a)
    eh[np.arange(len(h)), h] = 1.0
    e = eh - a[np.arange(len(h)), h][:, None] * a
    e /= np.linalg.norm(e, axis=1)[:, None]
    f = np.cross(a, e)
    return zn, a, e, f


def events_np(rep_v, rep_u, rep_w, nodes, mu, x0, dv, n, gamma, cth, cphi, sphi, wq):
    """Expand representative pairs into surviving events.

    Returns (weight, iv, iu, idx_a, w_a, idx_b, w_b) where weight already carries
    the kinetic factor, quadrature weight and pair weight.
    """
    z = nodes[rep_v] - nodes[rep_u]
    zn, a, e, f = _frames_np(z)
    kin = dv**6 * zn**gamma * mu[rep_v] * mu[rep_u] * rep_w
    out = []
    for k in range(len(cth)):
        c = cth[k]
        s = math.sqrt(1.0 - c * c)
        for j in range(len(cphi)):
            om = c * a + s * (cphi[j] * e + sphi[j] * f)
            zw = (zn * c)[:, None]
            ok_a, ia, wa = stencil_np(nodes[rep_v] - zw * om, x0, dv, n)
            ok_b, ib, wb = stencil_np(nodes[rep_u] + zw * om, x0, dv, n)
            ok = ok_a & ok_b
            out.append((kin[ok] * wq[k, j], rep_v[ok], rep_u[ok], ia[ok], wa[ok], ib[ok], wb[ok]))
    return tuple(np.concatenate([o[i] for o in out]) for i in range(7))


def assemble_np(rep_v, rep_u, rep_w, nodes, mu, x0, dv, n, gamma, cth, cphi, sphi, wq, As, Ad):
    N = As.shape[0]
    for start in range(0, len(rep_v), CHUNK):
        sl = slice(start, start + CHUNK)
        wt, iv, iu, ia, wa, ib, wb = events_np(rep_v[sl], rep_u[sl], rep_w[sl], nodes, mu, x0, dv, n,
                                               gamma, cth, cphi, sphi, wq)
        if wt.size == 0:
            continue
        half = 0.5 * wt
        M = wt.size
        ones = -np.ones((M, 1))
        js = np.concatenate([ia, ib, iv[:, None], iu[:, None]], axis=1)
        xs = np.concatenate([wa, wb, ones, ones], axis=1)
        flat = (js[:, :, None] * N + js[:, None, :]).ravel()
        vals = (half[:, None, None] * (xs[:, :, None] * xs[:, None, :])).ravel()
        As += np.bincount(flat, vals, minlength=N * N).reshape(N, N)
        for jj, xx in ((np.concatenate([ia, iv[:, None]], 1), np.concatenate([wa, ones], 1)),
                       (np.concatenate([ib, iu[:, None]], 1), np.concatenate([wb, ones], 1))):
            flat = (jj[:, :, None] * N + jj[:, None, :]).ravel()
            vals = (half[:, None, None] * (xx[:, :, None] * xx[:, None, :])).ravel()
            Ad += np.bincount(flat, vals, minlength=N * N).reshape(N, N)


def collide_np(rep_v, rep_u, rep_w, nodes, mu, x0, dv, n, gamma, cth, cphi, sphi, wq, gmap, hF, hG, out):
    N = hF.shape[1]
    for start in range(0, len(rep_v), CHUNK):
        sl = slice(start, start + CHUNK)
        wt, iv, iu, ia, wa, ib, wb = events_np(rep_v[sl], rep_u[sl], rep_w[sl], nodes, mu, x0, dv, n,
                                               gamma, cth, cphi, sphi, wq)
        if wt.size == 0:
            continue
        coef = -0.25 * wt
        for g in range(gmap.shape[0]):
            gm = gmap[g]
            gv, gu, ga, gb = gm[iv], gm[iu], gm[ia], gm[ib]
            for bb in range(hF.shape[0]):
                hf, hg = hF[bb], hG[bb]
                fa = np.sum(wa * hf[ga], axis=1)
                ga_ = np.sum(wa * hg[ga], axis=1)
                fb = np.sum(wb * hf[gb], axis=1)
                gb_ = np.sum(wb * hg[gb], axis=1)
                d1 = coef * (fa * gb_ - hf[gv] * hg[gu])
                d2 = coef * (fb * ga_ - hf[gu] * hg[gv])
                acc = np.bincount(ga.ravel(), (d1[:, None] * wa).ravel(), minlength=N)
                acc += np.bincount(gb.ravel(), (d2[:, None] * wb).ravel(), minlength=N)
                acc -= np.bincount(gv, d1, minlength=N)
                acc -= np.bincount(gu, d2, minlength=N)
                out[bb] += acc


def assemble(*args) -> None:
    (assemble_nb if USE_NUMBA else assemble_np)(*args)


def collide(*args) -> None:
    (collide_nb if USE_NUMBA else collide_np)(*args)
