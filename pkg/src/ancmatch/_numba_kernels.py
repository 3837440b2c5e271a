"""Numba implementations of the hot kernels.

Every kernel assigns each output element to exactly one parallel worker and
accumulates it in a fixed order, so results are bit-identical for any
worker count. Large correlation volumes get shape-specialized kernels
(tap extents and row width baked in as compile-time constants, which is
what keeps the inner loops vectorized); small volumes use generic kernels
compiled once and cached on disk.

Layouts:
    features        (h, w, d)           d contiguous
    correlation     (c, hs, ws, ht, wt) wt contiguous
    conv2d weights  (k, k, c_in, c_out) -> transposed to (c_out, k, k, c_in)
    conv4d weights  (c_out, c_in, ps, qs, pt, qt)
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

# ---------------------------------------------------------------------------
# correlation: c[i,j,k,l] = <fs[i,j,:], ft[k,l,:]>


@njit(parallel=True, fastmath=True, cache=True)
def correlate4d(fs, ft, out):
    h, w, d = fs.shape
    h2, w2 = ft.shape[0], ft.shape[1]
    for ij in prange(h * w):
        i = ij // w
        j = ij % w
        f = fs[i, j]
        for k in range(h2):
            for l in range(w2):
                g = ft[k, l]
                s = 0.0
                for c in range(d):
                    s += f[c] * g[c]
                out[i, j, k, l] = s


@njit(parallel=True, fastmath=True, cache=True)
def correlate4d_grad_first(g, ft, out):
    # out[i,j,:] = sum_kl g[i,j,k,l] * ft[k,l,:]
    h, w, d = out.shape
    h2, w2 = ft.shape[0], ft.shape[1]
    for ij in prange(h * w):
        i = ij // w
        j = ij % w
        acc = out[i, j]
        for c in range(d):
            acc[c] = 0.0
        gsl = g[i, j]
        for k in range(h2):
            for l in range(w2):
                gv = gsl[k, l]
                if gv != 0.0:
                    f = ft[k, l]
                    for c in range(d):
                        acc[c] += gv * f[c]


# ---------------------------------------------------------------------------
# self-similarity channels: out[i,j,wy*win+wx] = <f[i,j], f[i+dy, j+dx]>


@njit(parallel=True, fastmath=True, cache=True)
def self_sim_base(f, window, out):
    h, w, d = f.shape
    r = window // 2
    for ij in prange(h * w):
        i = ij // w
        j = ij % w
        center = f[i, j]
        ch = 0
        for wy in range(window):
            for wx in range(window):
                ii = i + wy - r
                jj = j + wx - r
                if 0 <= ii < h and 0 <= jj < w:
                    nb = f[ii, jj]
                    s = 0.0
                    for c in range(d):
                        s += center[c] * nb[c]
                    out[i, j, ch] = s
                else:
                    out[i, j, ch] = 0.0
                ch += 1


# ---------------------------------------------------------------------------
# 2D convolution (same-size, zero padded); wt layout (c_out, k, k, c_in)


@njit(parallel=True, fastmath=True, cache=True)
def conv2d_forward(x, wt, b, out):
    h, w, ci = x.shape
    co = wt.shape[0]
    k = wt.shape[1]
    r = k // 2
    for ij in prange(h * w):
        i = ij // w
        j = ij % w
        for o in range(co):
            s = b[o]
            for ky in range(k):
                ii = i + ky - r
                if 0 <= ii < h:
                    for kx in range(k):
                        jj = j + kx - r
                        if 0 <= jj < w:
                            xr = x[ii, jj]
                            wr = wt[o, ky, kx]
                            for c in range(ci):
                                s += xr[c] * wr[c]
            out[i, j, o] = s


@njit(parallel=True, fastmath=True, cache=True)
def conv2d_grad_weights(x, g, dw):
    # dw layout (k, k, c_in, c_out)
    h, w, ci = x.shape
    co = g.shape[2]
    k = dw.shape[0]
    r = k // 2
    nu = k * k
    for u in prange(nu):
        ky = u // k
        kx = u % k
        for c in range(ci):
            for o in range(co):
                s = 0.0
                for i in range(h):
                    ii = i + ky - r
                    if 0 <= ii < h:
                        for j in range(w):
                            jj = j + kx - r
                            if 0 <= jj < w:
                                s += x[ii, jj, c] * g[i, j, o]
                dw[ky, kx, c, o] = s


# ---------------------------------------------------------------------------
# 4D convolution, generic kernels (small volumes; compiled once)


@njit(parallel=True, fastmath=True, cache=True)
def conv4d_forward_generic(xp, w, b, out):
    # xp padded to (ci, H+ps-1, W+qs-1, K+pt-1, L+qt-1)
    co, H, W, K, L = out.shape
    ci = xp.shape[0]
    ps, qs, pt, qt = w.shape[2], w.shape[3], w.shape[4], w.shape[5]
    for ij in prange(H * W):
        i = ij // W
        j = ij % W
        for o in range(co):
            bo = b[o]
            for k in range(K):
                orow = out[o, i, j, k]
                for l in range(L):
                    orow[l] = bo
        for c in range(ci):
            for a in range(ps):
                for bb in range(qs):
                    plane = xp[c, i + a, j + bb]
                    for o in range(co):
                        wsl = w[o, c, a, bb]
                        for k in range(K):
                            orow = out[o, i, j, k]
                            for l in range(L):
                                s = orow[l]
                                for cc in range(pt):
                                    prow = plane[k + cc]
                                    for d in range(qt):
                                        s += wsl[cc, d] * prow[l + d]
                                orow[l] = s


@njit(parallel=True, fastmath=True, cache=True)
def conv4d_grad_weights_generic(xp, g, dw):
    co, H, W, K, L = g.shape
    ci = xp.shape[0]
    ps, qs, pt, qt = dw.shape[2], dw.shape[3], dw.shape[4], dw.shape[5]
    nu = co * ci * ps * qs
    for u in prange(nu):
        o = u // (ci * ps * qs)
        r = u % (ci * ps * qs)
        c = r // (ps * qs)
        r = r % (ps * qs)
        a = r // qs
        bb = r % qs
        acc = np.zeros((pt, qt, L), dtype=dw.dtype)
        for i in range(H):
            for j in range(W):
                plane = xp[c, i + a, j + bb]
                gsl = g[o, i, j]
                for k in range(K):
                    grow = gsl[k]
                    for cc in range(pt):
                        prow = plane[k + cc]
                        for d in range(qt):
                            arow = acc[cc, d]
                            for l in range(L):
                                arow[l] += prow[l + d] * grow[l]
        for cc in range(pt):
            for d in range(qt):
                s = 0.0
                for l in range(L):
                    s += acc[cc, d, l]
                dw[o, c, a, bb, cc, d] = s


# ---------------------------------------------------------------------------
# 4D convolution, shape-specialized factories (hot path)

_FWD_CACHE: dict = {}
_WG_CACHE: dict = {}


def specialized_forward(ps: int, qs: int, pt: int, qt: int, L: int):
    key = (ps, qs, pt, qt, L)
    fn = _FWD_CACHE.get(key)
    if fn is not None:
        return fn

    @njit(parallel=True, fastmath=True)
    def fwd(xp, w, b, out):
        co, H, W, K = out.shape[0], out.shape[1], out.shape[2], out.shape[3]
        ci = xp.shape[0]
        for ij in prange(H * W):
            i = ij // W
            j = ij % W
            for o in range(co):
                bo = b[o]
                for k in range(K):
                    orow = out[o, i, j, k]
                    for l in range(L):
                        orow[l] = bo
            for c in range(ci):
                for a in range(ps):
                    for bb in range(qs):
                        plane = xp[c, i + a, j + bb]
                        for o in range(co):
                            wsl = w[o, c, a, bb]
                            for k in range(K):
                                orow = out[o, i, j, k]
                                for l in range(L):
                                    s = orow[l]
                                    for cc in range(pt):
                                        prow = plane[k + cc]
                                        for d in range(qt):
                                            s += wsl[cc, d] * prow[l + d]
                                    orow[l] = s

    _FWD_CACHE[key] = fwd
    return fwd


def specialized_grad_weights(ps: int, qs: int, pt: int, qt: int):
    key = (ps, qs, pt, qt)
    fn = _WG_CACHE.get(key)
    if fn is not None:
        return fn

    @njit(parallel=True, fastmath=True)
    def wgrad(xp, g, dw):
        co, H, W, K, L = g.shape
        ci = xp.shape[0]
        nu = co * ci * ps * qs
        for u in prange(nu):
            o = u // (ci * ps * qs)
            r = u % (ci * ps * qs)
            c = r // (ps * qs)
            r = r % (ps * qs)
            a = r // qs
            bb = r % qs
            acc = np.zeros((pt, qt, L), dtype=dw.dtype)
            for i in range(H):
                for j in range(W):
                    plane = xp[c, i + a, j + bb]
                    gsl = g[o, i, j]
                    for k in range(K):
                        grow = gsl[k]
                        for cc in range(pt):
                            prow = plane[k + cc]
                            for d in range(qt):
                                arow = acc[cc, d]
                                for l in range(L):
                                    arow[l] += prow[l + d] * grow[l]
            for cc in range(pt):
                for d in range(qt):
                    s = 0.0
                    for l in range(L):
                        s += acc[cc, d, l]
                    dw[o, c, a, bb, cc, d] = s

    _WG_CACHE[key] = wgrad
    return wgrad
