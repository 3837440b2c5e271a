"""Pure-numpy fallback kernels (selected with ``ANC_BACKEND=numpy``).

Same contracts as the numba kernels. Convolutions loop over kernel taps in
a fixed order and accumulate vectorized slices, so each output element sees
its taps in the same sequence on every run.
"""

from __future__ import annotations

import numpy as np


def correlate4d(fs: np.ndarray, ft: np.ndarray, out: np.ndarray) -> None:
    # optimize=False keeps the per-element reduction order fixed, which the
    # direction-symmetry property relies on.
    np.einsum("ijd,kld->ijkl", fs, ft, out=out, optimize=False)


def correlate4d_grad_first(g: np.ndarray, ft: np.ndarray, out: np.ndarray) -> None:
    np.einsum("ijkl,kld->ijd", g, ft, out=out, optimize=False)


def self_sim_base(f: np.ndarray, window: int, out: np.ndarray) -> None:
    h, w, _ = f.shape
    r = window // 2
    out[:] = 0.0
    ch = 0
    for wy in range(window):
        for wx in range(window):
            dy = wy - r
            dx = wx - r
            ys = slice(max(0, -dy), min(h, h - dy))
            xs = slice(max(0, -dx), min(w, w - dx))
            yn = slice(max(0, dy), max(0, dy) + (ys.stop - ys.start))
            xn = slice(max(0, dx), max(0, dx) + (xs.stop - xs.start))
            out[ys, xs, ch] = np.einsum(
                "ijd,ijd->ij", f[ys, xs], f[yn, xn], optimize=False
            )
            ch += 1


def conv2d_forward(x: np.ndarray, wt: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    # wt layout (c_out, k, k, c_in)
    h, w, ci = x.shape
    co, k = wt.shape[0], wt.shape[1]
    r = k // 2
    xp = np.zeros((h + k - 1, w + k - 1, ci), dtype=x.dtype)
    xp[r:r + h, r:r + w] = x
    out[:] = b
    for ky in range(k):
        for kx in range(k):
            view = xp[ky:ky + h, kx:kx + w]
            out += view @ wt[:, ky, kx, :].T



def conv2d_grad_weights(x: np.ndarray, g: np.ndarray, dw: np.ndarray) -> None:
    # dw layout (k, k, c_in, c_out)
    h, w, _ = x.shape
    k = dw.shape[0]
    r = k // 2
    xp = np.zeros((h + k - 1, w + k - 1, x.shape[2]), dtype=x.dtype)
    xp[r:r + h, r:r + w] = x
    for ky in range(k):
        for kx in range(k):
            view = xp[ky:ky + h, kx:kx + w]
            dw[ky, kx] = np.tensordot(view, g, axes=([0, 1], [0, 1]))


def conv4d_forward(xp: np.ndarray, w: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    # xp padded to (ci, H+ps-1, W+qs-1, K+pt-1, L+qt-1)
    co, H, W, K, L = out.shape
    ps, qs, pt, qt = w.shape[2], w.shape[3], w.shape[4], w.shape[5]
    out[:] = b.reshape(co, 1, 1, 1, 1)
    for a in range(ps):
        for bb in range(qs):
            for cc in range(pt):
                for d in range(qt):
                    view = xp[:, a:a + H, bb:bb + W, cc:cc + K, d:d + L]
                    out += np.tensordot(w[:, :, a, bb, cc, d], view, axes=([1], [0]))


def conv4d_grad_weights(xp: np.ndarray, g: np.ndarray, dw: np.ndarray) -> None:
    co, H, W, K, L = g.shape
    ps, qs, pt, qt = dw.shape[2], dw.shape[3], dw.shape[4], dw.shape[5]
    for a in range(ps):
        for bb in range(qs):
            for cc in range(pt):
                for d in range(qt):
                    view = xp[:, a:a + H, bb:bb + W, cc:cc + K, d:d + L]
                    dw[:, :, a, bb, cc, d] = np.tensordot(
                        g, view, axes=([1, 2, 3, 4], [1, 2, 3, 4])
                    )
