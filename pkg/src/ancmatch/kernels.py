"""Backend dispatch for the hot kernels, plus the loop-level 4D oracle.

``conv4d_naive`` is the reference implementation that every optimized path
is checked against: six explicit nested loops over output indices with
bounds-checked zero padding and a fixed tap order. It deliberately shares
no padding or accumulation machinery with the fast paths. When numba is
importable the same loop code is jit-compiled, which changes nothing about
its semantics.
"""

from __future__ import annotations

import numpy as np

from . import _numpy_kernels as _np_impl
from . import backend
from .errors import InvalidArgumentError

try:
    from . import _numba_kernels as _nb_impl
except ImportError:  # pragma: no cover - exercised only without numba
    _nb_impl = None

# volumes with at least this many cells get shape-specialized numba kernels
SPECIALIZE_MIN_CELLS = 16384


def _use_numba() -> bool:
    return backend.active_backend() == "numba" and _nb_impl is not None


# ---------------------------------------------------------------------------
# correlation


def correlate4d(fs: np.ndarray, ft: np.ndarray) -> np.ndarray:
    if fs.shape[2] != ft.shape[2]:
        raise InvalidArgumentError(
            f"depth mismatch: {fs.shape[2]} vs {ft.shape[2]}"
        )
    out = np.empty(fs.shape[:2] + ft.shape[:2], dtype=fs.dtype)
    if _use_numba():
        _nb_impl.correlate4d(fs, ft, out)
    else:
        _np_impl.correlate4d(fs, ft, out)
    return out


def correlate4d_grad_s(g: np.ndarray, ft: np.ndarray) -> np.ndarray:
    out = np.empty(g.shape[:2] + ft.shape[2:], dtype=g.dtype)
    if _use_numba():
        _nb_impl.correlate4d_grad_first(g, ft, out)
    else:
        _np_impl.correlate4d_grad_first(g, ft, out)
    return out


def correlate4d_grad_t(g: np.ndarray, fs: np.ndarray) -> np.ndarray:
    gt = np.ascontiguousarray(np.transpose(g, (2, 3, 0, 1)))
    return correlate4d_grad_s(gt, fs)


# ---------------------------------------------------------------------------
# self-similarity


def self_sim_base(f: np.ndarray, window: int) -> np.ndarray:
    if window % 2 == 0 or window < 1:
        raise InvalidArgumentError(f"window must be odd and positive, got {window}")
    out = np.empty(f.shape[:2] + (window * window,), dtype=f.dtype)
    if _use_numba():
        _nb_impl.self_sim_base(f, window, out)
    else:
        _np_impl.self_sim_base(f, window, out)
    return out


# ---------------------------------------------------------------------------
# 2D convolution


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # w layout (k, k, c_in, c_out); transposed once for contiguous inner dots
    if w.shape[2] != x.shape[2]:
        raise InvalidArgumentError(
            f"channel mismatch: input {x.shape[2]}, kernel {w.shape[2]}"
        )
    if w.shape[0] % 2 == 0:
        raise InvalidArgumentError(f"kernel size must be odd, got {w.shape[0]}")
    wt = np.ascontiguousarray(w.transpose(3, 0, 1, 2))
    out = np.empty(x.shape[:2] + (w.shape[3],), dtype=x.dtype)
    if _use_numba():
        _nb_impl.conv2d_forward(x, wt, b, out)
    else:
        _np_impl.conv2d_forward(x, wt, b, out)
    return out


def conv2d_grad_input(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    wflip = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
    zero = np.zeros(wflip.shape[3], dtype=g.dtype)
    return conv2d_forward(g, wflip, zero)


def conv2d_grad_weights(x: np.ndarray, g: np.ndarray, ksize: int) -> tuple[np.ndarray, np.ndarray]:
    dw = np.empty((ksize, ksize, x.shape[2], g.shape[2]), dtype=x.dtype)
    if _use_numba():
        _nb_impl.conv2d_grad_weights(x, g, dw)
    else:
        _np_impl.conv2d_grad_weights(x, g, dw)
    db = g.sum(axis=(0, 1))
    return dw, db


# ---------------------------------------------------------------------------
# 4D convolution


def _check_conv4d(x: np.ndarray, w: np.ndarray) -> None:
    if x.ndim != 5 or w.ndim != 6:
        raise InvalidArgumentError(
            f"conv4d expects rank-5 input and rank-6 weights, got {x.ndim}/{w.ndim}"
        )
    if x.shape[0] != w.shape[1]:
        raise InvalidArgumentError(
            f"channel mismatch: input {x.shape[0]}, kernel c_in {w.shape[1]}"
        )
    if any(s % 2 == 0 for s in w.shape[2:]):
        raise InvalidArgumentError(
            f"all four kernel extents must be odd, got {w.shape[2:]}"
        )


def _pad4d(x: np.ndarray, ps: int, qs: int, pt: int, qt: int) -> np.ndarray:
    ci, H, W, K, L = x.shape
    xp = np.zeros(
        (ci, H + ps - 1, W + qs - 1, K + pt - 1, L + qt - 1), dtype=x.dtype
    )
    xp[:, ps // 2:ps // 2 + H, qs // 2:qs // 2 + W,
       pt // 2:pt // 2 + K, qt // 2:qt // 2 + L] = x
    return xp


def conv4d_fast(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Optimized same-size zero-padded 4D cross-correlation."""
    _check_conv4d(x, w)
    co = w.shape[0]
    ps, qs, pt, qt = w.shape[2:]
    out = np.empty((co,) + x.shape[1:], dtype=x.dtype)
    xp = _pad4d(x, ps, qs, pt, qt)
    if _use_numba():
        _, H, W, K, L = x.shape
        if H * W * K * L >= SPECIALIZE_MIN_CELLS:
            fn = _nb_impl.specialized_forward(ps, qs, pt, qt, L)
        else:
            fn = _nb_impl.conv4d_forward_generic
        fn(xp, w, b, out)
    else:
        _np_impl.conv4d_forward(xp, w, b, out)
    return out


def conv4d_grad_input(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    wflip = np.ascontiguousarray(
        w.transpose(1, 0, 2, 3, 4, 5)[:, :, ::-1, ::-1, ::-1, ::-1]
    )
    zero = np.zeros(wflip.shape[0], dtype=g.dtype)
    return conv4d_fast(g, wflip, zero)


def conv4d_grad_weights(x: np.ndarray, g: np.ndarray, w_shape: tuple) -> tuple[np.ndarray, np.ndarray]:
    ps, qs, pt, qt = w_shape[2:]
    dw = np.empty(w_shape, dtype=x.dtype)
    xp = _pad4d(x, ps, qs, pt, qt)
    if _use_numba():
        _, H, W, K, L = x.shape
        if H * W * K * L >= SPECIALIZE_MIN_CELLS:
            fn = _nb_impl.specialized_grad_weights(ps, qs, pt, qt)
        else:
            fn = _nb_impl.conv4d_grad_weights_generic
        fn(xp, g, dw)
    else:
        _np_impl.conv4d_grad_weights(xp, g, dw)
    db = g.sum(axis=(1, 2, 3, 4))
    return dw, db


# ---------------------------------------------------------------------------
# the oracle


def _conv4d_naive_loops(x, w, b, out):
    co, ci, ps, qs, pt, qt = w.shape
    H, W, K, L = x.shape[1], x.shape[2], x.shape[3], x.shape[4]
    ra, rb, rc, rd = ps // 2, qs // 2, pt // 2, qt // 2
    for o in range(co):
        for i in range(H):
            for j in range(W):
                for k in range(K):
                    for l in range(L):
                        s = b[o]
                        for c in range(ci):
                            for a in range(ps):
                                ii = i + a - ra
                                if ii < 0 or ii >= H:
                                    continue
                                for bb in range(qs):
                                    jj = j + bb - rb
                                    if jj < 0 or jj >= W:
                                        continue
                                    for cc in range(pt):
                                        kk = k + cc - rc
                                        if kk < 0 or kk >= K:
                                            continue
                                        for d in range(qt):
                                            ll = l + d - rd
                                            if ll < 0 or ll >= L:
                                                continue
                                            s += w[o, c, a, bb, cc, d] * x[c, ii, jj, kk, ll]
                        out[o, i, j, k, l] = s


try:
    from numba import njit as _njit

    _conv4d_naive_compiled = _njit(cache=True)(_conv4d_naive_loops)
except ImportError:  # pragma: no cover
    _conv4d_naive_compiled = _conv4d_naive_loops


def conv4d_naive(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Reference 4D convolution: explicit loops, bounds-checked zero padding."""
    _check_conv4d(x, w)
    out = np.empty((w.shape[0],) + x.shape[1:], dtype=x.dtype)
    _conv4d_naive_compiled(x, w, b, out)
    return out
