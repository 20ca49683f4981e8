"""Hot inner loops for convolution and bilinear resampling.

Every kernel exists twice.  The numba path runs the gather/scatter loops
(im2col, col2im, bilinear taps) under ``@njit`` and hands the dense products
to BLAS; the pure-numpy path builds the same products from strided views.  The numba
path is used when numba is importable and the environment variable
``BEM_USE_NUMBA`` is not set to ``0``/``false``/``no``.  Both paths are kept
bit-compatible up to floating-point summation order and are cross-checked by
the test suite; ``benchmarks/bench_kernels.py`` times them against each other.

All kernels work on 4-D ``(N, C, H, W)`` arrays.
"""

import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda func: func


def _env_wants_numba():
    flag = os.environ.get("BEM_USE_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


_use_numba = NUMBA_AVAILABLE and _env_wants_numba()


def backend():
    """Name of the active kernel backend, ``"numba"`` or ``"numpy"``."""
    return "numba" if _use_numba else "numpy"


def set_backend(name):
    """Switch kernel backend at runtime; returns the previous name."""
    global _use_numba
    previous = backend()
    if name == "numba":
        if not NUMBA_AVAILABLE:
            raise RuntimeError("numba is not installed")
        _use_numba = True
    elif name == "numpy":
        _use_numba = False
    else:
        raise ValueError(f"unknown backend {name!r}")
    return previous


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _im2col_nb(xp, kh, kw, stride, ho, wo, cols):
    # cols[n, (c, i, j), (y, x)] = xp[n, c, y*stride + i, x*stride + j]
    n_batch, c_in = xp.shape[0], xp.shape[1]
    for n in range(n_batch):
        for c in range(c_in):
            for i in range(kh):
                for j in range(kw):
                    r = (c * kh + i) * kw + j
                    for y in range(ho):
                        row = y * stride + i
                        base = y * wo
                        for x in range(wo):
                            cols[n, r, base + x] = xp[n, c, row, x * stride + j]
    return cols


@njit(cache=True, nogil=True)
def _col2im_nb(cols, kh, kw, stride, ho, wo, gxp):
    n_batch, c_in = gxp.shape[0], gxp.shape[1]
    for n in range(n_batch):
        for c in range(c_in):
            for i in range(kh):
                for j in range(kw):
                    r = (c * kh + i) * kw + j
                    for y in range(ho):
                        row = y * stride + i
                        base = y * wo
                        for x in range(wo):
                            gxp[n, c, row, x * stride + j] += cols[n, r, base + x]
    return gxp


@njit(cache=True, nogil=True)
def _resize_fwd_nb(x, r0, r1, rf, c0, c1, cf, out):
    n_batch, chans = x.shape[0], x.shape[1]
    out_h, out_w = out.shape[2], out.shape[3]
    for n in range(n_batch):
        for c in range(chans):
            for y in range(out_h):
                fy = rf[y]
                for xx in range(out_w):
                    fx = cf[xx]
                    top = x[n, c, r0[y], c0[xx]] * (1.0 - fx) + x[n, c, r0[y], c1[xx]] * fx
                    bot = x[n, c, r1[y], c0[xx]] * (1.0 - fx) + x[n, c, r1[y], c1[xx]] * fx
                    out[n, c, y, xx] = top * (1.0 - fy) + bot * fy
    return out


@njit(cache=True, nogil=True)
def _resize_bwd_nb(g, r0, r1, rf, c0, c1, cf, gx):
    n_batch, chans = g.shape[0], g.shape[1]
    out_h, out_w = g.shape[2], g.shape[3]
    for n in range(n_batch):
        for c in range(chans):
            for y in range(out_h):
                fy = rf[y]
                for xx in range(out_w):
                    fx = cf[xx]
                    v = g[n, c, y, xx]
                    gx[n, c, r0[y], c0[xx]] += v * (1.0 - fy) * (1.0 - fx)
                    gx[n, c, r0[y], c1[xx]] += v * (1.0 - fy) * fx
                    gx[n, c, r1[y], c0[xx]] += v * fy * (1.0 - fx)
                    gx[n, c, r1[y], c1[xx]] += v * fy * fx
    return gx


# ---------------------------------------------------------------------------
# numpy kernels
# ---------------------------------------------------------------------------


def _windows(xp, kh, kw, stride):
    # (N, C, Ho, Wo, kh, kw) view; no copy until reshaped
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv_fwd_np(xp, w, stride):
    c_out = w.shape[0]
    win = _windows(xp, w.shape[2], w.shape[3], stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)).reshape(
        xp.shape[0], c_out, win.shape[2], win.shape[3]
    )


def _conv_grad_input_np(g, w, stride, padded_shape):
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = g.shape[2], g.shape[3]
    # (N, Ho, Wo, C, kh, kw)
    cols = np.tensordot(g, w, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    gxp = np.zeros(padded_shape, dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[..., i, j]
    return gxp


def _conv_grad_weight_np(g, xp, w_shape, stride):
    win = _windows(xp, w_shape[2], w_shape[3], stride)
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


def _interp_matrix(out_size, in_size, dtype):
    i0, i1, frac = resize_axis(out_size, in_size)
    m = np.zeros((out_size, in_size), dtype=dtype)
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


# ---------------------------------------------------------------------------
# public dispatchers
# ---------------------------------------------------------------------------


def resize_axis(out_size, in_size):
    """Source indices and blend weights for half-pixel bilinear sampling.

    Output coordinate ``d`` samples source coordinate ``(d + 0.5) * in/out - 0.5``
    clamped to ``[0, in - 1]``.
    """
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_size - 1)
    return i0, i1, src - i0


def _cols_nb(xp, w_shape, stride):
    kh, kw = w_shape[2], w_shape[3]
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    cols = np.empty((xp.shape[0], xp.shape[1] * kh * kw, ho * wo), dtype=xp.dtype)
    return _im2col_nb(np.ascontiguousarray(xp), kh, kw, stride, ho, wo, cols), ho, wo


def conv2d_forward(x, w, stride=1, pad=0):
    xp = _pad(x, pad)
    if _use_numba:
        cols, ho, wo = _cols_nb(xp, w.shape, stride)
        out = np.matmul(w.reshape(w.shape[0], -1), cols)
        return out.reshape(x.shape[0], w.shape[0], ho, wo)
    return _conv_fwd_np(xp, w, stride)


def conv2d_grad_input(g, w, x_shape, stride=1, pad=0):
    n, c, h, wd = x_shape
    padded_shape = (n, c, h + 2 * pad, wd + 2 * pad)
    if _use_numba:
        ho, wo = g.shape[2], g.shape[3]
        g2 = np.ascontiguousarray(g).reshape(n, g.shape[1], ho * wo)
        cols = np.matmul(w.reshape(w.shape[0], -1).T, g2)
        gxp = np.zeros(padded_shape, dtype=g.dtype)
        gxp = _col2im_nb(cols, w.shape[2], w.shape[3], stride, ho, wo, gxp)
    else:
        gxp = _conv_grad_input_np(g, w, stride, padded_shape)
    if pad:
        gxp = gxp[:, :, pad : pad + h, pad : pad + wd]
    return np.ascontiguousarray(gxp)


def conv2d_grad_weight(g, x, w_shape, stride=1, pad=0):
    xp = _pad(x, pad)
    if _use_numba:
        cols, ho, wo = _cols_nb(xp, w_shape, stride)
        g2 = np.ascontiguousarray(g).reshape(g.shape[0], g.shape[1], ho * wo)
        return np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w_shape)
    return _conv_grad_weight_np(g, xp, w_shape, stride)


def resize_forward(x, out_h, out_w):
    n, c, h, w = x.shape
    if _use_numba:
        r0, r1, rf = resize_axis(out_h, h)
        c0, c1, cf = resize_axis(out_w, w)
        out = np.empty((n, c, out_h, out_w), dtype=x.dtype)
        return _resize_fwd_nb(
            np.ascontiguousarray(x), r0, r1, rf.astype(x.dtype), c0, c1, cf.astype(x.dtype), out
        )
    ah = _interp_matrix(out_h, h, x.dtype)
    aw = _interp_matrix(out_w, w, x.dtype)
    return np.ascontiguousarray(np.matmul(np.matmul(ah, x), aw.T))


def resize_backward(g, in_h, in_w):
    n, c, out_h, out_w = g.shape
    if _use_numba:
        r0, r1, rf = resize_axis(out_h, in_h)
        c0, c1, cf = resize_axis(out_w, in_w)
        gx = np.zeros((n, c, in_h, in_w), dtype=g.dtype)
        return _resize_bwd_nb(
            np.ascontiguousarray(g), r0, r1, rf.astype(g.dtype), c0, c1, cf.astype(g.dtype), gx
        )
    ah = _interp_matrix(out_h, in_h, g.dtype)
    aw = _interp_matrix(out_w, in_w, g.dtype)
    return np.ascontiguousarray(np.matmul(np.matmul(ah.T, g), aw))
