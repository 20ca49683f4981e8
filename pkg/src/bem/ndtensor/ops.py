"""Differentiable operations on :class:`Tensor`.

Each op computes its forward value with numpy (or a kernel from
:mod:`.kernels`) and registers a vector-Jacobian product on the active tape.
Elementwise binary ops broadcast with numpy rules.
"""

import numpy as np

from ..errors import ContractError, DimensionError
from . import kernels
from .tensor import Tensor, record


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    if like is not None and np.ndim(x) == 0:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise --------------------------------------------------------------


def add(a, b):
    a, b = _pair(a, b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return record(
        "sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b):
    a, b = _pair(a, b)
    _broadcast_check("mul", a, b)
    av, bv = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", av * bv, (a, b), vjp)


def div(a, b):
    a, b = _pair(a, b)
    _broadcast_check("div", a, b)
    av, bv = a.data, b.data
    out = av / bv

    def vjp(g):
        ga = _unbroadcast(g / bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None
        return ga, gb

    return record("div", out, (a, b), vjp)


def neg(a):
    a = as_tensor(a)
    return record("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    """``a ** exponent`` for a constant scalar exponent."""
    a = as_tensor(a)
    p = float(exponent)
    av = a.data
    out = av**p
    return record("power", out, (a,), lambda g: (g * p * av ** (p - 1.0),))


def square(a):
    a = as_tensor(a)
    av = a.data
    return record("square", av * av, (a,), lambda g: (2.0 * g * av,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    av = a.data
    return record("log", np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def abs(a):
    a = as_tensor(a)
    av = a.data
    return record("abs", np.abs(av), (a,), lambda g: (g * np.sign(av),))


def _sigmoid(v):
    return np.exp(-np.logaddexp(0.0, -v)).astype(v.dtype, copy=False)


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    """``log(1 + exp(a))`` evaluated without overflow."""
    a = as_tensor(a)
    av = a.data
    out = np.logaddexp(0.0, av).astype(av.dtype, copy=False)
    return record("softplus", out, (a,), lambda g: (g * _sigmoid(av),))


def silu(a):
    """Sigmoid-weighted linear unit, ``a * sigmoid(a)``; smooth everywhere."""
    a = as_tensor(a)
    av = a.data
    s = _sigmoid(av)
    return record("silu", av * s, (a,), lambda g: (g * (s * (1.0 + av * (1.0 - s))),))


def relu(a):
    a = as_tensor(a)
    av = a.data
    return record("relu", np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0),))


ACTIVATIONS = {"silu": silu, "relu": relu, "softplus": softplus}


# -- reductions and shape -----------------------------------------------------


def sum(a, axis=None):
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis))

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", out, (a,), vjp)


def mean(a, axis=None):
    a = as_tensor(a)
    shape = a.shape
    count = a.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))
    out = np.asarray(a.data.mean(axis=axis))

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return record("mean", out, (a,), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", out, tuple(tensors), vjp)


# -- convolution and resampling -------------------------------------------------


def _as4d(x, op):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"{op}: expected (C,H,W) or (N,C,H,W), got {x.shape}")


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """2-D cross-correlation of ``x`` (C_in,H,W) or (N,C_in,H,W) with
    ``kernel`` (C_out,C_in,kh,kw); optional ``bias`` of length C_out."""
    x = as_tensor(x)
    kernel = as_tensor(kernel, like=x)
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    xv, squeeze = _as4d(x, "conv2d")
    wv = kernel.data
    if wv.ndim != 4 or wv.shape[1] != xv.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    kh, kw = wv.shape[2], wv.shape[3]
    if kh > xv.shape[2] + 2 * padding or kw > xv.shape[3] + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {kernel.shape} larger than padded input {x.shape} (padding={padding})"
        )
    out = kernels.conv2d_forward(xv, wv, stride, padding)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias, like=x)
        if bias.shape != (wv.shape[0],):
            raise DimensionError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
        out = out + bias.data[:, None, None]
        parents.append(bias)
    if squeeze:
        out = out[0]
    x_shape = xv.shape

    def vjp(g):
        g4 = g[None] if squeeze else g
        gx = gk = gb = None
        if x.requires_grad:
            gx = kernels.conv2d_grad_input(g4, wv, x_shape, stride, padding)
            if squeeze:
                gx = gx[0]
        if kernel.requires_grad:
            gk = kernels.conv2d_grad_weight(g4, xv, wv.shape, stride, padding)
        if bias is not None and bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    return record("conv2d", out, tuple(parents), vjp)


def bilinear_resize(x, out_h, out_w):
    """Bilinear resampling with half-pixel centres and border clamping."""
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"bilinear_resize: output size must be positive, got {out_h}x{out_w}")
    xv, squeeze = _as4d(x, "bilinear_resize")
    in_h, in_w = xv.shape[2], xv.shape[3]
    if (in_h, in_w) == (out_h, out_w):
        out = xv.copy()
    else:
        out = kernels.resize_forward(xv, out_h, out_w)

    def vjp(g):
        g4 = g[None] if squeeze else g
        if (in_h, in_w) == (out_h, out_w):
            gx = g4
        else:
            gx = kernels.resize_backward(g4, in_h, in_w)
        return (gx[0] if squeeze else gx,)

    return record("bilinear_resize", out[0] if squeeze else out, (x,), vjp)


# -- Fourier transforms -------------------------------------------------------
#
# Spectra are stored as real tensors with a trailing axis of length 2
# holding (real, imaginary).  Any H, W >= 1 is supported (numpy's pocketfft
# handles mixed radix and prime sizes); no padding is applied.


def _check_fft_input(x, op):
    if x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise DimensionError(f"{op}: need trailing spatial axes H, W >= 1, got {x.shape}")


def rfft2(x):
    """Real 2-D DFT over the last two axes; returns (..., H, W//2+1, 2)."""
    x = as_tensor(x)
    _check_fft_input(x, "rfft2")
    h, w = x.shape[-2], x.shape[-1]
    spec = np.fft.rfft2(x.data)
    out = np.stack([spec.real, spec.imag], axis=-1).astype(x.dtype, copy=False)

    def vjp(g):
        gc = g[..., 0] + 1j * g[..., 1]
        pad = np.zeros(gc.shape[:-1] + (w,), dtype=gc.dtype)
        pad[..., : gc.shape[-1]] = gc
        gx = (h * w) * np.fft.ifft2(pad).real
        return (gx.astype(x.dtype, copy=False),)

    return record("rfft2", out, (x,), vjp)


def irfft2(spec, h, w):
    """Inverse of :func:`rfft2` for an output of size ``h`` x ``w``."""
    spec = as_tensor(spec)
    if spec.ndim < 3 or spec.shape[-1] != 2:
        raise DimensionError(f"irfft2: expected (..., H, W//2+1, 2) spectrum, got {spec.shape}")
    if spec.shape[-3] != h or spec.shape[-2] != w // 2 + 1:
        raise DimensionError(f"irfft2: spectrum {spec.shape} does not match output {h}x{w}")
    sc = spec.data[..., 0] + 1j * spec.data[..., 1]
    out = np.fft.irfft2(sc, s=(h, w)).astype(spec.dtype, copy=False)
    weights = np.full(w // 2 + 1, 2.0)
    weights[0] = 1.0
    if w % 2 == 0:
        weights[-1] = 1.0

    def vjp(g):
        gv = np.fft.rfft(g, axis=-1) * (weights / w)
        gy = np.fft.fft(gv, axis=-2) / h
        return (np.stack([gy.real, gy.imag], axis=-1).astype(spec.dtype, copy=False),)

    return record("irfft2", out, (spec,), vjp)


def lowpass_mask(h, w, keep_fraction):
    """0/1 mask over rfft2 bins keeping |normalised frequency| <= keep_fraction/2 per axis."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ContractError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    limit = keep_fraction / 2.0 + 1e-12
    fy = np.abs(np.fft.fftfreq(h))
    fx = np.abs(np.fft.rfftfreq(w))
    return ((fy[:, None] <= limit) & (fx[None, :] <= limit)).astype(np.float64)
