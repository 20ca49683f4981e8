"""Minimal dense tensor library with reverse-mode automatic differentiation."""

from . import kernels, ops
from .ops import (
    abs,
    add,
    as_tensor,
    bilinear_resize,
    concat,
    conv2d,
    div,
    exp,
    irfft2,
    log,
    lowpass_mask,
    mean,
    mul,
    neg,
    power,
    relu,
    reshape,
    rfft2,
    sigmoid,
    silu,
    softplus,
    sqrt,
    square,
    sub,
    sum,
)
from .tensor import (
    Tape,
    Tensor,
    active_tape,
    backward,
    default_dtype,
    precision,
    record,
    set_default_dtype,
    stop_gradient,
)
