"""Tensor container and define-by-run reverse-mode tape."""

import threading
from contextlib import contextmanager

import numpy as np

from ..errors import ContractError, NonFiniteError

_state = threading.local()

_DTYPES = {32: np.float32, 64: np.float64, "float32": np.float32, "float64": np.float64}


def default_dtype():
    return getattr(_state, "dtype", np.float32)


def set_default_dtype(dtype):
    """Set the thread's default float precision (32/64 or a numpy dtype)."""
    if dtype in _DTYPES:
        dtype = _DTYPES[dtype]
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    _state.dtype = dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the default precision::

        with precision(64):
            ...
    """
    previous = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def resolve_dtype(dtype):
    if dtype is None:
        return default_dtype()
    if dtype in _DTYPES:
        return _DTYPES[dtype]
    return np.dtype(dtype).type


class Tensor:
    """Dense real array plus the bookkeeping reverse-mode AD needs.

    ``data`` is a C-contiguous numpy array of float32 or float64.  A tensor
    created directly by the user is a *leaf*; tensors produced by ops while a
    :class:`Tape` is active carry a reference to their tape node.
    """

    __slots__ = ("data", "requires_grad", "_node", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None and arr.dtype in (np.float32, np.float64):
            target = arr.dtype
        else:
            target = resolve_dtype(dtype)
        self.data = np.ascontiguousarray(arr, dtype=target)
        self.requires_grad = bool(requires_grad)
        self._node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{grad})"

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __pow__(self, exponent):
        from . import ops

        return ops.power(self, exponent)

    def sum(self, axis=None):
        from . import ops

        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops

        return ops.mean(self, axis)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


class _Node:
    __slots__ = ("op", "parents", "vjp", "shape")

    def __init__(self, op, parents, vjp, shape):
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.shape = shape


class Tape:
    """Append-only record of differentiable operations.

    Used as a context manager; ops executed inside the ``with`` block and
    touching a tensor that requires grad append a node here.  Parents are
    always recorded before their children, so node order is topological.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def _append(self, op, parents, vjp, shape):
        self.nodes.append(_Node(op, parents, vjp, shape))
        return len(self.nodes) - 1


def _tape_stack():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def record(op, out, parents, vjp):
    """Wrap ``out`` as a Tensor and, if needed, register it on the active tape.

    ``vjp(g)`` must return one gradient array (or ``None``) per parent.
    """
    check_finite(out, op)
    result = Tensor(out, dtype=out.dtype)
    tape = active_tape()
    if tape is None:
        return result
    tracked = any(p.requires_grad for p in parents)
    if not tracked:
        return result
    result.requires_grad = True
    result._node = (tape, tape._append(op, tuple(parents), vjp, out.shape))
    return result


def stop_gradient(x):
    """Value of ``x`` with no gradient connection."""
    if isinstance(x, Tensor):
        return x.detach()
    return Tensor(x)


def backward(loss, tape, wrt=None):
    """Reverse sweep over ``tape`` from the scalar ``loss``.

    Returns a dict mapping every leaf tensor that requires grad (those seen
    on the tape plus any listed in ``wrt``) to its gradient array.  Leaves the
    loss does not depend on receive zeros.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaves = {}
    if wrt is not None:
        for t in wrt:
            leaves[id(t)] = [t, None]
    for node in tape.nodes:
        for p in node.parents:
            if p.requires_grad and p._node is None and id(p) not in leaves:
                leaves[id(p)] = [p, None]

    if loss._node is None:
        if loss.requires_grad and id(loss) in leaves:
            leaves[id(loss)][1] = np.ones_like(loss.data)
            return _finish(leaves)
        raise ContractError("loss was not produced on this tape")
    owner, start = loss._node
    if owner is not tape:
        raise ContractError("loss was not produced on this tape")

    grads = [None] * (start + 1)
    grads[start] = np.ones(loss.shape, dtype=loss.dtype)
    for idx in range(start, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        node = tape.nodes[idx]
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ContractError(
                    f"{node.op}: gradient shape {pg.shape} != value shape {parent.shape}"
                )
            if parent._node is not None and parent._node[0] is tape:
                pidx = parent._node[1]
                grads[pidx] = pg if grads[pidx] is None else grads[pidx] + pg
            elif parent._node is None:
                slot = leaves[id(parent)]
                slot[1] = pg if slot[1] is None else slot[1] + pg
        grads[idx] = None
    return _finish(leaves)


def _finish(leaves):
    out = {}
    for t, g in leaves.values():
        out[t] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype)
    return out
