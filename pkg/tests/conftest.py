import numpy as np
import pytest

from bem.ndtensor import Tape, Tensor, backward, kernels, precision


def numeric_grad(f, arrays, h=1e-5):
    """Central differences of scalar ``f(*arrays)`` w.r.t. each array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            fp = f(*arrays)
            arr[idx] = old - h
            fm = f(*arrays)
            arr[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def max_rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def gradcheck(build, arrays, h=1e-5):
    """Compare tape gradients of ``build(*tensors)`` with central differences.

    ``build`` maps tensors to a scalar Tensor.  Returns the max relative error.
    """
    with precision(64):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]

        def f(*arrs):
            return build(*[Tensor(a) for a in arrs]).item()

        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        with Tape() as tape:
            loss = build(*leaves)
        grads = backward(loss, tape, wrt=leaves)
        numeric = numeric_grad(f, arrays, h)
        return max(max_rel_err(grads[t], n) for t, n in zip(leaves, numeric))


@pytest.fixture(params=["numpy", "numba"])
def kernel_backend(request):
    if request.param == "numba" and not kernels.NUMBA_AVAILABLE:
        pytest.skip("numba not installed")
    previous = kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
