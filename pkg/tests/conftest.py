import numpy as np
import pytest

from mambafuse.tensor import Tensor


def make_tensors(*arrays):
    return [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]


def numeric_grad(f, arrays, which, h=1e-5):
    """Central finite differences of scalar f w.r.t. arrays[which]."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[which]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(*arrays)
        flat[i] = orig - h
        lo = f(*arrays)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return grad


def rel_error(analytic, numeric):
    scale = max(np.abs(numeric).max(), 1.0)
    return np.abs(analytic - numeric).max() / scale


def check_gradients(build, *arrays, tol=1e-5, h=1e-5):
    """Compare backward() gradients of build(*tensors) against central FD.

    ``build`` maps Tensors to a scalar Tensor; gradients are checked for
    every input.
    """
    tensors = make_tensors(*arrays)
    loss = build(*tensors)
    loss.backward()

    def scalar(*arrs):
        return build(*[Tensor(a) for a in arrs]).item()

    for i, t in enumerate(tensors):
        numeric = numeric_grad(scalar, arrays, i, h=h)
        analytic = t.grad if t.grad is not None else np.zeros_like(numeric)
        err = rel_error(analytic, numeric)
        assert err < tol, f"input {i}: gradient mismatch, rel error {err:.3g}"


def away_from_zero(arr, margin=0.05):
    """Shift entries out of (-margin, margin) so kinks stay clear of FD steps."""
    arr = np.array(arr, dtype=np.float64)
    small = np.abs(arr) < margin
    arr[small] += np.where(arr[small] >= 0, 2 * margin, -2 * margin)
    return arr


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
