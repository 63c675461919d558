import numpy as np
import pytest


def finite_difference(func, arr, eps=1e-5):
    """Central-difference gradient of a scalar-returning func w.r.t. arr.

    func re-evaluates the full computation from current array contents, so
    mutating arr in place perturbs the graph input.
    """
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = func()
        flat[i] = orig - eps
        fm = func()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def assert_close_rel(actual, expected, rtol=1e-4, atol=1e-7):
    actual = np.asarray(actual)
    expected = np.asarray(expected)
    np.testing.assert_allclose(actual, expected, rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
