import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(fn, x, step=1e-5):
    """Central finite-difference gradient of scalar ``fn`` at array ``x``."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        hi = fn(x)
        x[i] = orig - step
        lo = fn(x)
        x[i] = orig
        grad[i] = (hi - lo) / (2 * step)
    return grad
