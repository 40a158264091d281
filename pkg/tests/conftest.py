import numpy as np
import pytest


def central_diff_grad(f, x, eps=1e-5):
    """Central finite differences of scalar f() w.r.t. array x, in place."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    denom = max(np.abs(b).max(), 1e-10)
    return np.abs(a - b).max() / denom


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
