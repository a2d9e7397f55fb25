"""Shared numeric oracles for the test suite."""

import numpy as np

from nncompress.tensor import Tensor


def numeric_grad(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar-valued f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def check_grad(build_loss, x0: np.ndarray, rtol: float = 1e-5, atol: float = 1e-7, eps: float = 1e-4):
    """Compare autodiff gradient of build_loss(Tensor) against central differences.

    ``build_loss`` maps a Tensor to a scalar Tensor and must be deterministic.
    """
    t = Tensor(np.array(x0, dtype=np.float64), requires_grad=True)
    loss = build_loss(t)
    loss.backward()
    auto = t.grad.copy()

    def f(arr):
        return build_loss(Tensor(arr)).item()

    fd = numeric_grad(f, np.array(x0, dtype=np.float64), eps=eps)
    np.testing.assert_allclose(auto, fd, rtol=rtol, atol=atol)
    return auto, fd
