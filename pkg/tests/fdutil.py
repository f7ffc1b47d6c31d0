"""Central finite-difference gradient oracle, independent of the autodiff path."""
from __future__ import annotations

import numpy as np


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar-valued f at x via central differences (fresh forwards)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    """Max abs deviation, scaled by the gradient magnitude (floored at 1e-2)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    scale = max(np.max(np.abs(fd), initial=0.0), np.max(np.abs(analytic), initial=0.0), 1e-2)
    return float(np.max(np.abs(analytic - fd), initial=0.0) / scale)


def assert_grad_close(analytic: np.ndarray, fd: np.ndarray, tol: float = 1e-4) -> None:
    err = max_rel_err(analytic, fd)
    assert err < tol, f"gradient mismatch: max relative error {err:.3e} >= {tol}"
