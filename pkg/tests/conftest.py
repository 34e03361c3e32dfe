"""Shared numerical checking helpers for the test suite."""

import numpy as np
import pytest

FD_STEP = 1e-6


def central_diff(f, x, h=FD_STEP):
    """Per-element central finite difference of scalar-valued f at array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    for i in range(x.size):
        xp = x.copy().ravel()
        xm = x.copy().ravel()
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return grad


def rel_err(approx, exact):
    """Relative error with a graceful zero-denominator fallback."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    denom = max(np.linalg.norm(exact), np.linalg.norm(approx), 1e-12)
    return np.linalg.norm(approx - exact) / denom


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
