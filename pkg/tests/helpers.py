"""Shared test oracles: finite-difference gradient checking."""

import numpy as np

from delaycast import tensor as T


def numeric_grad(f, leaf: T.Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued ``f()`` w.r.t. ``leaf.data``."""
    g = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(f().data)
        flat[i] = orig - step
        down = float(f().data)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_grads(f, leaves, tol: float = 1e-4, step: float = 1e-5) -> float:
    """Assert analytic grads of scalar ``f()`` match central differences.

    ``f`` must rebuild its graph from the leaves' current ``data`` on every
    call. Returns the worst relative error seen.
    """
    for leaf in leaves:
        leaf.zero_grad()
    loss = f()
    T.backward(loss)
    worst = 0.0
    for leaf in leaves:
        assert leaf.grad is not None, "leaf did not receive a gradient"
        num = numeric_grad(f, leaf, step=step)
        err = max_rel_error(leaf.grad, num)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol:.1e}"
    return worst
