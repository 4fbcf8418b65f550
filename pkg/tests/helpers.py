"""Shared test utilities: central finite differences against the tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from pertmap.autodiff import Tensor


def central_diff(fn: Callable[[Sequence[np.ndarray]], float], arrays: list[np.ndarray], h: float = 1e-6) -> list[np.ndarray]:
    """Central-difference gradient of a scalar function of several arrays."""
    grads = []
    for idx, base in enumerate(arrays):
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = fn(arrays)
            flat[i] = orig - h
            minus = fn(arrays)
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * h)
        grads.append(g)
    return grads


def check_grads(build: Callable[[list[Tensor]], "Tensor"], arrays: list[np.ndarray], tol: float = 1e-4, h: float = 1e-6) -> float:
    """Compare reverse-mode gradients of build(...) against central differences.

    ``build`` maps a list of Tensors to a scalar Tensor.  Arrays must be
    float64.  Returns the worst relative error over all inputs.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(tensors)
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def fn(arrs):
        ts = [Tensor(a) for a in arrs]
        return float(build(ts).data)

    numeric = central_diff(fn, arrays, h=h)

    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    assert worst < tol, f"max relative gradient error {worst} >= {tol}"
    return worst
