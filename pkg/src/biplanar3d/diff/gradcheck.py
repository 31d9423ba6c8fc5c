"""Central finite-difference checks for reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from .array import DiffArray


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)``, zero when both vanish."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < 1e-300:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(f, x: DiffArray, eps: float = 1e-6) -> np.ndarray:
    """Elementwise central differences of the scalar ``f()`` w.r.t. ``x.value``."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.value.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = float(f().value)
        flat[i] = old - eps
        fm = float(f().value)
        flat[i] = old
        g.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return g


def analytic_grads(f, inputs: list[DiffArray]) -> list[np.ndarray]:
    for x in inputs:
        x.grad = None
    out = f()
    out.backward()
    return [np.zeros(x.shape) if x.grad is None else x.grad.copy() for x in inputs]


def check_gradients(f, inputs: list[DiffArray], eps: float = 1e-6) -> float:
    """Worst relative error over ``inputs`` between backprop and central differences."""
    ana = analytic_grads(f, inputs)
    return max(rel_error(a, numeric_grad(f, x, eps)) for a, x in zip(ana, inputs))


def directional_check(f, inputs: list[DiffArray], rng: np.random.Generator,
                      eps: float = 1e-6) -> float:
    """Compare <grad, v> with a central difference along a random direction ``v``.

    Used where the input count makes elementwise differencing too slow. The
    direction has unit norm over all inputs jointly, so ``eps`` is the actual
    step length in parameter space.
    """
    ana = analytic_grads(f, inputs)
    dirs = [rng.standard_normal(x.shape) for x in inputs]
    norm = np.sqrt(sum(float(np.vdot(d, d)) for d in dirs))
    dirs = [d / norm for d in dirs]
    predicted = float(sum(np.vdot(a, d) for a, d in zip(ana, dirs)))
    base = [x.value.copy() for x in inputs]
    for x, b, d in zip(inputs, base, dirs):
        x.value[...] = b + eps * d
    fp = float(f().value)
    for x, b, d in zip(inputs, base, dirs):
        x.value[...] = b - eps * d
    fm = float(f().value)
    for x, b in zip(inputs, base):
        x.value[...] = b
    measured = (fp - fm) / (2 * eps)
    return rel_error(np.array([predicted]), np.array([measured]))
