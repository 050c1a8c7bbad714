"""Finite-difference verification of reverse-mode gradients."""

import numpy as np

from .tensor import Tensor


def relative_error(analytic, numeric) -> float:
    """``|a - n| / max(|a|, |n|)`` in the Euclidean norm, with a tiny floor."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def numerical_gradient(fn, arrays, h=1e-5):
    """Central differences of scalar ``fn(*tensors)`` w.r.t. every array."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn(*[Tensor(a) for a in arrays]).data)
            flat[i] = orig - h
            down = float(fn(*[Tensor(a) for a in arrays]).data)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_gradient(fn, arrays):
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = fn(*tensors)
    loss.backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def check_gradients(fn, arrays, h=1e-5):
    """Largest relative error over all inputs of ``fn``."""
    analytic = analytic_gradient(fn, arrays)
    numeric = numerical_gradient(fn, arrays, h=h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
