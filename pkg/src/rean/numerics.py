"""Dense kernels with analytic derivatives and a central-difference oracle.

Matrices are plain 2-D ``numpy.float64`` arrays. Shapes must match exactly;
nothing here broadcasts on the caller's behalf.
"""

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(x, name="x"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {x.shape}")
    return x


def affine_transform(x, W, b):
    """Return ``x @ W + b`` for a batch of row vectors."""
    x = as_matrix(x, "x")
    W = as_matrix(W, "W")
    b = np.asarray(b, dtype=np.float64)
    if x.shape[1] != W.shape[0]:
        raise ShapeError(f"cannot multiply x{x.shape} by W{W.shape}")
    if b.shape != (W.shape[1],):
        raise ShapeError(f"bias shape {b.shape} does not match W{W.shape}")
    return x @ W + b


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": np.tanh, "relu": relu}


def activation(x, kind):
    """Apply an elementwise nonlinearity: ``sigmoid``, ``tanh`` or ``relu``."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(np.asarray(x, dtype=np.float64))


def softmax(x, axis=0):
    """Softmax along ``axis`` with max subtraction."""
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


class NonFiniteError(FloatingPointError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


def finite_difference_gradient(f, theta, eps=1e-4, indices=None):
    """Central-difference gradient of scalar ``f`` at ``theta``.

    ``indices`` restricts the estimate to a subset of coordinates; the
    remaining entries of the returned vector are left at zero.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = np.array(theta, dtype=np.float64).ravel()
    grad = np.zeros_like(theta)
    coords = range(theta.size) if indices is None else indices
    for i in coords:
        old = theta[i]
        theta[i] = old + eps
        hi = float(f(theta))
        theta[i] = old - eps
        lo = float(f(theta))
        theta[i] = old
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"non-finite objective when perturbing coordinate {i}", index=i)
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass(frozen=True)
class GradientCheckReport:
    max_relative_error: float
    worst_parameter_index: int
    eps: float
    n_checked: int = 0

    def passed(self, tol=1e-4):
        return self.max_relative_error < tol


def check_gradient(f, theta, analytic, eps=1e-4, indices=None):
    """Compare an analytic gradient against central differences."""
    theta = np.asarray(theta, dtype=np.float64).ravel()
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    idx = np.arange(theta.size) if indices is None else np.asarray(indices)
    numeric = finite_difference_gradient(f, theta, eps=eps, indices=idx)
    err = relative_error(analytic[idx], numeric[idx])
    worst = int(np.argmax(err)) if err.size else 0
    return GradientCheckReport(
        max_relative_error=float(err[worst]) if err.size else 0.0,
        worst_parameter_index=int(idx[worst]) if err.size else -1,
        eps=eps,
        n_checked=int(idx.size),
    )
