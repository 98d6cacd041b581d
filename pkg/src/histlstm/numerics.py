"""Dense vector/matrix primitives, activations, losses, and finite differences.

Everything here works on plain float64 numpy arrays: vectors are 1-D,
matrices are 2-D row-major. All public operations keep values finite and
raise ShapeError on dimension mismatches.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

# Classification losses are floored at this value so downstream loss ratios
# and log-ratios stay finite even for perfect predictions.
EPS_LOSS_FLOOR = 1e-6


class ShapeError(ValueError):
    """Raised when operand dimensions do not compose."""


def as_vec(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def as_mat(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def affine(W: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """W @ x + b with explicit shape checking."""
    W = as_mat(W)
    x = as_vec(x)
    b = as_vec(b)
    if W.shape[1] != x.shape[0]:
        raise ShapeError(f"matrix {W.shape} cannot multiply vector {x.shape}")
    if W.shape[0] != b.shape[0]:
        raise ShapeError(f"matrix {W.shape} cannot add bias {b.shape}")
    return W @ x + b


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Logistic function via the tanh identity, stable for any magnitude:
    exp never overflows and saturation lands exactly on 0.0 / 1.0."""
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def tanh(z: np.ndarray) -> np.ndarray:
    return np.tanh(np.asarray(z, dtype=np.float64))


def softmax(z: np.ndarray) -> np.ndarray:
    """Probability vector exp(z - max z) / sum; shift-invariant and overflow-safe."""
    z = as_vec(z)
    if not np.all(np.isfinite(z)):
        raise ValueError(f"softmax input must be finite, got {z}")
    shifted = z - np.max(z)
    e = np.exp(shifted)
    return e / np.sum(e)


def cross_entropy(p: np.ndarray, label: int) -> float:
    """Floored negative log-likelihood: max(-ln p[label], EPS_LOSS_FLOOR).

    The floor keeps the loss strictly positive so callers may divide by it
    or take its logarithm.
    """
    p = as_vec(p)
    if not 0 <= label < p.shape[0]:
        raise IndexError(f"label {label} out of range for {p.shape[0]} classes")
    return max(-float(np.log(p[label])), EPS_LOSS_FLOOR)


def finite_diff(f: Callable[[np.ndarray], float], theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    theta = as_vec(theta)
    grad = np.empty_like(theta)
    for i in range(theta.shape[0]):
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += h
        tm[i] -= h
        grad[i] = (f(tp) - f(tm)) / (2.0 * h)
    return grad
