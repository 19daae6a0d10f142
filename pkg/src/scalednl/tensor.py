"""Dense float64 tensor helpers and a seeded random source.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order.
Every function here returns a new array and never writes to its inputs.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DimensionError",
    "Rng",
    "as_tensor",
    "matmul",
    "softmax_rows",
    "row_norms",
    "transpose",
    "scale",
    "add",
    "mean",
    "variance",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


def as_tensor(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    """Matrix product of ``a`` (M x K) and ``b`` (K x N)."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction, so finite logits never overflow."""
    z = as_tensor(logits)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def row_norms(m) -> np.ndarray:
    m = as_tensor(m)
    return np.sqrt(np.einsum("...ij,...ij->...i", m, m))


def transpose(m) -> np.ndarray:
    return np.ascontiguousarray(as_tensor(m).T)


def scale(m, alpha: float) -> np.ndarray:
    return as_tensor(m) * float(alpha)


def add(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cannot add {a.shape} and {b.shape}")
    return a + b


def mean(m) -> float:
    return float(np.mean(as_tensor(m)))


def variance(m) -> float:
    """Population variance over all elements."""
    return float(np.var(as_tensor(m)))


class Rng:
    """Seeded random source.

    Uniforms come from numpy's PCG64 bit generator, whose output stream for
    a given seed is fixed across platforms and numpy releases. Standard
    normals are produced by Box-Muller over those uniforms (both the cosine
    and sine branch are used), so the Gaussian stream is defined here rather
    than by numpy's ziggurat sampler.
    """

    def __init__(self, seed: int = 0):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, offset: int) -> "Rng":
        """Independent stream for sub-task ``offset`` (e.g. a trial index)."""
        return Rng((self.seed + offset) % 2**64)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return low + (high - low) * self._gen.random(shape)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1], keeps log finite
        u2 = self._gen.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        t = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(t)
        z[1::2] = r * np.sin(t)
        return std * z[:n].reshape(shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)
