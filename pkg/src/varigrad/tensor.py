"""Dense float64 matrix helpers and counter-based random streams.

Matrices are plain C-contiguous ``numpy.float64`` arrays; the helpers here
only add the shape/domain checks the rest of the package relies on.
"""

import math

import numpy as np

from . import kernels
from .errors import DomainError, ShapeError

_U64 = 1 << 64


def as_matrix(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, w):
    a = as_matrix(a)
    w = as_matrix(w)
    if a.shape[1] != w.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {w.shape}")
    return a @ w


def hadamard(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard needs equal shapes, got {a.shape} and {b.shape}")
    return a * b


def elementwise(a, f):
    return np.ascontiguousarray(f(np.asarray(a, dtype=np.float64)), dtype=np.float64)


def square(a):
    return elementwise(a, np.square)


def sqrt(a):
    a = np.asarray(a, dtype=np.float64)
    if np.any(a < 0):
        raise DomainError("sqrt of a negative entry")
    return np.sqrt(a)


def _check_u64(name, value):
    value = int(value)
    if not 0 <= value < _U64:
        raise ValueError(f"{name} must be an unsigned 64-bit integer, got {value}")
    return value


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Every draw is a pure function of ``(seed, stream_id, counter)``; the
    stream only remembers how many Philox blocks it has consumed. One block
    yields two normals or two uniforms. Streams are single-owner: derive a
    child with :meth:`child` rather than sharing one across workers.
    """

    def __init__(self, seed, stream_id=0, counter=0):
        self.seed = _check_u64("seed", seed)
        self.stream_id = _check_u64("stream_id", stream_id)
        self.counter = _check_u64("counter", counter)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"

    def child(self, stream_id):
        return RngStream(self.seed, stream_id)

    def state(self):
        return (self.seed, self.stream_id, self.counter)

    def reserve(self, nblocks):
        """Claim ``nblocks`` blocks and return the first counter of the range."""
        start = self.counter
        self.counter = _check_u64("counter", self.counter + int(nblocks))
        return start

    def normal(self, shape):
        shape = _shape(shape)
        n = math.prod(shape)
        start = self.reserve((n + 1) // 2)
        return kernels.normals(self.seed, self.stream_id, start, n).reshape(shape)

    def uniform(self, shape):
        shape = _shape(shape)
        n = math.prod(shape)
        start = self.reserve((n + 1) // 2)
        return kernels.uniforms(self.seed, self.stream_id, start, n).reshape(shape)

    def integers(self, high, size):
        """Uniform integers in ``[0, high)``; bias is below ``high / 2**52``."""
        if high <= 0:
            raise DomainError("high must be positive")
        idx = np.floor(self.uniform(size) * high).astype(np.int64)
        return np.minimum(idx, high - 1)

    def permutation(self, n):
        return np.argsort(self.uniform(n), kind="stable")

    def bernoulli(self, prob, shape):
        return (self.uniform(shape) < prob).astype(np.float64)


def _shape(shape):
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative dimension in {shape}")
    return shape


def sample_standard_normal(shape, rng):
    shape = _shape(shape)
    if any(s == 0 for s in shape):
        raise ShapeError(f"shape must be positive, got {shape}")
    return rng.normal(shape)
