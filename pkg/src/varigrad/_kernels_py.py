"""Pure numpy implementation of the hot kernels.

Mirrors ``_kernels.pyx`` function for function. Integer outputs (Philox
blocks, uniforms) are bit-identical to the compiled path; normals go through
``log``/``cos``/``sin`` and may differ from libm in the last ulp.
"""

import numpy as np

_MASK32 = np.uint64(0xFFFFFFFF)
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_ROUNDS = 10

_TWO_NEG52 = 2.0 ** -52
_TWO_PI = 2.0 * np.pi


def philox4x32(seed, stream, counters):
    """Philox4x32-10 blocks for the given 64-bit block counters.

    The 128-bit Philox counter is (counter_lo, counter_hi, stream_lo,
    stream_hi) and the key is the 64-bit seed. Returns a uint32 array of
    shape (n, 4).
    """
    ctr = np.asarray(counters, dtype=np.uint64).ravel()
    c0 = ctr & _MASK32
    c1 = ctr >> np.uint64(32)
    c2 = np.full_like(ctr, stream & 0xFFFFFFFF)
    c3 = np.full_like(ctr, stream >> 32)
    k0 = seed & 0xFFFFFFFF
    k1 = seed >> 32
    for r in range(_ROUNDS):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> np.uint64(32), p0 & _MASK32
        hi1, lo1 = p1 >> np.uint64(32), p1 & _MASK32
        c0 = hi1 ^ c1 ^ np.uint64(k0)
        c1 = lo1
        c2 = hi0 ^ c3 ^ np.uint64(k1)
        c3 = lo0
        if r + 1 < _ROUNDS:
            k0 = (k0 + _W0) & 0xFFFFFFFF
            k1 = (k1 + _W1) & 0xFFFFFFFF
    out = np.empty((ctr.size, 4), dtype=np.uint32)
    out[:, 0] = c0
    out[:, 1] = c1
    out[:, 2] = c2
    out[:, 3] = c3
    return out


def _uniform_pairs(blocks):
    # 52 random bits per uniform; (k + 0.5) * 2**-52 is exact and lies in (0, 1)
    b = blocks.astype(np.uint64)
    k_a = ((b[:, 0] >> np.uint64(6)) << np.uint64(26)) | (b[:, 1] >> np.uint64(6))
    k_b = ((b[:, 2] >> np.uint64(6)) << np.uint64(26)) | (b[:, 3] >> np.uint64(6))
    u1 = (k_a.astype(np.float64) + 0.5) * _TWO_NEG52
    u2 = (k_b.astype(np.float64) + 0.5) * _TWO_NEG52
    return u1, u2


def uniforms(seed, stream, counter, n):
    """``n`` uniforms in (0, 1), two per block starting at ``counter``."""
    nblocks = (n + 1) // 2
    blocks = philox4x32(seed, stream, np.arange(counter, counter + nblocks, dtype=np.uint64))
    u1, u2 = _uniform_pairs(blocks)
    out = np.empty(2 * nblocks)
    out[0::2] = u1
    out[1::2] = u2
    return out[:n]


def normals(seed, stream, counter, n):
    """``n`` standard normals by Box-Muller, two per block starting at ``counter``."""
    nblocks = (n + 1) // 2
    blocks = philox4x32(seed, stream, np.arange(counter, counter + nblocks, dtype=np.uint64))
    u1, u2 = _uniform_pairs(blocks)
    r = np.sqrt(-2.0 * np.log(u1))
    t = _TWO_PI * u2
    out = np.empty(2 * nblocks)
    out[0::2] = r * np.cos(t)
    out[1::2] = r * np.sin(t)
    return out[:n]


def datapoint_forward(A, theta, sqrt_alpha, seed, stream, counter, blocks_per_row):
    """Rows of ``A @ W_m`` with an independent weight sample ``W_m`` per row.

    ``W_m = theta * (1 + sqrt_alpha * eps_m)`` where ``eps_m`` is the K*L
    block of normals starting at ``counter + m * blocks_per_row``.
    """
    M, K = A.shape
    L = theta.shape[1]
    out = np.empty((M, L))
    for m in range(M):
        eps = normals(seed, stream, counter + m * blocks_per_row, K * L).reshape(K, L)
        out[m] = A[m] @ (theta * (1.0 + sqrt_alpha * eps))
    return out


def datapoint_backward(A, theta, sqrt_alpha, dB, seed, stream, counter, blocks_per_row):
    """Gradients of ``datapoint_forward`` given the upstream gradient ``dB``.

    Returns (d_theta, d_log_alpha, d_A) with d_log_alpha at full K x L
    resolution; the caller reduces it to the posterior's granularity.
    """
    M, K = A.shape
    L = theta.shape[1]
    d_theta = np.zeros((K, L))
    d_log_alpha = np.zeros((K, L))
    d_A = np.empty((M, K))
    for m in range(M):
        eps = normals(seed, stream, counter + m * blocks_per_row, K * L).reshape(K, L)
        noise = sqrt_alpha * eps
        W = theta * (1.0 + noise)
        dW = np.outer(A[m], dB[m])
        d_theta += dW * (1.0 + noise)
        d_log_alpha += dW * theta * noise
        d_A[m] = W @ dB[m]
    d_log_alpha *= 0.5
    return d_theta, d_log_alpha, d_A
