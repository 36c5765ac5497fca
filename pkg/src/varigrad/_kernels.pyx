# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: Philox4x32-10 streams, Box-Muller normals and the
per-datapoint weight-sampling layer pass.

Same signatures and semantics as ``_kernels_py``. The per-datapoint pass
regenerates each row's K x L weight noise on the fly instead of
materialising an M x K x L tensor.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, sqrt, cos, sin
from libc.stdint cimport uint32_t, uint64_t

cnp.import_array()

cdef uint64_t _M0 = <uint64_t>3528531795u  # 0xD2511F53
cdef uint64_t _M1 = <uint64_t>3449720151u  # 0xCD9E8D57
cdef uint32_t _W0 = 2654435769u  # 0x9E3779B9
cdef uint32_t _W1 = 3144134277u  # 0xBB67AE85
cdef double _TWO_NEG52 = 2.220446049250313e-16  # 2**-52
cdef double _TWO_PI = 6.283185307179586


cdef inline void _philox(uint64_t seed, uint64_t stream, uint64_t ctr,
                         uint32_t* out) noexcept nogil:
    cdef uint32_t c0 = <uint32_t>ctr
    cdef uint32_t c1 = <uint32_t>(ctr >> 32)
    cdef uint32_t c2 = <uint32_t>stream
    cdef uint32_t c3 = <uint32_t>(stream >> 32)
    cdef uint32_t k0 = <uint32_t>seed
    cdef uint32_t k1 = <uint32_t>(seed >> 32)
    cdef uint64_t p0, p1
    cdef int r
    for r in range(10):
        p0 = _M0 * <uint64_t>c0
        p1 = _M1 * <uint64_t>c2
        c0 = <uint32_t>(p1 >> 32) ^ c1 ^ k0
        c1 = <uint32_t>p1
        c2 = <uint32_t>(p0 >> 32) ^ c3 ^ k1
        c3 = <uint32_t>p0
        k0 = k0 + _W0
        k1 = k1 + _W1
    out[0] = c0
    out[1] = c1
    out[2] = c2
    out[3] = c3


cdef inline void _normal_pair(uint64_t seed, uint64_t stream, uint64_t ctr,
                              double* z) noexcept nogil:
    cdef uint32_t b[4]
    _philox(seed, stream, ctr, b)
    cdef uint64_t ka = ((<uint64_t>(b[0] >> 6)) << 26) | (b[1] >> 6)
    cdef uint64_t kb = ((<uint64_t>(b[2] >> 6)) << 26) | (b[3] >> 6)
    cdef double u1 = (<double>ka + 0.5) * _TWO_NEG52
    cdef double u2 = (<double>kb + 0.5) * _TWO_NEG52
    cdef double r = sqrt(-2.0 * log(u1))
    cdef double t = _TWO_PI * u2
    z[0] = r * cos(t)
    z[1] = r * sin(t)


cdef void _fill_normals(uint64_t seed, uint64_t stream, uint64_t counter,
                        double* out, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i = 0
    cdef double z[2]
    while i + 1 < n:
        _normal_pair(seed, stream, counter, out + i)
        counter += 1
        i += 2
    if i < n:
        _normal_pair(seed, stream, counter, z)
        out[i] = z[0]


def philox4x32(uint64_t seed, uint64_t stream, counters):
    cdef cnp.uint64_t[::1] ctr = np.ascontiguousarray(counters, dtype=np.uint64).ravel()
    cdef Py_ssize_t n = ctr.shape[0], i
    out = np.empty((n, 4), dtype=np.uint32)
    cdef cnp.uint32_t[:, ::1] o = out
    with nogil:
        for i in range(n):
            _philox(seed, stream, ctr[i], &o[i, 0])
    return out


def normals(uint64_t seed, uint64_t stream, uint64_t counter, Py_ssize_t n):
    out = np.empty(n)
    cdef double[::1] o = out
    if n > 0:
        with nogil:
            _fill_normals(seed, stream, counter, &o[0], n)
    return out


def uniforms(uint64_t seed, uint64_t stream, uint64_t counter, Py_ssize_t n):
    out = np.empty(n)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    cdef uint32_t b[4]
    with nogil:
        for i in range(0, n, 2):
            _philox(seed, stream, counter + <uint64_t>(i // 2), b)
            o[i] = (<double>(((<uint64_t>(b[0] >> 6)) << 26) | (b[1] >> 6)) + 0.5) * _TWO_NEG52
            if i + 1 < n:
                o[i + 1] = (<double>(((<uint64_t>(b[2] >> 6)) << 26) | (b[3] >> 6)) + 0.5) * _TWO_NEG52
    return out


def datapoint_forward(const double[:, ::1] A, const double[:, ::1] theta,
                      const double[:, ::1] sqrt_alpha, uint64_t seed,
                      uint64_t stream, uint64_t counter, uint64_t blocks_per_row):
    cdef Py_ssize_t M = A.shape[0], K = A.shape[1], L = theta.shape[1]
    cdef Py_ssize_t m, i, j, e
    out = np.zeros((M, L))
    cdef double[:, ::1] B = out
    cdef double[::1] eps = np.empty(K * L + 1)
    cdef double a
    with nogil:
        for m in range(M):
            _fill_normals(seed, stream, counter + m * blocks_per_row, &eps[0], K * L)
            for i in range(K):
                a = A[m, i]
                if a == 0.0:
                    continue
                e = i * L
                for j in range(L):
                    B[m, j] += a * theta[i, j] * (1.0 + sqrt_alpha[i, j] * eps[e + j])
    return out


def datapoint_backward(const double[:, ::1] A, const double[:, ::1] theta,
                       const double[:, ::1] sqrt_alpha, const double[:, ::1] dB,
                       uint64_t seed, uint64_t stream, uint64_t counter,
                       uint64_t blocks_per_row):
    cdef Py_ssize_t M = A.shape[0], K = A.shape[1], L = theta.shape[1]
    cdef Py_ssize_t m, i, j, e
    d_theta_arr = np.zeros((K, L))
    d_la_arr = np.zeros((K, L))
    d_A_arr = np.zeros((M, K))
    cdef double[:, ::1] d_theta = d_theta_arr
    cdef double[:, ::1] d_la = d_la_arr
    cdef double[:, ::1] d_A = d_A_arr
    cdef double[::1] eps = np.empty(K * L + 1)
    cdef double a, g, noise, th, acc
    with nogil:
        for m in range(M):
            _fill_normals(seed, stream, counter + m * blocks_per_row, &eps[0], K * L)
            for i in range(K):
                a = A[m, i]
                e = i * L
                acc = 0.0
                for j in range(L):
                    noise = sqrt_alpha[i, j] * eps[e + j]
                    th = theta[i, j]
                    g = dB[m, j]
                    acc += g * th * (1.0 + noise)
                    if a != 0.0:
                        d_theta[i, j] += a * g * (1.0 + noise)
                        d_la[i, j] += a * g * th * noise
                d_A[m, i] = acc
        for i in range(K):
            for j in range(L):
                d_la[i, j] *= 0.5
    return d_theta_arr, d_la_arr, d_A_arr
