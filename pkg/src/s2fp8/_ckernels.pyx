# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels.  Same contracts as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport ldexp, fabs
from libc.stdint cimport uint32_t, int64_t

cnp.import_array()

NAME = "cython"


cdef inline float _round_one(float v, int emin, int man_bits, double max_normal) nogil:
    cdef uint32_t bits = (<uint32_t*>&v)[0]
    cdef bint negative = (bits >> 31) != 0
    cdef int exp32 = (bits >> 23) & 0xFF
    cdef int64_t sig = bits & 0x7FFFFF
    cdef int lsb, unbiased, quantum, shift
    cdef int64_t kept, rem, half
    cdef double mag

    if exp32 != 0:
        sig = sig | 0x800000
        lsb = exp32 - 150
        unbiased = exp32 - 127
    else:
        lsb = -149
        unbiased = emin - 1
    quantum = (unbiased if unbiased > emin else emin) - man_bits
    shift = quantum - lsb
    if shift <= 0:
        mag = fabs(<double>v)
    else:
        if shift > 25:
            shift = 25
        kept = sig >> shift
        rem = sig & ((<int64_t>1 << shift) - 1)
        half = <int64_t>1 << (shift - 1)
        if rem > half or (rem == half and (kept & 1)):
            kept += 1
        mag = ldexp(<double>kept, quantum)
    if mag > max_normal:
        mag = max_normal
    return <float>(-mag if negative else mag)


def round_to_format(x, int exp_bits, int man_bits):
    src = np.ascontiguousarray(x, dtype=np.float32).reshape(-1)
    dst = np.empty_like(src)
    cdef int bias = (1 << (exp_bits - 1)) - 1
    cdef int emin = 1 - bias
    cdef double max_normal = (2.0 - ldexp(1.0, -man_bits)) * ldexp(1.0, bias)
    cdef Py_ssize_t i, n = src.shape[0]
    cdef const float[::1] s = src
    cdef float[::1] d = dst
    with nogil:
        for i in range(n):
            d[i] = _round_one(s[i], emin, man_bits, max_normal)
    return dst.reshape(np.shape(x))


def gemm(a, b):
    A = np.ascontiguousarray(a, dtype=np.float32)
    B = np.ascontiguousarray(b, dtype=np.float32)
    cdef Py_ssize_t m = A.shape[0], k = A.shape[1], n = B.shape[1]
    C = np.empty((m, n), dtype=np.float32)
    cdef double[::1] acc = np.empty(n, dtype=np.float64)
    cdef const float[:, ::1] av = A
    cdef const float[:, ::1] bv = B
    cdef float[:, ::1] cv = C
    cdef Py_ssize_t i, j, kk
    cdef double aik
    with nogil:
        for i in range(m):
            for j in range(n):
                acc[j] = 0.0
            # i-k-j order keeps each acc[j] summed in increasing k
            for kk in range(k):
                aik = <double>av[i, kk]
                for j in range(n):
                    acc[j] = acc[j] + aik * <double>bv[kk, j]
            for j in range(n):
                cv[i, j] = <float>acc[j]
    return C
