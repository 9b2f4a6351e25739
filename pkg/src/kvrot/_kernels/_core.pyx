# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels.

Floating-point operation order mirrors _ref.py exactly (same butterfly
schedule, same rounding formula, same float32 casts), so outputs are
bit-identical to the numpy backend. Keep in sync with _ref.py.
"""

from libc.math cimport fabs, floor, copysign, sqrt

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline double _round_away(double t) nogil:
    return copysign(floor(fabs(t) + 0.5), t)


def fwht_rows(double[:, ::1] x, Py_ssize_t order):
    """In-place orthonormal Walsh-Hadamard transform on blocks of columns."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t half, i, b, j, k, base
    cdef double a, c, inv
    if order == 1:
        return
    inv = 1.0 / sqrt(<double> order)
    with nogil:
        for i in range(n):
            for b in range(d // order):
                base = b * order
                half = 1
                while half < order:
                    j = 0
                    while j < order:
                        for k in range(base + j, base + j + half):
                            a = x[i, k]
                            c = x[i, k + half]
                            x[i, k] = a + c
                            x[i, k + half] = a - c
                        j += 2 * half
                    half *= 2
                for k in range(base, base + order):
                    x[i, k] = x[i, k] * inv


def pack_rows(const unsigned char[:, ::1] nibbles):
    cdef Py_ssize_t n = nibbles.shape[0]
    cdef Py_ssize_t d = nibbles.shape[1]
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] out = np.empty((n, d // 2), dtype=np.uint8)
    cdef unsigned char[:, ::1] o = out
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            for j in range(d // 2):
                o[i, j] = nibbles[i, 2 * j] | (nibbles[i, 2 * j + 1] << 4)
    return out


def unpack_rows(const unsigned char[:, ::1] packed, Py_ssize_t logical_len):
    cdef Py_ssize_t n = packed.shape[0]
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] out = np.empty((n, logical_len), dtype=np.uint8)
    cdef unsigned char[:, ::1] o = out
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            for j in range(logical_len // 2):
                o[i, 2 * j] = packed[i, j] & 0x0F
                o[i, 2 * j + 1] = packed[i, j] >> 4
    return out


def quantize_rows(double[:, ::1] x):
    """Asymmetric INT4 row quantization; see _ref.quantize_rows for contract."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] packed = np.empty((n, d // 2), dtype=np.uint8)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] scale = np.empty(n, dtype=np.float32)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] zp = np.empty(n, dtype=np.uint8)
    cdef unsigned char[:, ::1] p = packed
    cdef float[::1] s = scale
    cdef unsigned char[::1] z = zp
    cdef Py_ssize_t i, j
    cdef double mn, mx, s64, zf, t, v
    cdef float s32
    cdef unsigned char lo, hi
    with nogil:
        for i in range(n):
            mn = x[i, 0]
            mx = x[i, 0]
            for j in range(1, d):
                if x[i, j] < mn:
                    mn = x[i, j]
                if x[i, j] > mx:
                    mx = x[i, j]
            s32 = <float> ((mx - mn) / 15.0)
            if s32 == 0.0:
                s[i] = <float> mn
                z[i] = 0xFF
                for j in range(d // 2):
                    p[i, j] = 0
                continue
            s64 = <double> s32
            zf = _round_away(-mn / s64)
            if zf < 0.0:
                zf = 0.0
            elif zf > 15.0:
                zf = 15.0
            s[i] = s32
            z[i] = <unsigned char> zf
            for j in range(d // 2):
                t = x[i, 2 * j] / s64
                v = _round_away(t) + zf
                if v < 0.0:
                    v = 0.0
                elif v > 15.0:
                    v = 15.0
                lo = <unsigned char> v
                t = x[i, 2 * j + 1] / s64
                v = _round_away(t) + zf
                if v < 0.0:
                    v = 0.0
                elif v > 15.0:
                    v = 15.0
                hi = <unsigned char> v
                p[i, j] = lo | (hi << 4)
    return packed, scale, zp


def dequantize_rows(
    const unsigned char[:, ::1] packed,
    const float[::1] scale,
    const unsigned char[::1] zp,
    Py_ssize_t logical_len,
):
    """Reconstruct float64 rows: s * (q - z); constant rows return the offset."""
    cdef Py_ssize_t n = packed.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n, logical_len), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double s64, zf
    cdef unsigned char byte
    with nogil:
        for i in range(n):
            s64 = <double> scale[i]
            if zp[i] == 0xFF:
                for j in range(logical_len):
                    o[i, j] = s64
                continue
            zf = <double> zp[i]
            for j in range(logical_len // 2):
                byte = packed[i, j]
                o[i, 2 * j] = s64 * ((<double> (byte & 0x0F)) - zf)
                o[i, 2 * j + 1] = s64 * ((<double> (byte >> 4)) - zf)
    return out
