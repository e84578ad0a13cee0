# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the ingest and graph hot loops.

Must stay behaviourally identical to :mod:`stflow._pykernels`.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport asin, cos, exp, sin, sqrt
from libc.stdint cimport int64_t

cnp.import_array()

cdef int64_t MALFORMED = -9223372036854775807 - 1
cdef double DEG2RAD = 0.017453292519943295


cdef inline int _digit(Py_UCS4 c):
    if 48 <= c <= 57:  # '0'..'9'
        return <int>c - 48
    return -1


cdef inline int _num(unicode s, Py_ssize_t start, Py_ssize_t width):
    cdef int value = 0
    cdef int d
    cdef Py_ssize_t k
    for k in range(start, start + width):
        d = _digit(s[k])
        if d < 0:
            return -1
        value = value * 10 + d
    return value


cdef inline int _days_in_month(int year, int month):
    if month == 2:
        if (year % 4 == 0 and year % 100 != 0) or year % 400 == 0:
            return 29
        return 28
    if month == 4 or month == 6 or month == 9 or month == 11:
        return 30
    return 31


cdef inline int64_t _days_from_civil(int64_t y, int64_t m, int64_t d):
    # proleptic Gregorian day count relative to 1970-01-01
    cdef int64_t era, yoe, doy, doe
    if m <= 2:
        y -= 1
    era = (y if y >= 0 else y - 399) // 400
    yoe = y - era * 400
    doy = (153 * (m + (-3 if m > 2 else 9)) + 2) // 5 + d - 1
    doe = yoe * 365 + yoe // 4 - yoe // 100 + doy
    return era * 146097 + doe - 719468


cdef int64_t _parse_one(unicode s):
    cdef Py_ssize_t n = len(s)
    cdef Py_ssize_t k
    cdef int year, month, day, hour, minute, second
    cdef Py_UCS4 sep
    if n < 19:
        return MALFORMED
    if n > 19:
        if n == 20 or s[19] != 46:  # '.'
            return MALFORMED
        for k in range(20, n):
            if _digit(s[k]) < 0:
                return MALFORMED
    sep = s[10]
    # '-' 45, ' ' 32, 'T' 84, ':' 58
    if s[4] != 45 or s[7] != 45 or (sep != 32 and sep != 84):
        return MALFORMED
    if s[13] != 58 or s[16] != 58:
        return MALFORMED
    year = _num(s, 0, 4)
    month = _num(s, 5, 2)
    day = _num(s, 8, 2)
    hour = _num(s, 11, 2)
    minute = _num(s, 14, 2)
    second = _num(s, 17, 2)
    if year < 1 or month < 1 or month > 12 or day < 1:
        return MALFORMED
    if day > _days_in_month(year, month):
        return MALFORMED
    if hour < 0 or hour > 23 or minute < 0 or minute > 59 or second < 0 or second > 59:
        return MALFORMED
    return _days_from_civil(year, month, day) * 86400 + hour * 3600 + minute * 60 + second


def parse_timestamps(list values):
    cdef Py_ssize_t i, n = len(values)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(n, dtype=np.int64)
    cdef object v
    for i in range(n):
        v = values[i]
        if type(v) is unicode:
            out[i] = _parse_one(<unicode>v)
        else:
            out[i] = MALFORMED
    return out


def bin_events(const int64_t[::1] times, const int64_t[::1] stations,
               int64_t origin, int64_t bin_seconds, int64_t[:, ::1] counts):
    cdef Py_ssize_t i, n = times.shape[0]
    cdef Py_ssize_t n_bins = counts.shape[0]
    cdef Py_ssize_t n_nodes = counts.shape[1]
    cdef int64_t offset, t, s
    cdef Py_ssize_t kept = 0
    for i in range(n):
        offset = times[i] - origin
        if offset < 0:
            continue
        t = offset // bin_seconds
        if t >= n_bins:
            continue
        s = stations[i]
        if s < 0 or s >= n_nodes:
            raise IndexError(f"station index {s} outside [0, {n_nodes})")
        counts[t, s] += 1
        kept += 1
    return kept


def haversine_matrix(const double[::1] lat, const double[::1] lng, double radius):
    cdef Py_ssize_t n = lat.shape[0]
    cdef Py_ssize_t i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] d = out
    cdef double s_lat, s_lng, a, val
    cdef double[::1] cos_lat = np.empty(n, dtype=np.float64)
    for i in range(n):
        cos_lat[i] = cos(lat[i] * DEG2RAD)
    for i in range(n):
        for j in range(i + 1, n):
            s_lat = sin((lat[j] - lat[i]) * DEG2RAD * 0.5)
            s_lng = sin((lng[j] - lng[i]) * DEG2RAD * 0.5)
            a = s_lat * s_lat + cos_lat[i] * cos_lat[j] * s_lng * s_lng
            if a > 1.0:
                a = 1.0
            val = 2.0 * radius * asin(sqrt(a))
            d[i, j] = val
            d[j, i] = val
    return out


ctypedef fused real:
    float
    double


def glu_forward(const real[:, ::1] x, real[:, ::1] out, real[:, ::1] gate):
    """Rows of ``x`` are ``[P | Q]``; writes ``P * sigmoid(Q)`` and the gate."""
    cdef Py_ssize_t rows = x.shape[0]
    cdef Py_ssize_t c = out.shape[1]
    cdef Py_ssize_t r, j
    cdef double s
    for r in range(rows):
        for j in range(c):
            s = 1.0 / (1.0 + exp(-<double>x[r, c + j]))
            gate[r, j] = <real>s
            out[r, j] = <real>(x[r, j] * s)


def glu_backward(const real[:, ::1] g, const real[:, ::1] x, const real[:, ::1] gate,
                 real[:, ::1] gx):
    cdef Py_ssize_t rows = g.shape[0]
    cdef Py_ssize_t c = g.shape[1]
    cdef Py_ssize_t r, j
    cdef real s, gs
    for r in range(rows):
        for j in range(c):
            s = gate[r, j]
            gs = g[r, j] * s
            gx[r, j] = gs
            gx[r, c + j] = gs * x[r, j] * (1 - s)
