# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled lattice kernels; same API as the numpy fallback in _pykernels."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, sqrt

cnp.import_array()


cdef inline void _weights(double pos, Py_ssize_t n, Py_ssize_t* start, double* w) noexcept nogil:
    cdef Py_ssize_t s0
    cdef double s
    if n >= 4:
        s0 = <Py_ssize_t>floor(pos) - 1
        if s0 < 0:
            s0 = 0
        elif s0 > n - 4:
            s0 = n - 4
        s = pos - s0
        w[0] = -(s - 1.0) * (s - 2.0) * (s - 3.0) / 6.0
        w[1] = s * (s - 2.0) * (s - 3.0) / 2.0
        w[2] = -s * (s - 1.0) * (s - 3.0) / 2.0
        w[3] = s * (s - 1.0) * (s - 2.0) / 6.0
        start[0] = s0
        return
    start[0] = 0
    s = pos
    w[0] = 0.0; w[1] = 0.0; w[2] = 0.0; w[3] = 0.0
    if n == 1:
        w[0] = 1.0
    elif n == 2:
        w[0] = 1.0 - s
        w[1] = s
    else:
        w[0] = (s - 1.0) * (s - 2.0) / 2.0
        w[1] = -s * (s - 2.0)
        w[2] = s * (s - 1.0) / 2.0


def cubic_stencil(double[::1] xq, double x_lo, double h, Py_ssize_t n):
    cdef Py_ssize_t m = xq.shape[0], i
    cdef cnp.ndarray[cnp.int64_t, ndim=1] start = np.empty(m, dtype=np.int64)
    cdef cnp.ndarray[double, ndim=2] w = np.empty((m, 4))
    cdef Py_ssize_t s0
    cdef double ww[4]
    for i in range(m):
        _weights((xq[i] - x_lo) / h, n, &s0, ww)
        start[i] = s0
        w[i, 0] = ww[0]; w[i, 1] = ww[1]; w[i, 2] = ww[2]; w[i, 3] = ww[3]
    return start, w


def gather(values, start, w):
    cdef double[:, ::1] v = np.ascontiguousarray(np.atleast_2d(values), dtype=float)
    cdef long long[::1] st = np.ascontiguousarray(start, dtype=np.int64)
    cdef double[:, ::1] ww = np.ascontiguousarray(w, dtype=float)
    cdef Py_ssize_t F = v.shape[0], n = v.shape[1], m = st.shape[0], i, f, q, top
    out = np.empty((F, m))
    cdef double[:, ::1] o = out
    cdef double acc
    top = 4 if n >= 4 else n
    for f in range(F):
        for i in range(m):
            acc = 0.0
            for q in range(top):
                acc += ww[i, q] * v[f, st[i] + q]
            o[f, i] = acc
    if np.ndim(values) == 1:
        return out[0]
    return out


def interp_many(double[:, ::1] values, double x_lo, double h, double[::1] xq):
    cdef Py_ssize_t F = values.shape[0], n = values.shape[1], m = xq.shape[0], i, f, q, top
    out = np.empty((F, m))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t s0
    cdef double ww[4]
    cdef double acc
    top = 4 if n >= 4 else n
    with nogil:
        for i in range(m):
            _weights((xq[i] - x_lo) / h, n, &s0, ww)
            for f in range(F):
                acc = 0.0
                for q in range(top):
                    acc = acc + ww[q] * values[f, s0 + q]
                o[f, i] = acc
    return out


cdef inline void _solve(double m11, double m12, double m21, double m22, double re, double rz,
                        double* eta, double* zeta) noexcept nogil:
    cdef double det = m11 * m22 - m12 * m21
    eta[0] = (re * m22 - m12 * rz) / det
    zeta[0] = (m11 * rz - m21 * re) / det


def poly_backward(Py_ssize_t N, double dt, long long[::1] start_p, double[:, ::1] w_p,
                  long long[::1] start_m, double[:, ::1] w_m, double[:, ::1] coef,
                  double[:, ::1] forcing, double[::1] lam_p, double[::1] lam_m,
                  double[::1] mu_p, double[::1] mu_m, double[:, ::1] terminal):
    cdef double r = sqrt(dt)
    cdef Py_ssize_t total = (N + 1) * (N + 2) // 2
    cdef Py_ssize_t inner = N * (N + 1) // 2
    eta_arr = np.zeros((4, total))
    zeta_arr = np.zeros((4, inner))
    cdef double[:, ::1] eta = eta_arr
    cdef double[:, ::1] zeta = zeta_arr
    cdef Py_ssize_t k, j, i, lo, hi, d, q
    cdef double vp[4]
    cdef double vm[4]
    cdef double plus[3]
    cdef double minus[3]
    cdef double A, At, m11, m12, m21, m22, E, D, f1, f2, f3, lp, lm, mp, mm
    cdef double a1, b1, g1, a2, b2, g2, a3, b3, g3
    for d in range(4):
        for j in range(N + 1):
            eta[d, inner + j] = terminal[d, j]
    with nogil:
        for k in range(N - 1, -1, -1):
            lo = k * (k + 1) // 2
            hi = (k + 1) * (k + 2) // 2
            for j in range(k + 1):
                i = lo + j
                for d in range(4):
                    vp[d] = 0.0
                    vm[d] = 0.0
                    for q in range(4):
                        if w_p[i, q] != 0.0:
                            vp[d] += w_p[i, q] * eta[d, hi + start_p[i] + q]
                        if w_m[i, q] != 0.0:
                            vm[d] += w_m[i, q] * eta[d, hi + start_m[i] + q]
                a1 = coef[0, i]; b1 = coef[1, i]; g1 = coef[2, i]
                a2 = coef[3, i]; b2 = coef[4, i]; g2 = coef[5, i]
                a3 = coef[6, i]; b3 = coef[7, i]; g3 = coef[8, i]
                A = 0.5 * (vp[0] + vm[0])
                At = (vp[0] - vm[0]) / (2.0 * r)
                m11 = 1.0 - (A * b1 + At * b2 + b3) * dt
                m12 = -(A * g1 + At * g2 + g3) * dt
                m21 = -(At * b1 * dt + A * b2)
                m22 = 1.0 - (At * g1 * dt + A * g2)
                _solve(m11, m12, m21, m22, A * (1.0 + a1 * dt) + At * a2 * dt + a3 * dt,
                       At * (1.0 + a1 * dt) + A * a2, &eta[0, i], &zeta[0, i])
                lp = lam_p[i]; lm = lam_m[i]; mp = mu_p[i]; mm = mu_m[i]
                plus[0] = vp[1] + vp[2] * mp + vp[3] * mp * mp
                plus[1] = vp[2] * lp + 2.0 * vp[3] * lp * mp
                plus[2] = vp[3] * lp * lp
                minus[0] = vm[1] + vm[2] * mm + vm[3] * mm * mm
                minus[1] = vm[2] * lm + 2.0 * vm[3] * lm * mm
                minus[2] = vm[3] * lm * lm
                for d in range(3):
                    E = 0.5 * (plus[d] + minus[d])
                    D = (plus[d] - minus[d]) / (2.0 * r)
                    f1 = forcing[d, i]; f2 = forcing[3 + d, i]; f3 = forcing[6 + d, i]
                    _solve(m11, m12, m21, m22, A * f1 * dt + At * f2 * dt + f3 * dt + E,
                           At * f1 * dt + A * f2 + D, &eta[1 + d, i], &zeta[1 + d, i])
    return eta_arr, zeta_arr
