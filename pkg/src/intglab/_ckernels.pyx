# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: causal row softmax (forward/backward) and one-sided Jacobi."""
import numpy as np

from libc.math cimport exp, sqrt, fabs


def causal_softmax(const double[:, :, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], k = x.shape[2]
    cdef Py_ssize_t b, i, j, lim
    cdef double mx, s, inv
    out = np.zeros((m, n, k), dtype=np.float64)
    cdef double[:, :, ::1] y = out
    with nogil:
        for b in range(m):
            for i in range(n):
                lim = i + 1 if i + 1 < k else k
                mx = x[b, i, 0]
                for j in range(1, lim):
                    if x[b, i, j] > mx:
                        mx = x[b, i, j]
                s = 0.0
                for j in range(lim):
                    y[b, i, j] = exp(x[b, i, j] - mx)
                    s += y[b, i, j]
                inv = 1.0 / s
                for j in range(lim):
                    y[b, i, j] *= inv
    return out


def causal_softmax_backward(const double[:, :, ::1] y, const double[:, :, ::1] gy):
    cdef Py_ssize_t m = y.shape[0], n = y.shape[1], k = y.shape[2]
    cdef Py_ssize_t b, i, j, lim
    cdef double dot
    out = np.zeros((m, n, k), dtype=np.float64)
    cdef double[:, :, ::1] gx = out
    with nogil:
        for b in range(m):
            for i in range(n):
                lim = i + 1 if i + 1 < k else k
                dot = 0.0
                for j in range(lim):
                    dot += y[b, i, j] * gy[b, i, j]
                for j in range(lim):
                    gx[b, i, j] = y[b, i, j] * (gy[b, i, j] - dot)
    return out


def jacobi_singular_values(const double[:, ::1] a, double tol=1e-15, int max_sweeps=60):
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t p, q, i
    cdef int sweep, rotated
    cdef double alpha, beta, gamma, zeta, t, c, s, ap, aq
    # columns stored contiguously: w[col, row]
    work = np.ascontiguousarray(np.asarray(a).T, dtype=np.float64)
    cdef double[:, ::1] w = work
    with nogil:
        for sweep in range(max_sweeps):
            rotated = 0
            for p in range(n - 1):
                for q in range(p + 1, n):
                    alpha = 0.0
                    beta = 0.0
                    gamma = 0.0
                    for i in range(m):
                        alpha += w[p, i] * w[p, i]
                        beta += w[q, i] * w[q, i]
                        gamma += w[p, i] * w[q, i]
                    if gamma == 0.0 or fabs(gamma) <= tol * sqrt(alpha * beta):
                        continue
                    rotated = 1
                    zeta = (beta - alpha) / (2.0 * gamma)
                    if zeta >= 0.0:
                        t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                    else:
                        t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                    c = 1.0 / sqrt(1.0 + t * t)
                    s = c * t
                    for i in range(m):
                        ap = w[p, i]
                        aq = w[q, i]
                        w[p, i] = c * ap - s * aq
                        w[q, i] = s * ap + c * aq
            if not rotated:
                break
    sv = np.sqrt(np.einsum("ij,ij->i", work, work))
    return np.sort(sv)[::-1].copy()
