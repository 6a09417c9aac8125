# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled one-sided Jacobi rotation sweeps.

Mirrors ``consolidate._jacobi_py.rotate`` exactly; see that module for the
algorithm description.
"""

from libc.math cimport sqrt, fabs


def rotate(double[:, ::1] w, double[:, ::1] v, double tol, int max_sweeps):
    cdef Py_ssize_t n = w.shape[0]
    cdef Py_ssize_t m = w.shape[1]
    cdef Py_ssize_t nv = v.shape[1]
    cdef Py_ssize_t p, q, i
    cdef double alpha, beta, gamma, zeta, t, c, s, x, y
    cdef int sweep, rotated
    for sweep in range(max_sweeps):
        rotated = 0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    x = w[p, i]
                    y = w[q, i]
                    alpha += x * x
                    beta += y * y
                    gamma += x * y
                if gamma == 0.0 or fabs(gamma) <= tol * sqrt(alpha) * sqrt(beta):
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                if fabs(zeta) > 1e150:
                    t = 0.5 / zeta
                elif zeta >= 0.0:
                    t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    x = w[p, i]
                    y = w[q, i]
                    w[p, i] = c * x - s * y
                    w[q, i] = s * x + c * y
                for i in range(nv):
                    x = v[p, i]
                    y = v[q, i]
                    v[p, i] = c * x - s * y
                    v[q, i] = s * x + c * y
                rotated = 1
        if not rotated:
            return sweep + 1
    return max_sweeps
