# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled dual active-set kernel; same algorithm and pivot rules as ``_kernel_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef enum:
    OPTIMAL = 0
    INFEASIBLE = 1
    MAX_ITER = 2


cdef inline double _dot(const double* a, const double* b, Py_ssize_t n) nogil:
    cdef double acc = 0.0
    cdef Py_ssize_t i
    for i in range(n):
        acc += a[i] * b[i]
    return acc


cdef void _basis(const double[:, ::1] G, const Py_ssize_t* active, Py_ssize_t q,
                 Py_ssize_t n, double* Q, double* R, double* v) noexcept nogil:
    """Modified Gram-Schmidt: rows of Q and upper-triangular R (row stride n)."""
    cdef Py_ssize_t c, l, e
    cdef double acc
    for c in range(q):
        for e in range(n):
            v[e] = G[active[c], e]
        for l in range(c):
            acc = _dot(&Q[l * n], v, n)
            R[l * n + c] = acc
            for e in range(n):
                v[e] -= acc * Q[l * n + e]
        acc = sqrt(_dot(v, v, n))
        R[c * n + c] = acc
        for e in range(n):
            Q[c * n + e] = v[e] / acc


cdef void _polish(const double[:, ::1] G, const double[::1] h, double* x,
                  const Py_ssize_t* active, double* mult, Py_ssize_t q, Py_ssize_t n,
                  double* Q, double* R, double* v, double* w) noexcept nogil:
    """Residual correction on the final active set, as in ``_kernel_py._polish``."""
    cdef Py_ssize_t it, l, c, e
    cdef double acc
    _basis(G, active, q, n, Q, R, v)
    for it in range(2):
        for l in range(q):
            acc = h[active[l]] - _dot(&G[active[l], 0], x, n)
            for c in range(l):
                acc -= R[c * n + l] * w[c]
            w[l] = acc / R[l * n + l]
        for e in range(n):
            acc = 0.0
            for l in range(q):
                acc += Q[l * n + e] * w[l]
            x[e] += acc
        for l in range(q - 1, -1, -1):
            acc = w[l]
            for c in range(l + 1, q):
                acc -= R[l * n + c] * w[c]
            w[l] = acc / R[l * n + l]
            mult[l] += w[l]


def solve_kernel(const double[:, ::1] G, const double[::1] h, u_ref,
                 double feas_tol, double zero_tol, long max_iter):
    cdef Py_ssize_t m = G.shape[0]
    cdef Py_ssize_t n = G.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] x_arr = np.array(u_ref, dtype=np.float64)
    cdef double* x = <double*> x_arr.data
    cdef double* Q = <double*> malloc(n * n * sizeof(double))
    cdef double* R = <double*> malloc(n * n * sizeof(double))
    cdef double* v = <double*> malloc(n * sizeof(double))
    cdef double* z = <double*> malloc(n * sizeof(double))
    cdef double* d = <double*> malloc((n + 1) * sizeof(double))
    cdef double* r = <double*> malloc((n + 1) * sizeof(double))
    cdef double* mult = <double*> malloc((n + 1) * sizeof(double))
    cdef Py_ssize_t* active = <Py_ssize_t*> malloc((n + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t q = 0, p, i, l, c, k, e
    cdef long iters = 0
    cdef int status = -1
    cdef double smin, sv, u_p, nn, t1, t2, t, ratio, zz, acc
    cdef const double* normal
    ray = None
    try:
        while status < 0:
            if m == 0:
                status = OPTIMAL
                break
            p = 0
            smin = INFINITY
            for i in range(m):
                sv = _dot(&G[i, 0], x, n) - h[i]
                if sv < smin:
                    smin = sv
                    p = i
            if smin >= -feas_tol:
                status = OPTIMAL
                break
            normal = &G[p, 0]
            u_p = 0.0
            nn = _dot(normal, normal, n)
            while True:
                iters += 1
                if iters > max_iter:
                    status = MAX_ITER
                    break
                # Gram-Schmidt basis of active normals, then project the new normal.
                _basis(G, active, q, n, Q, R, v)
                for e in range(n):
                    z[e] = normal[e]
                for l in range(q):
                    d[l] = _dot(&Q[l * n], z, n)
                    for e in range(n):
                        z[e] -= d[l] * Q[l * n + e]
                for l in range(q - 1, -1, -1):
                    acc = d[l]
                    for c in range(l + 1, q):
                        acc -= R[l * n + c] * r[c]
                    r[l] = acc / R[l * n + l]
                t1 = INFINITY
                k = -1
                for l in range(q):
                    if r[l] > zero_tol:
                        ratio = mult[l] / r[l]
                        if ratio < t1 or (k >= 0 and ratio == t1 and active[l] < active[k]):
                            t1 = ratio
                            k = l
                zz = _dot(z, z, n)
                t2 = INFINITY
                if q < n and zz > zero_tol * zero_tol * nn:
                    t2 = -(_dot(normal, x, n) - h[p]) / zz
                if t1 == INFINITY and t2 == INFINITY:
                    ray = np.zeros(m)
                    for l in range(q):
                        ray[active[l]] = -r[l]
                    ray[p] = 1.0
                    status = INFEASIBLE
                    break
                t = t1 if t1 < t2 else t2
                if t2 < INFINITY:
                    for e in range(n):
                        x[e] += t * z[e]
                for l in range(q):
                    mult[l] -= t * r[l]
                u_p += t
                if t2 <= t1:
                    active[q] = p
                    mult[q] = u_p
                    q += 1
                    break
                for l in range(k, q - 1):
                    active[l] = active[l + 1]
                    mult[l] = mult[l + 1]
                q -= 1
        if status == OPTIMAL and q > 0:
            _polish(G, h, x, active, mult, q, n, Q, R, v, d)
        act = np.empty(q, dtype=np.intp)
        lam = np.empty(q)
        for l in range(q):
            act[l] = active[l]
            lam[l] = mult[l]
        return status, x_arr, act, lam, iters, ray
    finally:
        free(Q); free(R); free(v); free(z); free(d); free(r); free(mult); free(active)
