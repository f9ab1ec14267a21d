"""Pure-Python dual active-set kernel (Goldfarb-Idnani with identity Hessian).

Solves ``min 1/2 |u - u_ref|^2  s.t.  G u >= h``.  Mirrors ``_kernel.pyx``
step for step; the compiled module is preferred when it imports.
"""

import math

import numpy as np

OPTIMAL, INFEASIBLE, MAX_ITER = 0, 1, 2


def _basis(G, active, n):
    """Modified Gram-Schmidt of the active normals: rows of Q, upper-triangular R."""
    q = len(active)
    Q = np.zeros((q, n))
    R = np.zeros((q, q))
    for c, idx in enumerate(active):
        v = G[idx].copy()
        for l in range(c):
            R[l, c] = Q[l] @ v
            v -= R[l, c] * Q[l]
        R[c, c] = math.sqrt(v @ v)
        Q[c] = v / R[c, c]
    return Q, R


def _polish(G, h, x, active, mult, n, passes=2):
    """Residual correction on the final active set (helps near-parallel rows)."""
    q = len(active)
    if q == 0:
        return x
    Q, R = _basis(G, active, n)
    for _ in range(passes):
        res = [h[active[l]] - G[active[l]] @ x for l in range(q)]
        # R^T w = res, then x += Q^T w and mult += R^{-1} w.
        w = np.zeros(q)
        for l in range(q):
            acc = res[l]
            for c in range(l):
                acc -= R[c, l] * w[c]
            w[l] = acc / R[l, l]
        x = x + Q.T @ w
        for l in range(q - 1, -1, -1):
            acc = w[l]
            for c in range(l + 1, q):
                acc -= R[l, c] * w[c]
            w[l] = acc / R[l, l]
            mult[l] += w[l]
    return x


def solve_kernel(G, h, u_ref, feas_tol, zero_tol, max_iter):
    m, n = G.shape
    x = np.array(u_ref, dtype=float)
    active = []
    mult = []
    iters = 0
    while True:
        s = G @ x - h
        if m == 0:
            return OPTIMAL, x, np.array(active, dtype=np.intp), np.array(mult), iters, None
        p = int(np.argmin(s))
        if s[p] >= -feas_tol:
            x = _polish(G, h, x, active, mult, n)
            return OPTIMAL, x, np.array(active, dtype=np.intp), np.array(mult), iters, None
        normal = G[p]
        u_p = 0.0
        nn = normal @ normal
        while True:
            iters += 1
            if iters > max_iter:
                return MAX_ITER, x, np.array(active, dtype=np.intp), np.array(mult), iters, None
            q = len(active)
            z = normal.copy()
            d = np.zeros(q)
            if q:
                Q, R = _basis(G, active, n)
                for l in range(q):
                    d[l] = Q[l] @ z
                    z -= d[l] * Q[l]
            r = np.zeros(q)
            for l in range(q - 1, -1, -1):
                acc = d[l]
                for c in range(l + 1, q):
                    acc -= R[l, c] * r[c]
                r[l] = acc / R[l, l]
            t1 = math.inf
            k = -1
            for l in range(q):
                if r[l] > zero_tol:
                    ratio = mult[l] / r[l]
                    if ratio < t1 or (k >= 0 and ratio == t1 and active[l] < active[k]):
                        t1, k = ratio, l
            zz = z @ z
            t2 = math.inf
            if q < n and zz > zero_tol * zero_tol * nn:
                t2 = -(normal @ x - h[p]) / zz
            if t1 == math.inf and t2 == math.inf:
                ray = np.zeros(m)
                for l in range(q):
                    ray[active[l]] = -r[l]
                ray[p] = 1.0
                return INFEASIBLE, x, np.array(active, dtype=np.intp), np.array(mult), iters, ray
            t = min(t1, t2)
            if t2 < math.inf:
                x = x + t * z
            for l in range(q):
                mult[l] -= t * r[l]
            u_p += t
            if t2 <= t1:
                active.append(p)
                mult.append(u_p)
                break
            del active[k]
            del mult[k]
