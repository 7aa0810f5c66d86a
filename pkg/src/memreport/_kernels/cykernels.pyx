# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels.

Must stay semantically identical to npkernels.py (same formulas in the same
order); tests/test_kernels.py checks the two backends against each other.
Summation order differs from numpy's pairwise reductions, so agreement is
to rounding, not bitwise.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, pow, sqrt, tanh

BACKEND = "compiled"


def softmax_fwd(double[:, ::1] x):
    # C passes for the reductions, numpy's vectorized exp in between: scalar
    # libm exp is several times slower than numpy's SIMD path at these sizes
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1], i, j
    cdef double m, s
    out = np.empty((R, C))
    cdef double[:, ::1] o = out
    for i in range(R):
        m = x[i, 0]
        for j in range(1, C):
            if x[i, j] > m:
                m = x[i, j]
        for j in range(C):
            o[i, j] = x[i, j] - m
    np.exp(out, out=out)
    for i in range(R):
        s = 0.0
        for j in range(C):
            s += o[i, j]
        for j in range(C):
            o[i, j] /= s
    return out


def softmax_bwd(double[:, ::1] p, double[:, ::1] g):
    cdef Py_ssize_t R = p.shape[0], C = p.shape[1], i, j
    cdef double dot
    out = np.empty((R, C))
    cdef double[:, ::1] o = out
    for i in range(R):
        dot = 0.0
        for j in range(C):
            dot += g[i, j] * p[i, j]
        for j in range(C):
            o[i, j] = p[i, j] * (g[i, j] - dot)
    return out


def softmax_lse_fwd(double[:, ::1] x):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1], i, j
    cdef double m, s
    p = np.empty((R, C))
    lse = np.empty(R)
    cdef double[:, ::1] po = p
    cdef double[::1] lo = lse
    for i in range(R):
        m = x[i, 0]
        for j in range(1, C):
            if x[i, j] > m:
                m = x[i, j]
        lo[i] = m
        for j in range(C):
            po[i, j] = x[i, j] - m
    np.exp(p, out=p)
    for i in range(R):
        s = 0.0
        for j in range(C):
            s += po[i, j]
        lo[i] += log(s)
        for j in range(C):
            po[i, j] /= s
    return p, lse


def layernorm_fwd(double[:, ::1] x, double eps):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1], i, j
    cdef double mu, var, d, s
    xhat = np.empty((R, C))
    sigma = np.empty(R)
    cdef double[:, ::1] xo = xhat
    cdef double[::1] so = sigma
    for i in range(R):
        mu = 0.0
        for j in range(C):
            mu += x[i, j]
        mu /= C
        var = 0.0
        for j in range(C):
            d = x[i, j] - mu
            var += d * d
        var /= C
        so[i] = sqrt(var)
        s = so[i] + eps
        for j in range(C):
            xo[i, j] = (x[i, j] - mu) / s
    return xhat, sigma


def layernorm_bwd(double[:, ::1] xhat, double[::1] sigma, double[:, ::1] g, double eps):
    cdef Py_ssize_t R = g.shape[0], C = g.shape[1], i, j
    cdef double gm, proj, s, sig_safe
    out = np.empty((R, C))
    cdef double[:, ::1] o = out
    for i in range(R):
        gm = 0.0
        proj = 0.0
        for j in range(C):
            gm += g[i, j]
            proj += g[i, j] * xhat[i, j]
        gm /= C
        proj /= C
        s = sigma[i] + eps
        sig_safe = sigma[i] if sigma[i] > 1e-300 else 1e-300
        for j in range(C):
            o[i, j] = (g[i, j] - gm) / s - xhat[i, j] * (proj / sig_safe)
    return out


def sigmoid_fwd(object xobj):
    x = np.ascontiguousarray(xobj, dtype=np.float64)
    shape = x.shape
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    cdef double[::1] xf = flat
    cdef double[::1] of = out
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double e
    for i in range(n):
        if xf[i] >= 0:
            of[i] = 1.0 / (1.0 + exp(-xf[i]))
        else:
            e = exp(xf[i])
            of[i] = e / (1.0 + e)
    return out.reshape(shape)


def tanh_fwd(object xobj):
    x = np.ascontiguousarray(xobj, dtype=np.float64)
    shape = x.shape
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    cdef double[::1] xf = flat
    cdef double[::1] of = out
    cdef Py_ssize_t i, n = xf.shape[0]
    for i in range(n):
        of[i] = tanh(xf[i])
    return out.reshape(shape)


def adam_update(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps, long t):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double bc1 = 1.0 - pow(beta1, t)
    cdef double bc2 = 1.0 - pow(beta2, t)
    for i in range(n):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        p[i] -= lr * (m[i] / bc1) / (sqrt(v[i] / bc2) + eps)


def scatter_add_rows(double[:, ::1] out, cnp.int64_t[::1] idx, double[:, ::1] g):
    cdef Py_ssize_t n = idx.shape[0], d = out.shape[1], i, j
    cdef cnp.int64_t r
    for i in range(n):
        r = idx[i]
        for j in range(d):
            out[r, j] += g[i, j]
