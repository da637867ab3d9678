# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. See ``_kernels_py`` for the reference semantics."""

import numpy as np
from libc.math cimport exp, log, sqrt


def candidate_logprobs(phi, w, offsets):
    cdef const double[:, ::1] P = np.ascontiguousarray(phi, dtype=np.float64)
    cdef const double[::1] W = np.ascontiguousarray(w, dtype=np.float64)
    cdef const long long[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef Py_ssize_t n = P.shape[0], d = P.shape[1], groups = off.shape[0] - 1
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t g, i, k
    cdef double s, peak, total, lse
    for i in range(n):
        s = 0.0
        for k in range(d):
            s += P[i, k] * W[k]
        o[i] = s
    for g in range(groups):
        peak = o[off[g]]
        for i in range(off[g] + 1, off[g + 1]):
            if o[i] > peak:
                peak = o[i]
        total = 0.0
        for i in range(off[g], off[g + 1]):
            o[i] -= peak
            total += exp(o[i])
        lse = log(total)
        for i in range(off[g], off[g + 1]):
            o[i] -= lse
    return out


def policy_gradient(phi, offsets, logp, rows, coefs):
    cdef const double[:, ::1] P = np.ascontiguousarray(phi, dtype=np.float64)
    cdef const long long[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef const double[::1] lp = np.ascontiguousarray(logp, dtype=np.float64)
    cdef const long long[::1] R = np.ascontiguousarray(rows, dtype=np.int64)
    cdef const double[::1] C = np.ascontiguousarray(coefs, dtype=np.float64)
    cdef Py_ssize_t d = P.shape[1], groups = off.shape[0] - 1, m = R.shape[0]
    cdef Py_ssize_t g, i, j, k, row
    cdef double p, c
    grad = np.zeros(d, dtype=np.float64)
    cdef double[::1] G = grad
    expected = np.zeros((groups, d), dtype=np.float64)
    cdef double[:, ::1] E = expected
    group_of = np.empty(P.shape[0], dtype=np.int64)
    cdef long long[::1] gof = group_of
    for g in range(groups):
        for i in range(off[g], off[g + 1]):
            gof[i] = g
            p = exp(lp[i])
            for k in range(d):
                E[g, k] += p * P[i, k]
    for j in range(m):
        row = R[j]
        c = C[j]
        g = gof[row]
        for k in range(d):
            G[k] += c * (P[row, k] - E[g, k])
    return grad


def adaptive_margins(r, double beta, bint clamp_mu=False, double sigma_floor=1e-8):
    cdef const double[::1] R = np.ascontiguousarray(r, dtype=np.float64)
    cdef Py_ssize_t n = R.shape[0], i
    cdef double mu = 0.0, var = 0.0, dev, scale, v
    for i in range(n):
        mu += R[i]
    mu /= n
    for i in range(n):
        dev = R[i] - mu
        var += dev * dev
    cdef double sigma = sqrt(var / n)
    z = np.zeros(n, dtype=np.float64)
    raw = np.zeros(n, dtype=np.float64)
    scaled = np.zeros(n, dtype=np.float64)
    cdef double[::1] Z = z, RAW = raw, S = scaled
    scale = mu if not clamp_mu else (mu if mu > 0.0 else 0.0)
    if sigma >= sigma_floor:
        for i in range(n):
            Z[i] = (mu - R[i]) / sigma
            v = Z[i] * scale
            if v > 0.0:
                RAW[i] = v
                S[i] = beta * exp(v)
    return mu, sigma, z, raw, scaled
