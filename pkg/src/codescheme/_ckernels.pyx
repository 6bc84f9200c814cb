# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels.  Semantics mirror ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def nearest(points, codebook):
    cdef const double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, ::1] C = np.ascontiguousarray(codebook, dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0], d = P.shape[1], m = C.shape[0]
    idx_arr = np.empty(n, dtype=np.int64)
    best_arr = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] idx = idx_arr
    cdef double[::1] best = best_arr
    cdef Py_ssize_t i, j, t, arg
    cdef double acc, diff, cur
    with nogil:
        for i in range(n):
            arg = 0
            cur = 0.0
            for j in range(m):
                diff = P[i, 0] - C[j, 0]
                acc = diff * diff
                for t in range(1, d):
                    diff = P[i, t] - C[j, t]
                    acc = acc + diff * diff
                if j == 0 or acc < cur:
                    cur = acc
                    arg = j
            idx[i] = arg
            best[i] = cur
    return idx_arr, best_arr


def conv_gather(xi, filters, table):
    cdef const double[:, ::1] X = np.ascontiguousarray(xi, dtype=np.float64)
    cdef const double[:, :, ::1] A = np.ascontiguousarray(filters, dtype=np.float64)
    cdef const cnp.int64_t[:, ::1] T = np.ascontiguousarray(table, dtype=np.int64)
    cdef Py_ssize_t P = T.shape[0], Q = T.shape[1], V = A.shape[0], C = A.shape[2]
    out_arr = np.zeros((P, V), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t p, q, k, c, src
    cdef double acc
    with nogil:
        for p in range(P):
            for k in range(V):
                acc = 0.0
                for q in range(Q):
                    src = T[p, q]
                    if src < 0:
                        continue
                    for c in range(C):
                        acc = acc + A[k, q, c] * X[src, c]
                out[p, k] = acc
    return out_arr


def conv_gather_adjoint(upstream, filters, table, Py_ssize_t n_in):
    cdef const double[:, ::1] G = np.ascontiguousarray(upstream, dtype=np.float64)
    cdef const double[:, :, ::1] A = np.ascontiguousarray(filters, dtype=np.float64)
    cdef const cnp.int64_t[:, ::1] T = np.ascontiguousarray(table, dtype=np.int64)
    cdef Py_ssize_t P = T.shape[0], Q = T.shape[1], V = A.shape[0], C = A.shape[2]
    grad_arr = np.zeros((n_in, C), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    cdef Py_ssize_t p, q, k, c, src
    with nogil:
        for p in range(P):
            for q in range(Q):
                src = T[p, q]
                if src < 0:
                    continue
                for k in range(V):
                    for c in range(C):
                        grad[src, c] += G[p, k] * A[k, q, c]
    return grad_arr


def conv_gather_filter_grad(upstream, xi, table):
    cdef const double[:, ::1] G = np.ascontiguousarray(upstream, dtype=np.float64)
    cdef const double[:, ::1] X = np.ascontiguousarray(xi, dtype=np.float64)
    cdef const cnp.int64_t[:, ::1] T = np.ascontiguousarray(table, dtype=np.int64)
    cdef Py_ssize_t P = T.shape[0], Q = T.shape[1], V = G.shape[1], C = X.shape[1]
    grad_arr = np.zeros((V, Q, C), dtype=np.float64)
    cdef double[:, :, ::1] grad = grad_arr
    cdef Py_ssize_t p, q, k, c, src
    with nogil:
        for p in range(P):
            for q in range(Q):
                src = T[p, q]
                if src < 0:
                    continue
                for k in range(V):
                    for c in range(C):
                        grad[k, q, c] += G[p, k] * X[src, c]
    return grad_arr


def pollard(atoms, weights, int k):
    cdef const double[:, ::1] X = np.ascontiguousarray(atoms, dtype=np.float64)
    cdef const double[::1] W = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1]
    cdef Py_ssize_t i, g, t, pos
    cdef double best_q = np.inf, best_c = np.inf, quant, coupling, diff, dist, near
    labels_arr = np.zeros(n, dtype=np.int64)
    best_arr = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] lab = labels_arr
    cdef cnp.int64_t[::1] best_lab = best_arr
    mass_arr = np.zeros(k, dtype=np.float64)
    cent_arr = np.zeros((k, d), dtype=np.float64)
    cdef double[::1] mass = mass_arr
    cdef double[:, ::1] cent = cent_arr
    cdef bint done = n <= 1
    with nogil:
        while True:
            for g in range(k):
                mass[g] = 0.0
                for t in range(d):
                    cent[g, t] = 0.0
            for i in range(n):
                g = lab[i]
                mass[g] = mass[g] + W[i]
                for t in range(d):
                    cent[g, t] = cent[g, t] + W[i] * X[i, t]
            for g in range(k):
                if mass[g] > 0:
                    for t in range(d):
                        cent[g, t] = cent[g, t] / mass[g]
            quant = 0.0
            coupling = 0.0
            for i in range(n):
                near = -1.0
                for g in range(k):
                    if mass[g] <= 0:
                        continue
                    diff = X[i, 0] - cent[g, 0]
                    dist = diff * diff
                    for t in range(1, d):
                        diff = X[i, t] - cent[g, t]
                        dist = dist + diff * diff
                    if g == lab[i]:
                        coupling = coupling + dist * W[i]
                    if near < 0 or dist < near:
                        near = dist
                quant = quant + near * W[i]
            if quant < best_q:
                best_q = quant
            if coupling < best_c:
                best_c = coupling
                for i in range(n):
                    best_lab[i] = lab[i]
            if done:
                break
            # odometer increment over labels 1..n-1 (label 0 fixed to 0)
            pos = n - 1
            while pos >= 1:
                lab[pos] += 1
                if lab[pos] < k:
                    break
                lab[pos] = 0
                pos -= 1
            if pos < 1:
                break
    return float(best_q), float(best_c), best_arr
