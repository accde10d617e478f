# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for small dense matrix chains and batched ALS.

Matrices in this package are tiny (tens of rows), so numpy's per-call
overhead dominates. These loops do the same arithmetic without it.
Signatures mirror ``_kernels_py``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


cdef inline object _c(object a):
    return np.ascontiguousarray(a, dtype=np.float64)


cdef inline void _pmm(const double* A, const double* B, double* out,
                      Py_ssize_t n, Py_ssize_t r, Py_ssize_t c) noexcept nogil:
    # out (n x c) = A (n x r) @ B (r x c), all row-major
    cdef Py_ssize_t i, j, l
    cdef double a
    for i in range(n * c):
        out[i] = 0.0
    for i in range(n):
        for l in range(r):
            a = A[i * r + l]
            if a != 0.0:
                for j in range(c):
                    out[i * c + j] += a * B[l * c + j]


cdef inline void _peye(double* out, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n * n):
        out[i] = 0.0
    for i in range(n):
        out[i * n + i] = 1.0


cdef inline double* _ptr(cnp.ndarray a):
    return <double*> cnp.PyArray_DATA(a)


def chain_product(mats):
    cdef Py_ssize_t n = len(mats), i
    cdef list ms = [_c(W) for W in mats]
    cdef Py_ssize_t dx = (<cnp.ndarray> ms[0]).shape[1]
    cdef Py_ssize_t width = 0
    for i in range(n):
        width = max(width, (<cnp.ndarray> ms[i]).shape[0])
    cdef cnp.ndarray buf = np.empty(2 * width * dx)
    cdef double* cur = _ptr(buf)
    cdef double* nxt = cur + width * dx
    cdef double* tmp
    cdef cnp.ndarray W = ms[0]
    cdef Py_ssize_t rows = W.shape[0]
    for i in range(rows * dx):
        cur[i] = _ptr(W)[i]
    for i in range(1, n):
        W = ms[i]
        _pmm(_ptr(W), cur, nxt, W.shape[0], rows, dx)
        rows = W.shape[0]
        tmp = cur
        cur = nxt
        nxt = tmp
    cdef cnp.ndarray out = np.empty((rows, dx))
    for i in range(rows * dx):
        _ptr(out)[i] = cur[i]
    return out


cdef double _residual(const double* P, const double* X, const double* Y, double* R,
                      Py_ssize_t dy, Py_ssize_t dx, Py_ssize_t m) noexcept nogil:
    # R = P X - Y, returns ||R||^2
    cdef Py_ssize_t i, j, l
    cdef double tot = 0.0, a
    for i in range(dy * m):
        R[i] = -Y[i]
    for i in range(dy):
        for l in range(dx):
            a = P[i * dx + l]
            if a != 0.0:
                for j in range(m):
                    R[i * m + j] += a * X[l * m + j]
    for i in range(dy * m):
        tot += R[i] * R[i]
    return tot


def chain_loss(mats, X, Y):
    cdef cnp.ndarray P = chain_product(mats)
    cdef cnp.ndarray Xa = _c(X)
    cdef cnp.ndarray Ya = _c(Y)
    cdef Py_ssize_t dy = P.shape[0], dx = P.shape[1], m = Xa.shape[1]
    cdef cnp.ndarray R = np.empty(dy * m)
    return 0.5 * _residual(_ptr(P), _ptr(Xa), _ptr(Ya), _ptr(R), dy, dx, m)


def chain_gradients(mats, X, Y):
    cdef Py_ssize_t n = len(mats), i, j, l, a, b
    cdef list ms = [_c(W) for W in mats]
    cdef cnp.ndarray Xa = _c(X)
    cdef cnp.ndarray Ya = _c(Y)
    cdef cnp.ndarray W
    cdef Py_ssize_t[64] dims
    if n + 1 > 64:
        raise ValueError("at most 63 layers supported")
    dims[0] = (<cnp.ndarray> ms[0]).shape[1]
    for i in range(n):
        dims[i + 1] = (<cnp.ndarray> ms[i]).shape[0]
    cdef Py_ssize_t dx = dims[0], dy = dims[n], m = Xa.shape[1]
    # workspace offsets: prefix[i] is dims[i] x dx, suffix[i] is dy x dims[i+1]
    cdef Py_ssize_t[64] poff
    cdef Py_ssize_t[64] soff
    cdef Py_ssize_t total = 0
    for i in range(n + 1):
        poff[i] = total
        total += dims[i] * dx
    for i in range(n):
        soff[i] = total
        total += dy * dims[i + 1]
    cdef Py_ssize_t eoff = total
    total += dy * dx
    cdef Py_ssize_t toff = total
    cdef Py_ssize_t maxd = 0
    for i in range(n + 1):
        maxd = max(maxd, dims[i])
    total += dy * maxd
    cdef Py_ssize_t roff = total
    total += dy * m
    cdef cnp.ndarray work = np.empty(total)
    cdef double* w = _ptr(work)
    cdef double s

    _peye(w + poff[0], dx)
    for i in range(n):
        W = ms[i]
        _pmm(_ptr(W), w + poff[i], w + poff[i + 1], dims[i + 1], dims[i], dx)
    _peye(w + soff[n - 1], dy)
    for i in range(n - 2, -1, -1):
        W = ms[i + 1]
        _pmm(w + soff[i + 1], _ptr(W), w + soff[i], dy, dims[i + 2], dims[i + 1])

    cdef double tot = _residual(w + poff[n], _ptr(Xa), _ptr(Ya), w + roff, dy, dx, m)
    # E = R X^T
    cdef double* E = w + eoff
    cdef double* R = w + roff
    cdef double* Xp = _ptr(Xa)
    for i in range(dy):
        for j in range(dx):
            s = 0.0
            for l in range(m):
                s += R[i * m + l] * Xp[j * m + l]
            E[i * dx + j] = s

    cdef list grads = []
    cdef cnp.ndarray Gi
    cdef double* T = w + toff
    cdef double* Pp
    cdef double* S
    cdef double* g
    cdef Py_ssize_t di, dim1
    for i in range(n):
        dim1 = dims[i]
        di = dims[i + 1]
        Pp = w + poff[i]
        S = w + soff[i]
        # T = E @ prefix_i^T   (dy x dim1)
        for a in range(dy):
            for b in range(dim1):
                s = 0.0
                for l in range(dx):
                    s += E[a * dx + l] * Pp[b * dx + l]
                T[a * dim1 + b] = s
        # grad = suffix_i^T @ T   (di x dim1)
        Gi = np.zeros((di, dim1))
        g = _ptr(Gi)
        for l in range(dy):
            for a in range(di):
                s = S[l * di + a]
                if s != 0.0:
                    for b in range(dim1):
                        g[a * dim1 + b] += s * T[l * dim1 + b]
        grads.append(Gi)
    return 0.5 * tot, grads


cdef int _chol(double[:, ::1] S, double[:, ::1] L) noexcept nogil:
    # lower Cholesky factor; returns 0 on failure
    cdef Py_ssize_t n = S.shape[0], i, j, l
    cdef double s
    for i in range(n):
        for j in range(n):
            L[i, j] = 0.0
    for j in range(n):
        s = S[j, j]
        for l in range(j):
            s -= L[j, l] * L[j, l]
        if not (s > 0.0):
            return 0
        L[j, j] = sqrt(s)
        for i in range(j + 1, n):
            s = S[i, j]
            for l in range(j):
                s -= L[i, l] * L[j, l]
            L[i, j] = s / L[j, j]
    return 1


cdef void _cho_solve_right(double[:, ::1] L, double[:, ::1] B, double[:, ::1] out) noexcept nogil:
    # out @ L @ L.T = B, row by row
    cdef Py_ssize_t r = B.shape[0], k = L.shape[0], row, i, l
    cdef double s
    for row in range(r):
        # forward substitution with L
        for i in range(k):
            s = B[row, i]
            for l in range(i):
                s -= L[i, l] * out[row, l]
            out[row, i] = s / L[i, i]
        # back substitution with L^T
        for i in range(k - 1, -1, -1):
            s = out[row, i]
            for l in range(i + 1, k):
                s -= L[l, i] * out[row, l]
            out[row, i] = s / L[i, i]


def als_restarts(C, G, Gc, double yy, U0, int sweeps):
    cdef double[:, ::1] Cv = _c(C)
    cdef double[:, ::1] Gv = _c(G)
    cdef double[:, ::1] Gcv = _c(Gc)
    cdef cnp.ndarray Ua = np.array(U0, dtype=np.float64, order="C", copy=True)
    cdef double[:, :, ::1] U = Ua
    cdef Py_ssize_t n = U.shape[0], dy = U.shape[1], k = U.shape[2]
    cdef Py_ssize_t dx = Cv.shape[0]
    cdef cnp.ndarray Va = np.zeros((n, dx, k))
    cdef double[:, :, ::1] V = Va
    cdef cnp.ndarray la = np.full(n, INFINITY)
    cdef cnp.ndarray pa = np.full(n, INFINITY)
    cdef double[::1] loss = la
    cdef double[::1] prev = pa
    cdef double[:, ::1] S = np.empty((k, k))
    cdef double[:, ::1] L = np.empty((k, k))
    cdef double[:, ::1] rhsV = np.empty((dx, k))
    cdef double[:, ::1] rhsU = np.empty((dy, k))
    cdef double[:, ::1] CV = np.empty((dx, k))
    cdef double[:, ::1] Rm = np.empty((dy, dx))
    cdef Py_ssize_t r, it, i, j, a, b
    cdef double s, quad, lin
    cdef int ok
    with nogil:
        for r in range(n):
            ok = 1
            for it in range(sweeps):
                # V = Gc^T U (U^T U)^{-1}
                for a in range(k):
                    for b in range(k):
                        s = 0.0
                        for i in range(dy):
                            s += U[r, i, a] * U[r, i, b]
                        S[a, b] = s
                for j in range(dx):
                    for a in range(k):
                        s = 0.0
                        for i in range(dy):
                            s += Gcv[i, j] * U[r, i, a]
                        rhsV[j, a] = s
                if not _chol(S, L):
                    ok = 0
                    break
                _cho_solve_right(L, rhsV, V[r])
                # U = G V (V^T C V)^{-1}
                for j in range(dx):
                    for a in range(k):
                        s = 0.0
                        for i in range(dx):
                            s += Cv[j, i] * V[r, i, a]
                        CV[j, a] = s
                for a in range(k):
                    for b in range(k):
                        s = 0.0
                        for j in range(dx):
                            s += V[r, j, a] * CV[j, b]
                        S[a, b] = s
                for i in range(dy):
                    for a in range(k):
                        s = 0.0
                        for j in range(dx):
                            s += Gv[i, j] * V[r, j, a]
                        rhsU[i, a] = s
                if not _chol(S, L):
                    ok = 0
                    break
                _cho_solve_right(L, rhsU, U[r])
                # loss = 0.5 (tr(R C R^T) - 2 tr(R G^T) + yy)
                for i in range(dy):
                    for j in range(dx):
                        s = 0.0
                        for a in range(k):
                            s += U[r, i, a] * V[r, j, a]
                        Rm[i, j] = s
                quad = 0.0
                lin = 0.0
                for i in range(dy):
                    for j in range(dx):
                        s = 0.0
                        for a in range(dx):
                            s += Cv[j, a] * Rm[i, a]
                        quad += Rm[i, j] * s
                        lin += Rm[i, j] * Gv[i, j]
                prev[r] = loss[r]
                loss[r] = 0.5 * (quad - 2.0 * lin + yy)
            if not ok:
                loss[r] = INFINITY
    return la, pa, Ua, Va
