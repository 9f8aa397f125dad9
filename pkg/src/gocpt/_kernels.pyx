# Compiled sparse kernels. Signatures mirror gocpt._fallback exactly.
#
# Factor matrices arrive stacked into one C-contiguous (sum I_k, R) block with
# per-mode row offsets, which avoids passing a Python list of buffers into the
# inner loop.

import numpy as np


def row_systems(const long long[:, ::1] indices,
                const double[::1] values,
                const double[:, ::1] stacked,
                const long long[::1] offsets,
                int mode,
                Py_ssize_t nrows,
                long long row_offset):
    """Accumulate per-row normal equations of the masked least-squares fit.

    Returns ``(grams, rhs, counts)`` with shapes ``(nrows, R, R)``,
    ``(nrows, R)`` and ``(nrows,)``. Entries are summed in input order.
    """
    cdef Py_ssize_t nnz = indices.shape[0]
    cdef Py_ssize_t ndim = indices.shape[1]
    cdef Py_ssize_t rank = stacked.shape[1]
    cdef Py_ssize_t e, k, a, b, row
    cdef long long base
    cdef double x

    grams_arr = np.zeros((nrows, rank, rank), dtype=np.float64)
    rhs_arr = np.zeros((nrows, rank), dtype=np.float64)
    counts_arr = np.zeros(nrows, dtype=np.int64)
    kr_arr = np.empty(rank, dtype=np.float64)
    cdef double[:, :, ::1] grams = grams_arr
    cdef double[:, ::1] rhs = rhs_arr
    cdef long long[::1] counts = counts_arr
    cdef double[::1] kr = kr_arr

    for e in range(nnz):
        row = indices[e, mode] - row_offset
        if row < 0 or row >= nrows:
            raise IndexError("entry row outside the requested block")
        for a in range(rank):
            kr[a] = 1.0
        for k in range(ndim):
            if k == mode:
                continue
            base = offsets[k] + indices[e, k]
            for a in range(rank):
                kr[a] *= stacked[base, a]
        x = values[e]
        counts[row] += 1
        for a in range(rank):
            rhs[row, a] += x * kr[a]
            for b in range(a, rank):
                grams[row, a, b] += kr[a] * kr[b]

    for row in range(nrows):
        for a in range(rank):
            for b in range(a):
                grams[row, a, b] = grams[row, b, a]
    return grams_arr, rhs_arr, counts_arr


def kruskal_at_many(const long long[:, ::1] indices,
                    const double[:, ::1] stacked,
                    const long long[::1] offsets):
    """Evaluate a Kruskal model at each index row."""
    cdef Py_ssize_t nnz = indices.shape[0]
    cdef Py_ssize_t ndim = indices.shape[1]
    cdef Py_ssize_t rank = stacked.shape[1]
    cdef Py_ssize_t e, k, r
    cdef double acc, prod

    out_arr = np.empty(nnz, dtype=np.float64)
    cdef double[::1] out = out_arr
    for e in range(nnz):
        acc = 0.0
        for r in range(rank):
            prod = 1.0
            for k in range(ndim):
                prod *= stacked[offsets[k] + indices[e, k], r]
            acc += prod
        out[e] = acc
    return out_arr


def sparse_mttkrp(const long long[:, ::1] indices,
                  const double[::1] values,
                  const double[:, ::1] stacked,
                  const long long[::1] offsets,
                  int mode,
                  Py_ssize_t nrows):
    """MTTKRP of a COO tensor: row i_n accumulates x * (Khatri-Rao row)."""
    cdef Py_ssize_t nnz = indices.shape[0]
    cdef Py_ssize_t ndim = indices.shape[1]
    cdef Py_ssize_t rank = stacked.shape[1]
    cdef Py_ssize_t e, k, r, row
    cdef double prod

    out_arr = np.zeros((nrows, rank), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for e in range(nnz):
        row = indices[e, mode]
        for r in range(rank):
            prod = values[e]
            for k in range(ndim):
                if k != mode:
                    prod *= stacked[offsets[k] + indices[e, k], r]
            out[row, r] += prod
    return out_arr


from libc.math cimport sqrt


def cholesky_solve_many(const double[:, :, ::1] grams, const double[:, ::1] rhs):
    """Solve ``x[m] @ grams[m] = rhs[m]`` for each small SPD system.

    Returns ``(x, ok)``; ``ok[m]`` is False when row ``m`` is not numerically
    positive definite, in which case ``x[m]`` is left at zero.
    """
    cdef Py_ssize_t nsys = grams.shape[0]
    cdef Py_ssize_t rank = grams.shape[1]
    cdef Py_ssize_t m, i, j, k
    cdef double s, d
    cdef bint good

    x_arr = np.zeros((nsys, rank), dtype=np.float64)
    ok_arr = np.ones(nsys, dtype=np.bool_)
    chol_arr = np.empty((rank, rank), dtype=np.float64)
    y_arr = np.empty(rank, dtype=np.float64)
    cdef double[:, ::1] x = x_arr
    cdef unsigned char[::1] ok = ok_arr.view(np.uint8)
    cdef double[:, ::1] chol = chol_arr
    cdef double[::1] y = y_arr

    for m in range(nsys):
        good = True
        for j in range(rank):
            s = grams[m, j, j]
            for k in range(j):
                s -= chol[j, k] * chol[j, k]
            if not s > 0.0:
                good = False
                break
            d = sqrt(s)
            chol[j, j] = d
            for i in range(j + 1, rank):
                s = grams[m, i, j]
                for k in range(j):
                    s -= chol[i, k] * chol[j, k]
                chol[i, j] = s / d
        if not good:
            ok[m] = 0
            continue
        for i in range(rank):
            s = rhs[m, i]
            for k in range(i):
                s -= chol[i, k] * y[k]
            y[i] = s / chol[i, i]
        for i in range(rank - 1, -1, -1):
            s = y[i]
            for k in range(i + 1, rank):
                s -= chol[k, i] * x[m, k]
            x[m, i] = s / chol[i, i]
    return x_arr, ok_arr
