"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np
from scipy import sparse


def _khatri_rao_rows(indices, stacked, offsets, skip):
    rank = stacked.shape[1]
    kr = np.ones((indices.shape[0], rank))
    for k in range(indices.shape[1]):
        if k == skip:
            continue
        kr *= stacked[offsets[k] + indices[:, k]]
    return kr


def _row_sum(rows, block, nrows):
    # one-hot (nrows x nnz) matrix product; deterministic, unlike np.add.at on threads
    nnz = rows.shape[0]
    onehot = sparse.csr_matrix(
        (np.ones(nnz), (rows, np.arange(nnz))), shape=(nrows, nnz)
    )
    return np.asarray(onehot @ block)


def row_systems(indices, values, stacked, offsets, mode, nrows, row_offset):
    rank = stacked.shape[1]
    rows = indices[:, mode] - row_offset
    if rows.size and (rows.min() < 0 or rows.max() >= nrows):
        raise IndexError("entry row outside the requested block")
    kr = _khatri_rao_rows(indices, stacked, offsets, mode)
    outer = (kr[:, :, None] * kr[:, None, :]).reshape(-1, rank * rank)
    grams = _row_sum(rows, outer, nrows).reshape(nrows, rank, rank)
    rhs = _row_sum(rows, kr * values[:, None], nrows)
    counts = np.bincount(rows, minlength=nrows).astype(np.int64)
    return grams, rhs, counts


def kruskal_at_many(indices, stacked, offsets):
    return _khatri_rao_rows(indices, stacked, offsets, -1).sum(axis=1)


def sparse_mttkrp(indices, values, stacked, offsets, mode, nrows):
    kr = _khatri_rao_rows(indices, stacked, offsets, mode)
    return _row_sum(indices[:, mode], kr * values[:, None], nrows)


def _substitute(chol, rhs):
    rank = chol.shape[-1]
    y = np.empty_like(rhs)
    for i in range(rank):
        y[:, i] = (rhs[:, i] - np.einsum("mj,mj->m", chol[:, i, :i], y[:, :i])) / chol[:, i, i]
    x = np.empty_like(rhs)
    for i in reversed(range(rank)):
        tail = np.einsum("mj,mj->m", chol[:, i + 1 :, i], x[:, i + 1 :])
        x[:, i] = (y[:, i] - tail) / chol[:, i, i]
    return x


def cholesky_solve_many(grams, rhs):
    nsys, rank = rhs.shape
    ok = np.ones(nsys, dtype=bool)
    try:
        chol = np.linalg.cholesky(grams)
    except np.linalg.LinAlgError:
        chol = np.zeros_like(grams)
        for m in range(nsys):
            try:
                chol[m] = np.linalg.cholesky(grams[m])
            except np.linalg.LinAlgError:
                ok[m] = False
    ok &= np.isfinite(chol).all(axis=(1, 2))
    x = np.zeros((nsys, rank))
    if ok.any():
        x[ok] = _substitute(chol[ok], rhs[ok])
    return x, ok
