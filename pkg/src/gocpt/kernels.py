"""Backend selection for the sparse hot loops.

The compiled Cython module is used when it was built; otherwise the numpy
implementation in ``_fallback`` is used. Set ``GOCPT_PURE_PYTHON=1`` to force
the fallback (handy for comparing the two).
"""

import os

import numpy as np

from gocpt import _fallback

_impl = _fallback
BACKEND = "python"
if os.environ.get("GOCPT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from gocpt import _kernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # extension not built
        pass


def stack_factors(factors):
    """Stack factor matrices into one (sum I_k, R) array plus row offsets."""
    offsets, total = [], 0
    for f in factors:
        offsets.append(total)
        total += f.shape[0]
    stacked = np.concatenate(factors, axis=0, dtype=np.float64)
    return stacked, np.array(offsets, dtype=np.int64)


def _prep(indices, values=None):
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    if values is not None:
        values = np.ascontiguousarray(values, dtype=np.float64)
    return indices, values


def row_systems(indices, values, factors, mode, nrows, row_offset=0, impl=None):
    """Per-row Gram matrices, right-hand sides and entry counts for ``mode``.

    Row ``i`` of the result collects entries whose mode-``mode`` index equals
    ``row_offset + i``. The factor of ``mode`` itself is never read, so a
    placeholder of any row count may be passed for it.
    """
    impl = impl or _impl
    indices, values = _prep(indices, values)
    stacked, offsets = stack_factors(factors)
    return impl.row_systems(
        indices, values, stacked, offsets, int(mode), int(nrows), int(row_offset)
    )


def kruskal_at_many(indices, factors, impl=None):
    impl = impl or _impl
    indices, _ = _prep(indices)
    stacked, offsets = stack_factors(factors)
    return impl.kruskal_at_many(indices, stacked, offsets)


def sparse_mttkrp(indices, values, factors, mode, nrows, impl=None):
    impl = impl or _impl
    indices, values = _prep(indices, values)
    stacked, offsets = stack_factors(factors)
    return impl.sparse_mttkrp(indices, values, stacked, offsets, int(mode), int(nrows))


def cholesky_solve_many(grams, rhs, impl=None):
    """Row-wise ``x[m] @ grams[m] = rhs[m]``; returns ``(x, ok)``."""
    impl = impl or _impl
    grams = np.ascontiguousarray(grams, dtype=np.float64)
    rhs = np.ascontiguousarray(rhs, dtype=np.float64)
    return impl.cholesky_solve_many(grams, rhs)
