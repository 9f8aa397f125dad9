"""Tensor containers, CP algebra and fitness metrics.

Dense tensors are plain C-ordered ``float64`` numpy arrays (mode 1 slowest).
Sparse observations use :class:`CooTensor`, whose entries double as the
observation mask. All indices are 0-based.

Unfolding convention: the columns of ``unfold(x, n)`` enumerate the remaining
modes in ascending order, row-major (last mode fastest). ``khatri_rao`` uses
the matching row order, so that::

    unfold(kruskal_reconstruct(m), n) == m.factors[n] @ khatri_rao_all(others).T
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce
from pathlib import Path

import numpy as np

from gocpt import kernels

__all__ = [
    "CooTensor",
    "IndexSet",
    "KruskalModel",
    "check_shape",
    "fold",
    "hadamard",
    "khatri_rao",
    "khatri_rao_all",
    "kronecker",
    "kruskal_at",
    "kruskal_reconstruct",
    "mttkrp",
    "pof_completion",
    "pof_factorization",
    "pof_observed",
    "read_coo",
    "unfold",
    "write_coo",
]


def check_shape(shape) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if len(dims) < 1:
        raise ValueError("a shape needs at least one mode")
    if any(d < 1 for d in dims):
        raise ValueError(f"mode sizes must be positive, got {dims}")
    return dims


# --------------------------------------------------------------------------
# matrix / tensor algebra
# --------------------------------------------------------------------------


def kronecker(a, b):
    """Kronecker product; block ``(i, j)`` of the result is ``a[i, j] * b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    return np.kron(a, b)


def khatri_rao(a, b):
    """Column-wise Kronecker product of ``a`` (I x R) and ``b`` (K x R).

    Row ``i * K + k`` of the result is ``a[i] * b[k]``.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"rank mismatch: {a.shape[1]} vs {b.shape[1]} columns")
    return (a[:, None, :] * b[None, :, :]).reshape(-1, a.shape[1])


def khatri_rao_all(mats):
    """Khatri-Rao product of a sequence of matrices, left to right."""
    mats = list(mats)
    if not mats:
        raise ValueError("need at least one matrix")
    return reduce(khatri_rao, mats)


def hadamard(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def _check_mode(ndim, mode):
    if not 0 <= mode < ndim:
        raise ValueError(f"mode {mode} out of range for an order-{ndim} tensor")


def unfold(x, mode):
    """Mode-``mode`` matricization, shape ``I_n x prod(other dims)``."""
    x = np.asarray(x, dtype=np.float64)
    _check_mode(x.ndim, mode)
    return np.moveaxis(x, mode, 0).reshape(x.shape[mode], -1)


def fold(mat, mode, shape):
    """Inverse of :func:`unfold`."""
    shape = check_shape(shape)
    _check_mode(len(shape), mode)
    moved = (shape[mode],) + shape[:mode] + shape[mode + 1 :]
    return np.moveaxis(np.asarray(mat, dtype=np.float64).reshape(moved), 0, mode)


# --------------------------------------------------------------------------
# Kruskal (CP) models
# --------------------------------------------------------------------------


class KruskalModel:
    """N factor matrices sharing rank R; ``factors[n]`` is ``I_n x R``.

    The stored arrays are private read-only copies.
    """

    __slots__ = ("factors",)

    def __init__(self, factors):
        mats = []
        for f in factors:
            arr = np.array(f, dtype=np.float64, ndmin=2)
            if arr.ndim != 2:
                raise ValueError("factor matrices must be 2-D")
            arr.flags.writeable = False
            mats.append(arr)
        if not mats:
            raise ValueError("a Kruskal model needs at least one factor")
        ranks = {m.shape[1] for m in mats}
        if len(ranks) != 1:
            raise ValueError(f"factors disagree on rank: {sorted(ranks)}")
        if mats[0].shape[1] < 1:
            raise ValueError("rank must be at least 1")
        if any(m.shape[0] < 1 for m in mats):
            raise ValueError("every factor needs at least one row")
        if not all(np.isfinite(m).all() for m in mats):
            raise ValueError("factor entries must be finite")
        self.factors = tuple(mats)

    @property
    def shape(self):
        return tuple(f.shape[0] for f in self.factors)

    @property
    def rank(self):
        return self.factors[0].shape[1]

    @property
    def ndim(self):
        return len(self.factors)

    def copy_factors(self):
        """Writable copies of the factor matrices."""
        return [f.copy() for f in self.factors]

    @classmethod
    def random(cls, shape, rank, rng):
        rng = np.random.default_rng(rng)
        return cls([rng.random((d, rank)) for d in check_shape(shape)])

    def __eq__(self, other):
        if not isinstance(other, KruskalModel):
            return NotImplemented
        if other.shape != self.shape or other.rank != self.rank:
            return False
        return all(
            np.array_equal(a, b) for a, b in zip(self.factors, other.factors)
        )

    def __repr__(self):
        dims = "x".join(map(str, self.shape))
        return f"KruskalModel(shape={dims}, rank={self.rank})"


def kruskal_reconstruct(model):
    """Dense tensor ``sum_r a_1[:, r] o ... o a_N[:, r]``."""
    factors = model.factors if isinstance(model, KruskalModel) else model
    if len(factors) == 1:
        return factors[0].sum(axis=1)
    # first factor times the Khatri-Rao of the rest gives the mode-0 unfolding
    rest = khatri_rao_all(factors[1:])
    shape = tuple(f.shape[0] for f in factors)
    return (factors[0] @ rest.T).reshape(shape)


def kruskal_at(model, index):
    """Value of the reconstruction at one cell, without materializing it."""
    index = tuple(int(i) for i in index)
    if len(index) != model.ndim:
        raise ValueError(f"index {index} has wrong order for {model!r}")
    for i, d in zip(index, model.shape):
        if not 0 <= i < d:
            raise IndexError(f"index {index} out of bounds for shape {model.shape}")
    prod = np.ones(model.rank)
    for f, i in zip(model.factors, index):
        prod = prod * f[i]
    return float(prod.sum())


def mttkrp(x, model, mode):
    """``unfold(x, mode) @ khatri_rao(other factors, ascending)``."""
    x = np.asarray(x, dtype=np.float64)
    factors = model.factors if isinstance(model, KruskalModel) else model
    if x.shape != tuple(f.shape[0] for f in factors):
        raise ValueError(f"tensor shape {x.shape} does not match the model")
    _check_mode(x.ndim, mode)
    others = [f for k, f in enumerate(factors) if k != mode]
    if not others:
        return x[:, None] * np.ones((1, factors[0].shape[1]))
    return unfold(x, mode) @ khatri_rao_all(others)


def gram_hadamard(factors, skip, rows=None):
    """Hadamard product of ``A_k^T A_k`` over ``k != skip``.

    ``rows`` optionally truncates every factor to its leading ``rows[k]`` rows.
    """
    rank = factors[0].shape[1]
    out = np.ones((rank, rank))
    for k, f in enumerate(factors):
        if k == skip:
            continue
        if rows is not None:
            f = f[: rows[k]]
        out *= f.T @ f
    return out


# --------------------------------------------------------------------------
# sparse containers
# --------------------------------------------------------------------------


def _as_index_array(indices, ndim):
    arr = np.asarray(indices, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, ndim), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != ndim:
        raise ValueError(f"indices must be an (nnz, {ndim}) array")
    return np.ascontiguousarray(arr)


def _check_bounds(indices, shape):
    if indices.shape[0] == 0:
        return
    bad = np.flatnonzero(((indices < 0) | (indices >= np.asarray(shape))).any(axis=1))
    if bad.size:
        idx = tuple(int(v) for v in indices[bad[0]])
        raise IndexError(f"index {idx} out of bounds for shape {shape}")


def encode(indices, shape):
    """Row-major linear keys; order-preserving for lexicographic index order."""
    if indices.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.ravel_multi_index(tuple(indices.T), shape).astype(np.int64)


def decode(keys, shape):
    if len(keys) == 0:
        return np.zeros((0, len(shape)), dtype=np.int64)
    return np.stack(np.unravel_index(keys, shape), axis=1).astype(np.int64)


class CooTensor:
    """Coordinate-format tensor; an entry's presence marks the cell observed.

    Duplicated coordinates are rejected. ``indices`` is ``(nnz, N)`` int64 and
    ``values`` is ``(nnz,)`` float64, both read-only.
    """

    __slots__ = ("shape", "indices", "values", "_keys")

    def __init__(self, shape, indices, values, *, check=True):
        self.shape = check_shape(shape)
        idx = _as_index_array(indices, len(self.shape))
        vals = np.array(values, dtype=np.float64).reshape(-1)
        if vals.shape[0] != idx.shape[0]:
            raise ValueError("indices and values differ in length")
        self._keys = None
        if check:
            _check_bounds(idx, self.shape)
            keys = encode(idx, self.shape)
            uniq, counts = np.unique(keys, return_counts=True)
            if uniq.size != keys.size:
                dup = decode(uniq[counts > 1][:1], self.shape)[0]
                raise ValueError(f"duplicate coordinate {tuple(int(v) for v in dup)}")
        idx.flags.writeable = False
        vals.flags.writeable = False
        self.indices = idx
        self.values = vals

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def nnz(self):
        return self.values.shape[0]

    def __len__(self):
        return self.nnz

    @property
    def keys(self):
        if self._keys is None:
            self._keys = encode(self.indices, self.shape)
        return self._keys

    @classmethod
    def empty(cls, shape):
        shape = check_shape(shape)
        return cls(shape, np.zeros((0, len(shape)), dtype=np.int64), [], check=False)

    @classmethod
    def from_dense(cls, x, mask=None):
        """Entries of ``x`` at ``mask`` (all cells when ``mask`` is None)."""
        x = np.asarray(x, dtype=np.float64)
        if mask is None:
            keys = np.arange(x.size, dtype=np.int64)
        elif isinstance(mask, IndexSet):
            if mask.shape != x.shape:
                raise ValueError("mask shape differs from tensor shape")
            keys = mask.keys
        else:
            keys = np.flatnonzero(np.asarray(mask, dtype=bool).reshape(-1))
        return cls(x.shape, decode(keys, x.shape), x.reshape(-1)[keys], check=False)

    @classmethod
    def from_entries(cls, shape, entries):
        """Build from ``[(i_1, ..., i_N, value), ...]`` rows."""
        shape = check_shape(shape)
        rows = np.asarray(list(entries), dtype=np.float64).reshape(-1, len(shape) + 1)
        return cls(shape, rows[:, :-1].astype(np.int64), rows[:, -1])

    def to_dense(self, fill=0.0):
        out = np.full(self.shape, fill, dtype=np.float64)
        out.reshape(-1)[self.keys] = self.values
        return out

    def mask(self):
        """Boolean dense mask of the observed cells."""
        out = np.zeros(self.shape, dtype=bool)
        out.reshape(-1)[self.keys] = True
        return out

    def index_set(self):
        return IndexSet(self.shape, self.keys, sorted_unique=False)

    def select(self, rows):
        """Sub-tensor with the entries picked by a boolean or integer selector."""
        return CooTensor(self.shape, self.indices[rows], self.values[rows], check=False)

    def sorted(self):
        order = np.argsort(self.keys, kind="stable")
        return self.select(order)

    def with_shape(self, shape):
        """Same entries viewed inside a (larger) bounding box."""
        return CooTensor(shape, self.indices, self.values, check=True)

    def sq_norm(self):
        return float(self.values @ self.values)

    def __repr__(self):
        dims = "x".join(map(str, self.shape))
        return f"CooTensor(shape={dims}, nnz={self.nnz})"


class IndexSet:
    """Set of cells of a tensor of the given shape, stored as sorted keys."""

    __slots__ = ("shape", "keys")

    def __init__(self, shape, keys, *, sorted_unique=False):
        self.shape = check_shape(shape)
        keys = np.asarray(keys, dtype=np.int64).reshape(-1)
        if not sorted_unique:
            keys = np.unique(keys)
        size = math.prod(self.shape)
        if keys.size and (keys[0] < 0 or keys[-1] >= size):
            raise IndexError("index set key outside the tensor bounds")
        keys.flags.writeable = False
        self.keys = keys

    @classmethod
    def from_indices(cls, shape, indices):
        shape = check_shape(shape)
        idx = _as_index_array(indices, len(shape))
        _check_bounds(idx, shape)
        return cls(shape, encode(idx, shape))

    @classmethod
    def full(cls, shape):
        shape = check_shape(shape)
        return cls(shape, np.arange(math.prod(shape)), sorted_unique=True)

    @classmethod
    def empty(cls, shape):
        return cls(shape, np.zeros(0, dtype=np.int64), sorted_unique=True)

    @property
    def indices(self):
        return decode(self.keys, self.shape)

    def __len__(self):
        return int(self.keys.size)

    def __contains__(self, index):
        index = tuple(int(i) for i in index)
        if len(index) != len(self.shape) or any(
            not 0 <= i < d for i, d in zip(index, self.shape)
        ):
            return False
        key = np.ravel_multi_index(index, self.shape)
        pos = np.searchsorted(self.keys, key)
        return bool(pos < self.keys.size and self.keys[pos] == key)

    def _aligned(self, other):
        shape = tuple(max(a, b) for a, b in zip(self.shape, other.shape))
        if len(self.shape) != len(other.shape):
            raise ValueError("index sets of different order")
        mine = self.keys if shape == self.shape else encode(self.indices, shape)
        theirs = other.keys if shape == other.shape else encode(other.indices, shape)
        return shape, mine, theirs

    def union(self, other):
        shape, a, b = self._aligned(other)
        return IndexSet(shape, np.union1d(a, b), sorted_unique=True)

    def difference(self, other):
        shape, a, b = self._aligned(other)
        return IndexSet(shape, np.setdiff1d(a, b, assume_unique=True), sorted_unique=True)

    def intersection(self, other):
        shape, a, b = self._aligned(other)
        return IndexSet(
            shape, np.intersect1d(a, b, assume_unique=True), sorted_unique=True
        )

    __or__ = union
    __sub__ = difference
    __and__ = intersection

    def complement(self):
        return IndexSet.full(self.shape) - self

    def to_mask(self):
        out = np.zeros(self.shape, dtype=bool)
        out.reshape(-1)[self.keys] = True
        return out

    def __eq__(self, other):
        if not isinstance(other, IndexSet):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.keys, other.keys)

    def __repr__(self):
        dims = "x".join(map(str, self.shape))
        return f"IndexSet(shape={dims}, size={len(self)})"


def kruskal_at_coo(model, coo):
    """Reconstruction values at every entry of ``coo``."""
    if coo.nnz == 0:
        return np.zeros(0)
    return kernels.kruskal_at_many(coo.indices, model.factors)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def pof_factorization(x, model):
    """Percentage of fitness ``1 - ||x - [[A]]||_F / ||x||_F``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.shape:
        raise ValueError(f"tensor shape {x.shape} does not match {model!r}")
    denom = np.linalg.norm(x)
    if denom == 0:
        raise ValueError("PoF is undefined for an all-zero tensor")
    return float(1.0 - np.linalg.norm(x - kruskal_reconstruct(model)) / denom)


def pof_completion(x_truth, mask, model):
    """PoF restricted to the cells NOT in ``mask`` (held-out entries)."""
    x = np.asarray(x_truth, dtype=np.float64)
    if x.shape != model.shape:
        raise ValueError(f"tensor shape {x.shape} does not match {model!r}")
    observed = mask.to_mask() if isinstance(mask, IndexSet) else np.asarray(mask, bool)
    if observed.shape != x.shape:
        raise ValueError("mask shape differs from tensor shape")
    held_out = ~observed
    if not held_out.any():
        raise ValueError("completion PoF needs at least one unobserved cell")
    truth = x[held_out]
    denom = np.linalg.norm(truth)
    if denom == 0:
        raise ValueError("held-out entries have zero norm")
    resid = truth - kruskal_reconstruct(model)[held_out]
    return float(1.0 - np.linalg.norm(resid) / denom)


def pof_observed(data, model):
    """PoF over the observed entries of a COO tensor only."""
    if data.shape != model.shape:
        raise ValueError(f"data shape {data.shape} does not match {model!r}")
    denom = math.sqrt(data.sq_norm())
    if denom == 0:
        raise ValueError("PoF is undefined for all-zero observations")
    resid = data.values - kruskal_at_coo(model, data)
    return float(1.0 - np.linalg.norm(resid) / denom)


# --------------------------------------------------------------------------
# COO text format
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class _Header:
    shape: tuple
    base: int


def _parse_header(line, path):
    tokens = line.split()
    if not tokens or tokens[0] != "dims:" or "base:" not in tokens:
        raise ValueError(f"{path}:1: expected 'dims: I1 ... IN base: 0|1'")
    b = tokens.index("base:")
    try:
        shape = check_shape(int(t) for t in tokens[1:b])
        base = int(tokens[b + 1])
    except (ValueError, IndexError) as exc:
        raise ValueError(f"{path}:1: malformed header: {exc}") from None
    if base not in (0, 1):
        raise ValueError(f"{path}:1: base must be 0 or 1")
    return _Header(shape, base)


def read_coo(path):
    """Read the whitespace-separated COO text format."""
    path = Path(path)
    with path.open() as fh:
        header = _parse_header(fh.readline(), path)
        ndim = len(header.shape)
        body = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if body.size == 0:
        return CooTensor.empty(header.shape)
    if body.shape[1] != ndim + 1:
        raise ValueError(f"{path}: expected {ndim + 1} columns, got {body.shape[1]}")
    idx = body[:, :ndim]
    if not np.array_equal(idx, np.round(idx)):
        raise ValueError(f"{path}: non-integer index")
    try:
        return CooTensor(header.shape, idx.astype(np.int64) - header.base, body[:, ndim])
    except IndexError as exc:
        raise ValueError(f"{path}: {exc}") from None


def write_coo(path, coo):
    """Write a COO tensor with base-0 indices and round-trip exact values."""
    path = Path(path)
    lines = ["dims: " + " ".join(map(str, coo.shape)) + " base: 0"]
    for idx, val in zip(coo.indices.tolist(), coo.values.tolist()):
        lines.append(" ".join(map(str, idx)) + " " + repr(val))
    path.write_text("\n".join(lines) + "\n")
