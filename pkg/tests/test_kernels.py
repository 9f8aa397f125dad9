import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gocpt import _fallback, kernels
from gocpt.tensor import khatri_rao_all, kruskal_reconstruct, mttkrp

try:
    from gocpt import _kernels
except ImportError:
    _kernels = None

IMPLS = [pytest.param(_fallback, id="numpy")]
if _kernels is not None:
    IMPLS.append(pytest.param(_kernels, id="cython"))

shapes = st.lists(st.integers(1, 5), min_size=2, max_size=4).map(tuple)


def _sample(seed, shape, rank, density):
    rng = np.random.default_rng(seed)
    mask = rng.random(shape) < density
    x = rng.normal(size=shape)
    idx = np.argwhere(mask).astype(np.int64)
    factors = [rng.random((d, rank)) for d in shape]
    return x, mask, idx, x[mask], factors


def _dense_row_systems(x, mask, factors, mode):
    # per-row normal equations built from the explicit Khatri-Rao matrix
    others = [f for k, f in enumerate(factors) if k != mode]
    kr = khatri_rao_all(others) if others else np.ones((1, factors[0].shape[1]))
    xm = np.moveaxis(x, mode, 0).reshape(x.shape[mode], -1)
    mm = np.moveaxis(mask, mode, 0).reshape(x.shape[mode], -1)
    grams = np.stack([kr[m].T @ kr[m] for m in mm])
    rhs = np.stack([xr[m] @ kr[m] for xr, m in zip(xm, mm)])
    return grams, rhs, mm.sum(axis=1)


@pytest.mark.parametrize("impl", IMPLS)
@given(shapes, st.integers(1, 4), st.floats(0.1, 1.0), st.integers(0, 10**6))
def test_row_systems_match_dense_oracle(impl, shape, rank, density, seed):
    x, mask, idx, vals, factors = _sample(seed, shape, rank, density)
    for mode in range(len(shape)):
        g, q, c = kernels.row_systems(idx, vals, factors, mode, shape[mode], impl=impl)
        eg, eq, ec = _dense_row_systems(x, mask, factors, mode)
        np.testing.assert_allclose(g, eg, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(q, eq, rtol=1e-12, atol=1e-12)
        np.testing.assert_array_equal(c, ec)


@pytest.mark.parametrize("impl", IMPLS)
@given(shapes, st.integers(1, 4), st.integers(0, 10**6))
def test_sparse_mttkrp_matches_dense(impl, shape, rank, seed):
    x, mask, idx, vals, factors = _sample(seed, shape, rank, 0.5)
    dense = np.where(mask, x, 0.0)
    for mode in range(len(shape)):
        got = kernels.sparse_mttkrp(idx, vals, factors, mode, shape[mode], impl=impl)
        np.testing.assert_allclose(got, mttkrp(dense, factors, mode), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("impl", IMPLS)
@given(shapes, st.integers(1, 4), st.integers(0, 10**6))
def test_kruskal_at_many_matches_reconstruction(impl, shape, rank, seed):
    _, mask, idx, _, factors = _sample(seed, shape, rank, 0.5)
    got = kernels.kruskal_at_many(idx, factors, impl=impl)
    np.testing.assert_allclose(got, kruskal_reconstruct(factors)[mask], rtol=1e-12)


@pytest.mark.parametrize("impl", IMPLS)
def test_row_offset_and_bounds(impl):
    idx = np.array([[0, 3], [1, 4]], dtype=np.int64)
    factors = [np.ones((2, 2)), np.ones((5, 2))]
    g, q, c = kernels.row_systems(idx, np.array([1.0, 2.0]), factors, 1, 2, row_offset=3,
                                  impl=impl)
    np.testing.assert_array_equal(c, [1, 1])
    np.testing.assert_array_equal(q, [[1, 1], [2, 2]])
    with pytest.raises(IndexError):
        kernels.row_systems(idx, np.array([1.0, 2.0]), factors, 1, 1, row_offset=3, impl=impl)


@pytest.mark.parametrize("impl", IMPLS)
@given(st.integers(1, 6), st.integers(1, 20), st.integers(0, 10**6))
def test_cholesky_solve_many(impl, rank, count, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(count, rank + 2, rank))
    grams = np.einsum("nij,nik->njk", a, a) + 1e-6 * np.eye(rank)
    rhs = rng.normal(size=(count, rank))
    x, ok = kernels.cholesky_solve_many(grams, rhs, impl=impl)
    assert ok.all()
    expected = np.stack([np.linalg.solve(g, q) for g, q in zip(grams, rhs)])
    np.testing.assert_allclose(x, expected, rtol=1e-8, atol=1e-10)


@pytest.mark.parametrize("impl", IMPLS)
def test_cholesky_flags_indefinite_rows(impl):
    grams = np.stack([np.eye(2), -np.eye(2), np.zeros((2, 2)), 2 * np.eye(2)])
    rhs = np.array([[1.0, 2], [1, 1], [1, 1], [2, 4]])
    x, ok = kernels.cholesky_solve_many(grams, rhs, impl=impl)
    np.testing.assert_array_equal(ok, [True, False, False, True])
    np.testing.assert_allclose(x[[0, 3]], [[1, 2], [1, 2]])


def test_backends_agree_bitwise_on_counts_and_closely_on_values():
    if _kernels is None:
        pytest.skip("compiled kernels not built")
    _, _, idx, vals, factors = _sample(7, (6, 5, 4), 3, 0.4)
    a = kernels.row_systems(idx, vals, factors, 2, 4, impl=_fallback)
    b = kernels.row_systems(idx, vals, factors, 2, 4, impl=_kernels)
    np.testing.assert_array_equal(a[2], b[2])
    np.testing.assert_allclose(a[0], b[0], rtol=1e-13)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-13)


def test_env_var_forces_fallback():
    env = dict(os.environ, GOCPT_PURE_PYTHON="1")
    out = subprocess.run(
        [sys.executable, "-c", "import gocpt; print(gocpt.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"


def test_khatri_rao_rows_agree_with_dense_khatri_rao():
    rng = np.random.default_rng(3)
    factors = [rng.random((d, 2)) for d in (3, 4, 2)]
    stacked, offsets = kernels.stack_factors(factors)
    idx = np.array([[i, j, k] for i in range(3) for j in range(4) for k in range(2)])
    rows = _fallback._khatri_rao_rows(idx, stacked, offsets, 0)
    kr = khatri_rao_all(factors[1:])
    np.testing.assert_allclose(rows, kr[idx[:, 1] * 2 + idx[:, 2]])
