"""Least-squares building blocks shared by the online engine and the baselines.

Every update solves ``a @ P = q`` for a symmetric positive-definite ``P`` by
Cholesky factorization. A failed factorization is retried once with the
diagonal shifted by ``jitter * trace(P) / R``; a second failure raises
:class:`SolverError`.
"""

import numpy as np
from scipy import linalg

from gocpt import kernels
from gocpt.tensor import gram_hadamard, mttkrp

DEFAULT_JITTER = 1e-10


class SolverError(ArithmeticError):
    """A normal-equation system could not be factorized."""


def _condition(p):
    try:
        return float(np.linalg.cond(p))
    except np.linalg.LinAlgError:
        return float("inf")


def spd_solve(gram, rhs, jitter=DEFAULT_JITTER):
    """Solve ``x @ gram = rhs`` for a row vector or a stack of rows ``rhs``."""
    gram = np.asarray(gram, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape[-1] != gram.shape[0]:
        raise ValueError("right-hand side width must equal the system size")
    if rhs.size == 0:
        return rhs.copy()
    try:
        factor = linalg.cho_factor(gram, lower=True, check_finite=False)
    except linalg.LinAlgError:
        shift = jitter * np.trace(gram) / gram.shape[0]
        try:
            if not shift > 0:
                raise linalg.LinAlgError("no positive jitter available")
            factor = linalg.cho_factor(
                gram + shift * np.eye(gram.shape[0]), lower=True, check_finite=False
            )
        except linalg.LinAlgError:
            raise SolverError(
                f"system is not positive definite after jitter {shift:.3g} "
                f"(condition number {_condition(gram):.3g})"
            ) from None
    return linalg.cho_solve(factor, rhs.T, check_finite=False).T


def spd_solve_batch(grams, rhs, jitter=DEFAULT_JITTER):
    """Row-wise ``x[i] @ grams[i] = rhs[i]`` for a stack of small systems."""
    if rhs.shape[0] == 0:
        return rhs.copy()
    x, ok = kernels.cholesky_solve_many(grams, rhs)
    for m in np.flatnonzero(~ok):
        x[m] = spd_solve(grams[m], rhs[m], jitter)
    return x


def _add_ridge(grams, beta):
    """``grams[m] += beta * I`` for every stacked system, in place."""
    diag = np.arange(grams.shape[-1])
    grams[:, diag, diag] += beta


def alpha_grams(factors, prev_factors, old_shape, mode):
    """``(H_U, H_A)``: Hadamard products of ``U_k^T U_k`` and ``A_k^{t-1 T} U_k``.

    ``U_k`` is the upper (old-row) block of the current factor of mode ``k``.
    """
    rank = factors[0].shape[1]
    h_u = np.ones((rank, rank))
    h_a = np.ones((rank, rank))
    for k, (f, p) in enumerate(zip(factors, prev_factors)):
        if k == mode:
            continue
        upper = f[: old_shape[k]]
        h_u *= upper.T @ upper
        h_a *= p.T @ upper
    return h_u, h_a


def sparse_mode_update(
    factors, data, mode, beta, alpha=0.0, prev_factors=None, old_shape=None,
    jitter=DEFAULT_JITTER,
):
    """Row-wise ridge least squares for every row of ``factors[mode]``.

    Old rows (index below ``old_shape[mode]``) also carry the reconstruction
    term weighted by ``alpha``. A row is left untouched when its system holds
    no data and no reconstruction term. Returns the new factor matrix.
    """
    n_rows, rank = factors[mode].shape
    grams, rhs, counts = kernels.row_systems(data.indices, data.values, factors, mode, n_rows)
    _add_ridge(grams, beta)
    active = counts > 0
    if alpha > 0 and prev_factors is not None:
        old = old_shape[mode]
        h_u, h_a = alpha_grams(factors, prev_factors, old_shape, mode)
        grams[:old] += alpha * h_u
        rhs[:old] += alpha * (prev_factors[mode] @ h_a)
        active[:old] = True
    out = np.array(factors[mode], dtype=np.float64)
    rows = np.flatnonzero(active)
    out[rows] = spd_solve_batch(grams[rows], rhs[rows], jitter)
    return out


def dense_block_systems(xhat, factors, mode, beta, alpha=0.0, prev_factors=None,
                        old_shape=None):
    """Normal equations ``(P_U, Q_U, P_L, Q_L)`` of the imputed-tensor fit."""
    rank = factors[0].shape[1]
    old = factors[mode].shape[0] if old_shape is None else old_shape[mode]
    m = mttkrp(xhat, factors, mode)
    g = gram_hadamard(factors, mode)
    p_l = g + beta * np.eye(rank)
    p_u = p_l.copy()
    q_u = m[:old].copy()
    if alpha > 0 and prev_factors is not None:
        h_u, h_a = alpha_grams(factors, prev_factors, old_shape, mode)
        p_u += alpha * h_u
        q_u += alpha * (prev_factors[mode] @ h_a)
    return p_u, q_u, p_l, m[old:]


def init_lower(uppers, delta, mode, old_shape, new_shape, beta, rng,
               jitter=DEFAULT_JITTER):
    """Least-squares initialization of the rows appended to ``mode``.

    Each new row is fitted on its own to the new entries whose other
    coordinates lie inside the old bounds, using the upper blocks of the other
    modes. Rows without such entries are drawn from Uniform[0, 1].
    """
    rank = uppers[0].shape[1]
    old, new = old_shape[mode], new_shape[mode]
    lower = np.random.default_rng(rng).random((new - old, rank))
    if new == old or delta.nnz == 0:
        return lower
    idx = delta.indices
    keep = idx[:, mode] >= old
    for k, bound in enumerate(old_shape):
        if k != mode:
            keep &= idx[:, k] < bound
    sub = delta.select(keep)
    if sub.nnz == 0:
        return lower
    grams, rhs, counts = kernels.row_systems(
        sub.indices, sub.values, uppers, mode, new - old, row_offset=old
    )
    _add_ridge(grams, beta)
    rows = np.flatnonzero(counts > 0)
    lower[rows] = spd_solve_batch(grams[rows], rhs[rows], jitter)
    return lower


def init_blocks(prev, step, beta, rng, jitter=DEFAULT_JITTER):
    """Upper blocks copied from ``prev``, lower blocks from :func:`init_lower`."""
    old_shape, new_shape = prev.shape, tuple(step.shape)
    if len(new_shape) != len(old_shape) or any(
        n < o for n, o in zip(new_shape, old_shape)
    ):
        raise ValueError(f"cannot evolve shape {old_shape} into {new_shape}")
    uppers = prev.copy_factors()
    rng = np.random.default_rng(rng)
    factors = []
    for n, upper in enumerate(uppers):
        if new_shape[n] == old_shape[n]:
            factors.append(upper.copy())
            continue
        lower = init_lower(uppers, step.delta, n, old_shape, new_shape, beta, rng, jitter)
        factors.append(np.vstack([upper, lower]))
    return factors
