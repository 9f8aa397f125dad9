"""Reference solvers: CPC-ALS, EM-ALS and EM-ALS with decaying slice weights.

The online variants re-fit on all observed data at every step, after the same
lower-block initialization used by the online engine.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from gocpt.solve import (
    DEFAULT_JITTER,
    init_blocks,
    spd_solve,
    spd_solve_batch,
    sparse_mode_update,
)
from gocpt.tensor import KruskalModel, gram_hadamard, kruskal_reconstruct, mttkrp

METHODS = ("em_als", "em_als_decay", "cpc_als")


@dataclass(frozen=True)
class BaselineConfig:
    method: str = "cpc_als"
    rank: int = 5
    iters_per_step: int = 1
    decay: float = 0.99
    beta: float = 1e-5
    temporal_mode: int = -1
    solve_jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown baseline method {self.method!r}")
        if self.rank < 1:
            raise ValueError("rank must be at least 1")
        if self.iters_per_step < 1:
            raise ValueError("iters_per_step must be at least 1")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


@dataclass(frozen=True, eq=False)
class BaselineState:
    model: KruskalModel
    t: int = 0
    seed: int = 0


def cpc_als_sweep(data, model, beta, jitter=DEFAULT_JITTER):
    """One sweep of masked row-wise ridge ALS over all modes.

    Rows without any observed entry keep their current value.
    """
    if data.shape != model.shape:
        raise ValueError(f"data shape {data.shape} does not match {model!r}")
    factors = model.copy_factors()
    for n in range(model.ndim):
        factors[n] = sparse_mode_update(factors, data, n, beta, jitter=jitter)
    return KruskalModel(factors)


def impute(data, model):
    """Observed entries where available, the reconstruction elsewhere."""
    if data.nnz == int(np.prod(data.shape)):
        return data.to_dense()
    xhat = kruskal_reconstruct(model)
    xhat.reshape(-1)[data.keys] = data.values
    return xhat


def decay_weights(size, decay):
    """``decay ** (size - 1 - k)`` for slice ``k``; the newest slice gets 1."""
    return decay ** np.arange(size - 1, -1, -1, dtype=np.float64)


def em_als_sweep(data, model, beta, weights=None, temporal_mode=-1,
                 jitter=DEFAULT_JITTER):
    """Impute with the current model, then one (slice-weighted) ALS sweep."""
    if data.shape != model.shape:
        raise ValueError(f"data shape {data.shape} does not match {model!r}")
    xhat = impute(data, model)
    factors = model.copy_factors()
    rank = model.rank
    eye = np.eye(rank)
    tm = temporal_mode % model.ndim
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (model.shape[tm],):
            raise ValueError("need one weight per slice of the temporal mode")
        shape = [1] * model.ndim
        shape[tm] = -1
        weighted = xhat * weights.reshape(shape)
    for n in range(model.ndim):
        if weights is None:
            p = gram_hadamard(factors, n) + beta * eye
            factors[n] = spd_solve(p, mttkrp(xhat, factors, n), jitter)
        elif n == tm:
            g = gram_hadamard(factors, n)
            m = mttkrp(xhat, factors, n)
            grams = weights[:, None, None] * g + beta * eye
            factors[n] = spd_solve_batch(grams, weights[:, None] * m, jitter)
        else:
            g = np.ones((rank, rank))
            for k, f in enumerate(factors):
                if k == n:
                    continue
                g *= (f.T * weights) @ f if k == tm else f.T @ f
            factors[n] = spd_solve(g + beta * eye, mttkrp(weighted, factors, n), jitter)
    return KruskalModel(factors)


def fit_static(data, rank, iters, beta, seed, jitter=DEFAULT_JITTER):
    """Fit a CP model to a static (possibly masked) tensor from Uniform[0, 1].

    Fully observed data uses EM-ALS (plain ALS); otherwise CPC-ALS.
    """
    if data.nnz == 0:
        raise ValueError("cannot fit a model to an empty tensor")
    model = KruskalModel.random(data.shape, rank, np.random.default_rng(seed))
    full = data.nnz == int(np.prod(data.shape))
    for _ in range(iters):
        if full:
            model = em_als_sweep(data, model, beta, jitter=jitter)
        else:
            model = cpc_als_sweep(data, model, beta, jitter=jitter)
    return model


def sweep(data, model, config):
    if config.method == "cpc_als":
        return cpc_als_sweep(data, model, config.beta, config.solve_jitter)
    weights = None
    if config.method == "em_als_decay":
        tm = config.temporal_mode % model.ndim
        weights = decay_weights(model.shape[tm], config.decay)
    return em_als_sweep(
        data, model, config.beta, weights, config.temporal_mode, config.solve_jitter
    )


def baseline_step(state, step, config):
    """Initialize new rows like the online engine, then re-fit on all data."""
    if step.full is None:
        raise ValueError("baselines need the full observed tensor at every step")
    rng = np.random.default_rng([state.seed, state.t + 1])
    factors = init_blocks(state.model, step, config.beta, rng, config.solve_jitter)
    model = KruskalModel(factors)
    for _ in range(config.iters_per_step):
        model = sweep(step.full, model, config)
    return replace(state, model=model, t=state.t + 1)
