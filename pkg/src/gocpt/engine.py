"""Online CP solver for evolving tensors (GOCPT and GOCPT_E).

Each time step re-fits the factors to

    ||(X - [[A_1, ..., A_N]])_mask||^2
        + alpha * ||[[A_1^{t-1}, ...]] - [[U_1, ..., U_N]]||^2
        + beta * sum_n ||A_n||^2

where ``U_n`` is the upper block of ``A_n`` (rows that existed at ``t - 1``)
and the reconstruction term runs over the whole old bounding box. The
``full`` variant fits on every observed entry; the ``efficient`` variant only
sees the entries that are new or changed in this step and never touches the
historical data.

One step = block initialization followed by exactly one sweep over the modes,
updating the upper then the lower block of each mode with either the sparse
(row-wise) or the dense (impute, then block) strategy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gocpt.baselines import fit_static
from gocpt.solve import (
    DEFAULT_JITTER,
    SolverError,
    alpha_grams,
    dense_block_systems,
    init_blocks,
    init_lower,
    kernels,
    spd_solve,
    sparse_mode_update,
)
from gocpt.tensor import CooTensor, KruskalModel, kruskal_at_coo, kruskal_reconstruct

__all__ = [
    "EngineConfig",
    "EngineState",
    "RowSystem",
    "Schedule",
    "SolverError",
    "StepDelta",
    "build_row_system",
    "dense_block_update",
    "dense_impute",
    "engine_step",
    "init_lower",
    "init_prep",
    "init_upper",
    "load_checkpoint",
    "objective_value",
    "save_checkpoint",
    "sparse_row_update",
]

VARIANTS = ("full", "efficient")
STRATEGIES = ("sparse", "dense")


@dataclass(frozen=True)
class Schedule:
    """Per-step hyperparameter value.

    ``const:V`` gives ``V``; ``over-growth:V`` gives ``V / I`` and
    ``capped-over-growth:V`` gives ``min(1, V / I)``, with ``I`` the current
    size of the growing mode.
    """

    kind: str = "const"
    value: float = 0.0

    KINDS = ("const", "over-growth", "capped-over-growth")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.value >= 0:
            raise ValueError("schedule values must be non-negative")

    def __call__(self, t, growth_dim):
        if self.kind == "const":
            return self.value
        ratio = self.value / growth_dim
        return min(1.0, ratio) if self.kind == "capped-over-growth" else ratio

    @classmethod
    def parse(cls, text):
        if isinstance(text, Schedule):
            return text
        if isinstance(text, (int, float)):
            return cls("const", float(text))
        kind, sep, value = str(text).partition(":")
        if not sep:
            return cls("const", float(kind))
        return cls(kind.strip(), float(value))

    def __str__(self):
        return f"{self.kind}:{self.value!r}"


# alpha per (setting, variant), beta = 1e-5 throughout
ALPHA_PRESETS = {
    ("general", "full"): Schedule("over-growth", 0.02),
    ("general", "efficient"): Schedule("over-growth", 2.0),
    ("factorization", "full"): Schedule("over-growth", 0.02),
    ("factorization", "efficient"): Schedule("over-growth", 2.0),
    ("factorization-real", "full"): Schedule("over-growth", 2.0),
    ("factorization-real", "efficient"): Schedule("capped-over-growth", 200.0),
    ("completion", "full"): Schedule("over-growth", 0.005),
    ("completion", "efficient"): Schedule("over-growth", 0.5),
}
DEFAULT_BETA = 1e-5


@dataclass(frozen=True)
class EngineConfig:
    variant: str = "efficient"
    strategy: str = "sparse"
    rank: int = 5
    alpha: Schedule = field(default_factory=lambda: Schedule("over-growth", 2.0))
    beta: Schedule = field(default_factory=lambda: Schedule("const", DEFAULT_BETA))
    solve_jitter: float = DEFAULT_JITTER
    prep_iters: int = 200

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.rank < 1:
            raise ValueError("rank must be at least 1")
        if self.solve_jitter < 0:
            raise ValueError("jitter must be non-negative")
        if self.prep_iters < 1:
            raise ValueError("prep_iters must be positive")
        object.__setattr__(self, "alpha", Schedule.parse(self.alpha))
        object.__setattr__(self, "beta", Schedule.parse(self.beta))

    @classmethod
    def preset(cls, setting, variant, strategy=None, **kw):
        """Configuration with the alpha/beta schedule for a named setting."""
        if strategy is None:
            strategy = "dense" if setting.startswith("factorization") else "sparse"
        return cls(
            variant=variant,
            strategy=strategy,
            alpha=ALPHA_PRESETS[(setting, variant)],
            **kw,
        )


@dataclass(frozen=True, eq=False)
class StepDelta:
    """What one step hands to a solver.

    ``delta`` holds the current values on the new/changed cells; ``full``
    holds every observed entry and is only read by the full variant and the
    baselines.
    """

    shape: tuple
    delta: CooTensor
    full: CooTensor | None = None

    @classmethod
    def from_state(cls, state, with_full=True):
        """Build from an :class:`~gocpt.evolution.EvolvingState` after a step."""
        return cls(state.shape, state.delta_data(), state.observed if with_full else None)


@dataclass(frozen=True, eq=False)
class EngineState:
    model: KruskalModel
    prev_model: KruskalModel
    retained: CooTensor | None = None
    t: int = 0
    growth_dim: int = 1
    seed: int = 0


@dataclass(frozen=True, eq=False)
class RowSystem:
    gram: np.ndarray
    rhs: np.ndarray


def init_prep(prep, config, seed, growth_dim=None):
    """Fit the initial factors on the preparation data."""
    if prep.nnz == 0:
        raise ValueError("preparation data is empty")
    growth_dim = growth_dim or max(prep.shape)
    beta = config.beta(0, growth_dim)
    model = fit_static(prep, config.rank, config.prep_iters, beta, seed, config.solve_jitter)
    retained = prep if config.variant == "full" else None
    return EngineState(model, model, retained, 0, growth_dim, int(seed))


def init_upper(prev):
    """Upper blocks start as copies of the previous factors."""
    return prev.copy_factors()


def build_row_system(data, factors, mode, row, alpha, beta, prev_factors=None,
                     old_shape=None):
    """Normal equations of one factor row.

    ``data`` entries outside row ``row`` of ``mode`` are ignored. The
    reconstruction term is included only for old rows.
    """
    rank = factors[0].shape[1]
    sel = data.select(data.indices[:, mode] == row)
    grams, rhs, _ = kernels.row_systems(sel.indices, sel.values, factors, mode, 1, row)
    gram = grams[0] + beta * np.eye(rank)
    rhs = rhs[0]
    if alpha > 0 and old_shape is not None and row < old_shape[mode]:
        h_u, h_a = alpha_grams(factors, prev_factors, old_shape, mode)
        gram = gram + alpha * h_u
        rhs = rhs + alpha * (prev_factors[mode][row] @ h_a)
    return RowSystem(gram, rhs)


def sparse_row_update(system, jitter=DEFAULT_JITTER):
    """Minimizer ``q P^{-1}`` of the row objective."""
    return spd_solve(system.gram, system.rhs, jitter)


def dense_impute(observed, init_model):
    """Observed values on their cells, the initial reconstruction elsewhere."""
    if observed.shape != init_model.shape:
        raise ValueError("observation shape does not match the model")
    xhat = kruskal_reconstruct(init_model)
    xhat.reshape(-1)[observed.keys] = observed.values
    return xhat


def dense_block_update(xhat, factors, mode, alpha, beta, prev_factors=None,
                       old_shape=None, jitter=DEFAULT_JITTER):
    """New ``(U, L)`` blocks of ``mode`` from the imputed tensor."""
    p_u, q_u, p_l, q_l = dense_block_systems(
        xhat, factors, mode, beta, alpha, prev_factors, old_shape
    )
    return spd_solve(p_u, q_u, jitter), spd_solve(p_l, q_l, jitter)


def _sweep_sparse(factors, data, prev, old_shape, alpha, beta, jitter):
    for n in range(len(factors)):
        factors[n] = sparse_mode_update(
            factors, data, n, beta, alpha, prev.factors, old_shape, jitter
        )
    return factors


def _sweep_dense(factors, xhat, prev, old_shape, alpha, beta, jitter, on_block=None):
    for n in range(len(factors)):
        upper, lower = dense_block_update(
            xhat, factors, n, alpha, beta, prev.factors, old_shape, jitter
        )
        factors[n] = np.vstack([upper, factors[n][old_shape[n]:]])
        if on_block is not None:
            on_block(n, "U", factors)
        factors[n] = np.vstack([upper, lower])
        if on_block is not None:
            on_block(n, "L", factors)
    return factors


def engine_step(state, step, config, on_block=None):
    """Advance the factorization by one time step.

    ``on_block(mode, "U" | "L", factors)`` is called after every block update
    of the dense strategy.
    """
    prev = state.model
    old_shape, new_shape = prev.shape, tuple(step.shape)
    grown = [n for n, (a, b) in enumerate(zip(old_shape, new_shape)) if b > a]
    growth_dim = max(new_shape[n] for n in grown) if grown else state.growth_dim
    t = state.t + 1
    alpha = config.alpha(t, growth_dim)
    beta = config.beta(t, growth_dim)
    jitter = config.solve_jitter

    if config.variant == "full":
        if step.full is None:
            raise ValueError("the full variant needs all observed data every step")
        data = step.full
    else:
        data = step.delta
    if data.shape != new_shape:
        raise ValueError(f"step data shape {data.shape} differs from {new_shape}")

    rng = np.random.default_rng([state.seed, t])
    factors = init_blocks(prev, step, beta, rng, jitter)
    if config.strategy == "sparse":
        factors = _sweep_sparse(factors, data, prev, old_shape, alpha, beta, jitter)
    else:
        xhat = dense_impute(data, KruskalModel(factors))
        factors = _sweep_dense(factors, xhat, prev, old_shape, alpha, beta, jitter, on_block)

    model = KruskalModel(factors)
    retained = step.full if config.variant == "full" else None
    return EngineState(model, model, retained, t, growth_dim, state.seed)


def _old_box_sq_residual(prev, current, chunk_cells=1 << 20):
    """``||[[prev]] - [[current restricted to prev's bounds]]||^2``, in slabs."""
    shape = prev.shape
    diff = [
        np.hstack([p, -c[: p.shape[0]] if k == 0 else c[: p.shape[0]]])
        for k, (p, c) in enumerate(zip(prev.factors, current.factors))
    ]
    rest = math.prod(shape[1:]) if len(shape) > 1 else 1
    step = max(1, chunk_cells // max(rest, 1))
    total = 0.0
    for lo in range(0, shape[0], step):
        part = [diff[0][lo : lo + step]] + diff[1:]
        total += float(np.sum(kruskal_reconstruct(part) ** 2))
    return total


def objective_value(model, prev_model, data, alpha, beta):
    """Fit on ``data`` + alpha * old-box reconstruction gap + beta * L2."""
    if data.shape != model.shape:
        raise ValueError("data shape does not match the model")
    resid = data.values - kruskal_at_coo(model, data) if data.nnz else np.zeros(0)
    value = float(resid @ resid)
    if alpha:
        value += alpha * _old_box_sq_residual(prev_model, model)
    if beta:
        value += beta * sum(float(np.sum(f * f)) for f in model.factors)
    return value


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(path, state):
    """JSON checkpoint; floats are written with round-trip exact repr."""
    doc = {
        "shape": list(state.model.shape),
        "rank": state.model.rank,
        "t": state.t,
        "growth_dim": state.growth_dim,
        "seed": state.seed,
        "factors": [f.reshape(-1).tolist() for f in state.model.factors],
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_checkpoint(path, retained=None):
    doc = json.loads(Path(path).read_text())
    rank = int(doc["rank"])
    factors = [
        np.asarray(flat, dtype=np.float64).reshape(int(d), rank)
        for flat, d in zip(doc["factors"], doc["shape"])
    ]
    model = KruskalModel(factors)
    return EngineState(
        model,
        model,
        retained,
        int(doc["t"]),
        int(doc.get("growth_dim", max(model.shape))),
        int(doc.get("seed", 0)),
    )
