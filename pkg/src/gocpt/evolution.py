"""Evolving-tensor state machine, synthetic workloads and the event-log format.

A time step is a list of events applied atomically in the order
growth -> fill -> update, with every index validated against the post-growth
bounds. ``EvolvingState.delta`` is the set of cells introduced or changed by
the last step; the unchanged old cells are ``state.old_mask``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gocpt.tensor import CooTensor, IndexSet, KruskalModel, check_shape, decode, encode
from gocpt.tensor import kruskal_reconstruct

_TRUTH_STREAM = 0x7472


class EvolutionError(ValueError):
    """A step is inconsistent with the state it is applied to."""


def _entries(indices, values, ndim):
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        idx = np.zeros((0, ndim), dtype=np.int64)
    vals = np.asarray(values, dtype=np.float64).reshape(-1)
    if idx.ndim != 2 or idx.shape[1] != ndim or idx.shape[0] != vals.shape[0]:
        raise EvolutionError(f"event entries must be (m, {ndim}) indices with m values")
    return idx, vals


@dataclass(frozen=True, eq=False)
class _Event:
    indices: np.ndarray
    values: np.ndarray

    @property
    def nnz(self):
        return int(self.values.shape[0])

    def entry_rows(self):
        return [list(map(int, i)) + [float(v)] for i, v in zip(self.indices, self.values)]


@dataclass(frozen=True, eq=False)
class ModeGrowth(_Event):
    """Append ``grow_by`` slices to ``mode``; entries lie in the new slices."""

    mode: int = 0
    grow_by: int = 1
    kind = "grow"


@dataclass(frozen=True, eq=False)
class Fill(_Event):
    """Observe previously unobserved cells."""

    kind = "fill"


@dataclass(frozen=True, eq=False)
class Update(_Event):
    """Revise the values of previously observed cells."""

    kind = "update"


def growth(mode, grow_by, indices, values, ndim=None):
    ndim = ndim or np.asarray(indices).shape[-1]
    idx, vals = _entries(indices, values, ndim)
    if grow_by < 1:
        raise EvolutionError("grow_by must be positive")
    return ModeGrowth(idx, vals, mode=int(mode), grow_by=int(grow_by))


def fill(indices, values, ndim=None):
    ndim = ndim or np.asarray(indices).shape[-1]
    return Fill(*_entries(indices, values, ndim))


def update(indices, values, ndim=None):
    ndim = ndim or np.asarray(indices).shape[-1]
    return Update(*_entries(indices, values, ndim))


@dataclass(frozen=True)
class EvolutionStep:
    events: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))

    @property
    def nnz(self):
        return sum(e.nnz for e in self.events)


@dataclass(frozen=True, eq=False)
class EvolvingState:
    """Immutable snapshot of an evolving, partially observed tensor.

    ``observed`` is kept sorted by linear key.
    """

    observed: CooTensor
    prev_shape: tuple
    delta: IndexSet
    t: int = 0

    @property
    def shape(self):
        return self.observed.shape

    @classmethod
    def initial(cls, observed):
        observed = observed.sorted()
        return cls(observed, observed.shape, IndexSet.empty(observed.shape), 0)

    @property
    def mask(self):
        return IndexSet(self.shape, self.observed.keys, sorted_unique=True)

    @property
    def old_mask(self):
        """Observed cells unchanged by the last step."""
        return self.mask - self.delta

    def delta_data(self):
        """Current values on the cells of the last step's delta."""
        pos = np.searchsorted(self.observed.keys, self.delta.keys)
        return self.observed.select(pos)

    def __eq__(self, other):
        if not isinstance(other, EvolvingState):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.prev_shape == other.prev_shape
            and self.t == other.t
            and self.delta == other.delta
            and np.array_equal(self.observed.indices, other.observed.indices)
            and np.array_equal(self.observed.values, other.observed.values)
        )


def _member(sorted_keys, keys):
    if sorted_keys.size == 0:
        return np.zeros(keys.size, dtype=bool)
    pos = np.minimum(np.searchsorted(sorted_keys, keys), sorted_keys.size - 1)
    return sorted_keys[pos] == keys


def _fmt(idx):
    return tuple(int(v) for v in idx)


def apply_step(state, step):
    """Apply one composite step, returning a new snapshot."""
    ndim = len(state.shape)
    old_shape = state.shape
    shape = list(old_shape)
    grows = [e for e in step.events if isinstance(e, ModeGrowth)]
    fills = [e for e in step.events if isinstance(e, Fill)]
    updates = [e for e in step.events if isinstance(e, Update)]
    if len(grows) + len(fills) + len(updates) != len(step.events):
        raise EvolutionError("unknown event type in step")

    seen_modes = set()
    for g in grows:
        if not 0 <= g.mode < ndim:
            raise EvolutionError(f"growth mode {g.mode} out of range")
        if g.mode in seen_modes:
            raise EvolutionError(f"mode {g.mode} grows twice in one step")
        seen_modes.add(g.mode)
        shape[g.mode] += g.grow_by
    shape = tuple(shape)

    for ev in grows + fills + updates:
        if ev.indices.shape[1] != ndim:
            raise EvolutionError(f"{ev.kind} entries have the wrong order")
        bad = ((ev.indices < 0) | (ev.indices >= np.asarray(shape))).any(axis=1)
        if bad.any():
            raise EvolutionError(
                f"{ev.kind} entry {_fmt(ev.indices[np.argmax(bad)])} out of bounds "
                f"for shape {shape}"
            )
    for g in grows:
        low = g.indices[:, g.mode] < old_shape[g.mode]
        if low.any():
            raise EvolutionError(
                f"growth entry {_fmt(g.indices[np.argmax(low)])} is not in an "
                f"appended slice of mode {g.mode}"
            )

    old_keys = state.observed.keys if shape == old_shape else encode(
        state.observed.indices, shape
    )

    def keys_of(events):
        if not events:
            return np.zeros(0, dtype=np.int64), np.zeros((0, ndim), dtype=np.int64)
        idx = np.concatenate([e.indices for e in events])
        return encode(idx, shape), idx

    new_keys, new_idx = keys_of(grows + fills)
    upd_keys, upd_idx = keys_of(updates)
    all_keys = np.concatenate([new_keys, upd_keys])
    uniq, counts = np.unique(all_keys, return_counts=True)
    if uniq.size != all_keys.size:
        dup = decode(uniq[counts > 1][:1], shape)[0]
        raise EvolutionError(f"index {_fmt(dup)} appears twice in one step")

    clash = _member(old_keys, new_keys)
    if clash.any():
        raise EvolutionError(f"fill at observed cell {_fmt(new_idx[np.argmax(clash)])}")
    values = state.observed.values.copy()
    if upd_keys.size:
        found = _member(old_keys, upd_keys)
        pos = np.searchsorted(old_keys, upd_keys)
        if not found.all():
            raise EvolutionError(
                f"update at unobserved cell {_fmt(upd_idx[np.argmin(found)])}"
            )
        values[pos] = np.concatenate([e.values for e in updates])

    new_vals = (
        np.concatenate([e.values for e in grows + fills])
        if grows or fills
        else np.zeros(0)
    )
    keys = np.concatenate([old_keys, new_keys])
    vals = np.concatenate([values, new_vals])
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    observed = CooTensor(shape, decode(keys, shape), vals[order], check=False)
    observed._keys = keys
    delta = IndexSet(shape, np.concatenate([new_keys, upd_keys]))
    return EvolvingState(observed, old_shape, delta, state.t + 1)


def replay(state, steps):
    """Apply steps in order; returns the list of snapshots after each step."""
    out = []
    for step in steps:
        state = apply_step(state, step)
        out.append(state)
    return out


# --------------------------------------------------------------------------
# synthetic workloads
# --------------------------------------------------------------------------


def gen_low_rank(shape, rank, seed):
    """Uniform[0, 1] CP factors and their exact reconstruction.

    The factors come from their own seed stream, so a solver started with
    ``KruskalModel.random(shape, rank, seed)`` never begins at the truth.
    """
    rng = np.random.default_rng([_TRUTH_STREAM, seed])
    model = KruskalModel.random(check_shape(shape), rank, rng)
    return model, kruskal_reconstruct(model)


def gen_mask(shape, density, seed):
    """Uniformly sampled observation mask with ``round(density * cells)`` cells."""
    shape = check_shape(shape)
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must lie in (0, 1], got {density}")
    cells = math.prod(shape)
    count = round(density * cells)
    if count < 1:
        raise ValueError(f"density {density} leaves no observed cell")
    if count == cells:
        return IndexSet.full(shape)
    rng = np.random.default_rng(seed)
    return IndexSet(shape, rng.choice(cells, size=count, replace=False))


def gen_perturbation(state, fraction=0.02, magnitude=0.05, seed=None):
    """Update ``round(fraction * |observed|)`` random cells by ``v * (1 + u)``."""
    nnz = state.observed.nnz
    if nnz == 0:
        raise ValueError("cannot perturb a state without observations")
    rng = np.random.default_rng(seed)
    count = round(fraction * nnz)
    pick = np.sort(rng.choice(nnz, size=count, replace=False))
    noise = rng.uniform(-magnitude, magnitude, size=count)
    vals = state.observed.values[pick] * (1.0 + noise)
    return EvolutionStep((update(state.observed.indices[pick], vals, len(state.shape)),))


def _prep_count(size, prep_fraction):
    # tolerance guards against 0.1 * 200 == 20.000000000000004
    prep = math.ceil(prep_fraction * size - 1e-9)
    if prep < 1:
        raise ValueError("preparation fraction leaves no preparation slice")
    if prep >= size:
        raise ValueError("preparation fraction leaves no slice to stream")
    return prep


def _slice_coo(truth, mode, lo, hi, observed=None):
    """Entries of ``truth`` with ``lo <= i_mode < hi`` (optionally masked)."""
    sub = [slice(None)] * truth.ndim
    sub[mode] = slice(lo, hi)
    block = truth[tuple(sub)]
    keep = np.ones(block.shape, dtype=bool) if observed is None else observed[tuple(sub)]
    idx = np.argwhere(keep)
    idx[:, mode] += lo
    return idx.astype(np.int64), truth[tuple(idx.T)] if idx.size else np.zeros(0)


def stream_slice_growth(truth, mask=None, prep_fraction=0.10, temporal_mode=-1):
    """Leading slices as preparation data, then one new slice per step."""
    truth = np.asarray(truth, dtype=np.float64)
    mode = temporal_mode % truth.ndim
    prep = _prep_count(truth.shape[mode], prep_fraction)
    observed = None if mask is None else (
        mask.to_mask() if isinstance(mask, IndexSet) else np.asarray(mask, bool)
    )
    idx, vals = _slice_coo(truth, mode, 0, prep, observed)
    prep_shape = list(truth.shape)
    prep_shape[mode] = prep
    state = EvolvingState.initial(CooTensor(prep_shape, idx, vals, check=False))
    steps = []
    for s in range(prep, truth.shape[mode]):
        idx, vals = _slice_coo(truth, mode, s, s + 1, observed)
        steps.append(EvolutionStep((growth(mode, 1, idx, vals, truth.ndim),)))
    return state, steps


def stream_general(
    truth, gd_mode=-1, lag=3, perturb=(0.02, 0.05), prep_fraction=0.5, seed=None
):
    """Growth along ``gd_mode`` with delayed fills and optional value updates.

    Each slice's cells are split uniformly at random into ``lag`` portions.
    Portion ``j`` of a slice born at step ``b`` is observed at step ``b + j``.
    Preparation slices are treated as born at steps ``-(prep - 1) .. 0``, so
    the latest ones may still be incomplete at ``t = 0``. When ``perturb`` is
    a ``(fraction, magnitude)`` pair, each step also updates that fraction of
    the previously observed cells.
    """
    truth = np.asarray(truth, dtype=np.float64)
    if lag < 1 or int(lag) != lag:
        raise ValueError(f"lag must be a positive integer, got {lag}")
    lag = int(lag)
    mode = gd_mode % truth.ndim
    size = truth.shape[mode]
    prep = _prep_count(size, prep_fraction)
    rng = np.random.default_rng(seed)

    slice_shape = truth.shape[:mode] + truth.shape[mode + 1 :]
    cells = math.prod(slice_shape)
    portions = []
    for _ in range(size):
        order = rng.permutation(cells)
        portions.append(np.array_split(order, lag))

    def portion_entries(s, j):
        local = np.stack(np.unravel_index(portions[s][j], slice_shape), axis=1)
        idx = np.insert(local, mode, s, axis=1).astype(np.int64)
        return idx, truth[tuple(idx.T)]

    def birth(s):
        return s - (prep - 1)

    init_parts = [
        portion_entries(s, j)
        for s in range(prep)
        for j in range(min(lag, 1 - birth(s)))
    ]
    prep_shape = list(truth.shape)
    prep_shape[mode] = prep
    idx = np.concatenate([p[0] for p in init_parts])
    vals = np.concatenate([p[1] for p in init_parts])
    state = initial = EvolvingState.initial(CooTensor(prep_shape, idx, vals))

    steps = []
    for t in range(1, size - prep + 1):
        events = []
        g_idx, g_vals = portion_entries(prep - 1 + t, 0)
        events.append(growth(mode, 1, g_idx, g_vals, truth.ndim))
        f_parts = [
            portion_entries(s, t - birth(s))
            for s in range(max(0, prep - 1 + t - (lag - 1)), prep - 1 + t)
            if 0 < t - birth(s) < lag
        ]
        if f_parts:
            events.append(
                fill(
                    np.concatenate([p[0] for p in f_parts]),
                    np.concatenate([p[1] for p in f_parts]),
                    truth.ndim,
                )
            )
        if perturb is not None:
            fraction, magnitude = perturb
            events.extend(gen_perturbation(state, fraction, magnitude, rng).events)
        step = EvolutionStep(tuple(events))
        state = apply_step(state, step)
        steps.append(step)
    return initial, steps


# --------------------------------------------------------------------------
# event log (JSON lines)
# --------------------------------------------------------------------------


def _event_to_json(ev):
    out = {"type": ev.kind}
    if isinstance(ev, ModeGrowth):
        out["mode"] = ev.mode
        out["by"] = ev.grow_by
    out["entries"] = ev.entry_rows()
    return out


def _event_from_json(obj, ndim, lineno):
    kind = obj.get("type")
    rows = np.asarray(obj.get("entries", []), dtype=np.float64).reshape(-1, ndim + 1)
    idx = rows[:, :ndim]
    if not np.array_equal(idx, np.round(idx)):
        raise EvolutionError(f"line {lineno}: non-integer index")
    idx = idx.astype(np.int64)
    vals = rows[:, ndim]
    if kind == "grow":
        return growth(obj["mode"], obj.get("by", 1), idx, vals, ndim)
    if kind == "fill":
        return fill(idx, vals, ndim)
    if kind == "update":
        return update(idx, vals, ndim)
    raise EvolutionError(f"line {lineno}: unknown event type {kind!r}")


def write_event_log(path, initial, steps):
    """Write the initial observations (line ``t = 0``) and one line per step.

    The ``t = 0`` line also carries ``"shape"``: its events are fills on an
    empty tensor of that shape.
    """
    lines = [
        json.dumps(
            {
                "t": 0,
                "shape": list(initial.shape),
                "events": [
                    {"type": "fill", "entries": fill(
                        initial.observed.indices, initial.observed.values
                    ).entry_rows()}
                ],
            }
        )
    ]
    for t, step in enumerate(steps, start=1):
        lines.append(json.dumps({"t": t, "events": [_event_to_json(e) for e in step.events]}))
    Path(path).write_text("\n".join(lines) + "\n")


def read_event_log(path):
    """Inverse of :func:`write_event_log`; returns ``(initial_state, steps)``."""
    initial = None
    steps = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise EvolutionError(f"line {lineno}: {exc}") from None
            if initial is None:
                if "shape" not in obj:
                    raise EvolutionError("line 1: first record must carry 'shape'")
                shape = check_shape(obj["shape"])
                events = [_event_from_json(e, len(shape), lineno) for e in obj["events"]]
                empty = EvolvingState.initial(CooTensor.empty(shape))
                initial = EvolvingState.initial(
                    apply_step(empty, EvolutionStep(events)).observed
                )
                continue
            if obj.get("t") != len(steps) + 1:
                raise EvolutionError(f"line {lineno}: expected t={len(steps) + 1}")
            ndim = len(initial.shape)
            steps.append(
                EvolutionStep([_event_from_json(e, ndim, lineno) for e in obj["events"]])
            )
    if initial is None:
        raise EvolutionError(f"{path}: empty event log")
    return initial, steps
