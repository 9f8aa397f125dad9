"""Experiment runner behind the ``gocpt`` command line.

A run builds one evolution stream per seed, fits every solver on the
preparation data, replays the stream step by step and records a
:class:`StepRecord` per step. Only the solver step itself is timed; stream
replay, metric evaluation and I/O are excluded.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from gocpt.baselines import (
    BaselineConfig,
    BaselineState,
    baseline_step,
    cpc_als_sweep,
    em_als_sweep,
    fit_static,
)
from gocpt.engine import EngineConfig, Schedule, StepDelta, engine_step, init_prep
from gocpt.evolution import (
    gen_low_rank,
    gen_mask,
    read_event_log,
    replay,
    stream_general,
    stream_slice_growth,
    write_event_log,
)
from gocpt.solve import SolverError
from gocpt.svg import line_chart
from gocpt.tensor import (
    CooTensor,
    KruskalModel,
    check_shape,
    pof_completion,
    pof_factorization,
    pof_observed,
    read_coo,
    write_coo,
)

SCENARIOS = ("general", "factorization", "completion", "replay")
ENGINE_SOLVERS = {"gocpt": "full", "gocpt_e": "efficient"}
BASELINE_SOLVERS = ("em_als", "em_als_decay", "cpc_als")
SOLVERS = tuple(ENGINE_SOLVERS) + BASELINE_SOLVERS
STEP_HEADER = ("solver", "seed", "t", "pof", "step_time_ms", "nnz_delta", "shape")
ABLATION_HEADER = ("seed", "density", "strategy", "time_ms", "pof")
DEFAULT_PREP = {"general": 0.5, "factorization": 0.1, "completion": 0.1}


class HarnessError(ValueError):
    """Invalid experiment description or unreadable input file."""


@dataclass(frozen=True)
class ExperimentSpec:
    scenario: str = "general"
    shape: tuple = (20, 20, 200)
    rank: int = 5
    density: float = 0.02
    prep_fraction: float | None = None
    seeds: tuple = (0,)
    solvers: tuple = ("gocpt",)
    strategy: str | None = None
    alpha_schedule: str | None = None
    beta: float = 1e-5
    lag: int = 3
    perturb: tuple | None = (0.02, 0.05)
    prep_iters: int = 200
    temporal_mode: int = -1
    data_seed: int = 0
    tensor: str | None = None
    mask: str | None = None
    events: str | None = None
    out: str = "results"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise HarnessError(f"unknown scenario {self.scenario!r}; pick from {SCENARIOS}")
        if not self.solvers:
            raise HarnessError("at least one solver is required")
        for s in self.solvers:
            if s not in SOLVERS:
                raise HarnessError(f"unknown solver {s!r}; pick from {SOLVERS}")
        if len(set(self.solvers)) != len(self.solvers):
            raise HarnessError("solver list has duplicates")
        if not self.seeds:
            raise HarnessError("at least one seed is required")
        if self.scenario == "replay" and not self.events:
            raise HarnessError("the replay scenario needs an event log (--events)")
        if self.scenario != "replay" and self.events:
            raise HarnessError("an event log can only be used with --scenario replay")
        if self.mask and not self.tensor:
            raise HarnessError("a mask file needs a tensor file")
        if self.tensor is None:
            try:
                object.__setattr__(self, "shape", check_shape(self.shape))
            except (TypeError, ValueError) as exc:
                raise HarnessError(str(exc)) from None
        if self.rank < 1:
            raise HarnessError("rank must be at least 1")
        if not 0.0 < self.density <= 1.0:
            raise HarnessError("density must lie in (0, 1]")
        if self.prep_fraction is not None and not 0.0 < self.prep_fraction < 1.0:
            raise HarnessError("prep fraction must lie in (0, 1)")
        if self.strategy not in (None, "sparse", "dense"):
            raise HarnessError("strategy must be sparse or dense")
        if self.alpha_schedule is not None:
            try:
                Schedule.parse(self.alpha_schedule)
            except ValueError as exc:
                raise HarnessError(f"bad alpha schedule: {exc}") from None
        if self.beta < 0:
            raise HarnessError("beta must be non-negative")
        if self.lag < 1:
            raise HarnessError("lag must be at least 1")
        if self.prep_iters < 1:
            raise HarnessError("prep iterations must be positive")

    @property
    def setting(self):
        return "general" if self.scenario == "replay" else self.scenario

    @property
    def prep(self):
        if self.prep_fraction is not None:
            return self.prep_fraction
        return DEFAULT_PREP.get(self.setting, 0.1)

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise HarnessError(f"unknown config keys: {sorted(extra)}")
        doc = dict(doc)
        for key in ("shape", "seeds", "solvers", "perturb"):
            if doc.get(key) is not None:
                doc[key] = tuple(doc[key])
        return cls(**doc)


def load_config(path):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise HarnessError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise HarnessError("config file must hold a JSON object")
    return doc


@dataclass(frozen=True)
class StepRecord:
    solver: str
    seed: int
    t: int
    pof: float
    step_time_ms: float
    nnz_delta: int
    shape: tuple

    def row(self):
        return (
            self.solver,
            str(self.seed),
            str(self.t),
            repr(float(self.pof)),
            f"{self.step_time_ms:.3f}",
            str(self.nnz_delta),
            "x".join(map(str, self.shape)),
        )


@dataclass
class RunResult:
    records: list = field(default_factory=list)
    failures: list = field(default_factory=list)


# --------------------------------------------------------------------------
# streams
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Stream:
    initial: object
    steps: list
    states: list
    truth: np.ndarray | None
    metric: str  # "factorization" | "completion" | "observed"
    temporal_mode: int


def _load_truth(spec):
    if spec.tensor is None:
        return gen_low_rank(spec.shape, spec.rank, spec.data_seed)[1]
    try:
        return read_coo(spec.tensor).to_dense()
    except (OSError, ValueError) as exc:
        raise HarnessError(f"cannot read tensor {spec.tensor}: {exc}") from None


def _load_mask(spec, shape, seed):
    if spec.mask is None:
        return gen_mask(shape, spec.density, seed)
    try:
        coo = read_coo(spec.mask)
    except (OSError, ValueError) as exc:
        raise HarnessError(f"cannot read mask {spec.mask}: {exc}") from None
    if coo.shape != tuple(shape):
        raise HarnessError(f"mask shape {coo.shape} differs from tensor shape {shape}")
    return coo.index_set()


def build_stream(spec, seed, truth=None):
    """Initial state, per-step states and evaluation data for one seed."""
    tm = spec.temporal_mode
    if spec.scenario == "replay":
        try:
            initial, steps = read_event_log(spec.events)
        except (OSError, ValueError) as exc:
            raise HarnessError(f"cannot read event log {spec.events}: {exc}") from None
        return Stream(initial, steps, replay(initial, steps), None, "observed", tm)
    if truth is None:
        truth = _load_truth(spec)
    try:
        if spec.scenario == "general":
            initial, steps = stream_general(
                truth, tm, spec.lag, spec.perturb, spec.prep, seed
            )
            metric = "observed"
        elif spec.scenario == "factorization":
            initial, steps = stream_slice_growth(truth, None, spec.prep, tm)
            metric = "factorization"
        else:
            mask = _load_mask(spec, truth.shape, seed)
            initial, steps = stream_slice_growth(truth, mask, spec.prep, tm)
            metric = "completion"
    except ValueError as exc:
        raise HarnessError(str(exc)) from None
    return Stream(initial, steps, replay(initial, steps), truth, metric, tm)


def _truth_view(truth, shape):
    return truth[tuple(slice(0, d) for d in shape)]


def evaluate(stream, state, model):
    if stream.metric == "observed":
        return pof_observed(state.observed, model)
    sub = _truth_view(stream.truth, state.shape)
    if stream.metric == "factorization":
        return pof_factorization(sub, model)
    return pof_completion(sub, state.mask, model)


# --------------------------------------------------------------------------
# solvers
# --------------------------------------------------------------------------


def engine_config(spec, solver):
    variant = ENGINE_SOLVERS[solver]
    kw = dict(rank=spec.rank, beta=Schedule("const", spec.beta), prep_iters=spec.prep_iters)
    if spec.alpha_schedule is not None:
        kw["alpha"] = Schedule.parse(spec.alpha_schedule)
    return EngineConfig.preset(spec.setting, variant, spec.strategy, **kw)


def baseline_config(spec, solver):
    return BaselineConfig(
        method=solver, rank=spec.rank, beta=spec.beta, temporal_mode=spec.temporal_mode
    )


class _SolverRun:
    """Uniform ``init`` / ``step`` interface over the engine and the baselines."""

    def __init__(self, spec, solver, seed):
        self.name = solver
        self.seed = seed
        if solver in ENGINE_SOLVERS:
            self.config = engine_config(spec, solver)
            self.needs_full = self.config.variant == "full"
        else:
            self.config = baseline_config(spec, solver)
            self.needs_full = True
        self.prep_iters = spec.prep_iters
        self.state = None

    def init(self, initial, temporal_mode):
        prep = initial.observed
        if self.name in ENGINE_SOLVERS:
            gd = prep.shape[temporal_mode % prep.ndim]
            self.state = init_prep(prep, self.config, self.seed, growth_dim=gd)
        else:
            model = fit_static(
                prep, self.config.rank, self.prep_iters, self.config.beta, self.seed,
                self.config.solve_jitter,
            )
            self.state = BaselineState(model, 0, self.seed)

    def step(self, delta):
        if self.name in ENGINE_SOLVERS:
            self.state = engine_step(self.state, delta, self.config)
        else:
            self.state = baseline_step(self.state, delta, self.config)
        return self.state.model


def run_solver(spec, stream, solver, seed, clock=time.perf_counter):
    """Replay ``stream`` with one solver; returns ``(records, failure or None)``."""
    run = _SolverRun(spec, solver, seed)
    records = []
    t = 0
    try:
        run.init(stream.initial, stream.temporal_mode)
        for t, state in enumerate(stream.states, start=1):
            delta = StepDelta.from_state(state, with_full=run.needs_full)
            start = clock()
            model = run.step(delta)
            elapsed = (clock() - start) * 1e3
            pof = evaluate(stream, state, model)
            if not math.isfinite(pof):
                raise FloatingPointError(f"non-finite PoF {pof}")
            records.append(
                StepRecord(solver, seed, t, pof, elapsed, len(state.delta), state.shape)
            )
    except (SolverError, FloatingPointError, np.linalg.LinAlgError) as exc:
        failure = {"solver": solver, "seed": seed, "t": t, "error": f"{type(exc).__name__}: {exc}"}
        return records, failure
    return records, None


def run_experiment(spec, progress=None):
    """Run every (solver, seed) pair of ``spec``."""
    result = RunResult()
    truth = None if spec.scenario == "replay" else _load_truth(spec)
    for seed in spec.seeds:
        stream = build_stream(spec, seed, truth)
        for solver in spec.solvers:
            records, failure = run_solver(spec, stream, solver, seed)
            result.records.extend(records)
            if failure is not None:
                result.failures.append(failure)
            if progress is not None:
                progress(solver, seed, records, failure)
    result.records.sort(key=lambda r: (r.solver, r.seed, r.t))
    result.failures.sort(key=lambda f: (f["solver"], f["seed"], f["t"]))
    return result


# --------------------------------------------------------------------------
# output files
# --------------------------------------------------------------------------


def write_steps_csv(path, records):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(STEP_HEADER)
        for rec in sorted(records, key=lambda r: (r.solver, r.seed, r.t)):
            writer.writerow(rec.row())


def read_steps_csv(path):
    """Parse ``steps.csv``; malformed rows raise :class:`HarnessError` with the line."""
    records = []
    try:
        fh = Path(path).open(newline="")
    except OSError as exc:
        raise HarnessError(f"cannot read {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != STEP_HEADER:
            raise HarnessError(f"{path}: line 1: expected header {','.join(STEP_HEADER)}")
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != len(STEP_HEADER):
                raise HarnessError(
                    f"{path}: line {lineno}: expected {len(STEP_HEADER)} fields, got {len(row)}"
                )
            try:
                records.append(
                    StepRecord(
                        row[0],
                        int(row[1]),
                        int(row[2]),
                        float(row[3]),
                        float(row[4]),
                        int(row[5]),
                        tuple(int(d) for d in row[6].split("x")),
                    )
                )
            except ValueError as exc:
                raise HarnessError(f"{path}: line {lineno}: {exc}") from None
    return records


def summarize(records, failures=(), spec=None):
    """Per-solver mean/std (population) over seeds of Avg. PoF and total time."""
    runs = {}
    for rec in records:
        runs.setdefault(rec.solver, {}).setdefault(rec.seed, []).append(rec)
    solvers = {}
    for solver in sorted(runs):
        per_seed = {}
        for seed in sorted(runs[solver]):
            recs = runs[solver][seed]
            per_seed[str(seed)] = {
                "avg_pof": float(np.mean([r.pof for r in recs])),
                "total_time_s": float(sum(r.step_time_ms for r in recs) / 1e3),
                "steps": len(recs),
            }
        avg = [v["avg_pof"] for v in per_seed.values()]
        tot = [v["total_time_s"] for v in per_seed.values()]
        solvers[solver] = {
            "avg_pof_mean": float(np.mean(avg)),
            "avg_pof_std": float(np.std(avg)),
            "total_time_mean_s": float(np.mean(tot)),
            "total_time_std_s": float(np.std(tot)),
            "seeds": per_seed,
        }
    doc = {"solvers": solvers, "failures": list(failures)}
    if spec is not None:
        doc["spec"] = {k: v for k, v in asdict(spec).items() if k != "out"}
    return doc


def write_results(out_dir, result, spec=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_steps_csv(out / "steps.csv", result.records)
    doc = summarize(result.records, result.failures, spec)
    (out / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def plot_steps(steps_csv, svg_path, solvers=None):
    """Mean PoF over seeds against step, one polyline per solver."""
    records = read_steps_csv(steps_csv)
    if solvers is not None:
        records = [r for r in records if r.solver in set(solvers)]
    if not records:
        raise HarnessError("no solver data to plot")
    by_solver = {}
    for rec in records:
        by_solver.setdefault(rec.solver, {}).setdefault(rec.t, []).append(rec.pof)
    series = {}
    for name, per_t in by_solver.items():
        ts = sorted(per_t)
        series[name] = (ts, [float(np.mean(per_t[t])) for t in ts])
    svg = line_chart(series, "PoF per time step", "time step", "PoF (mean over seeds)",
                     y_top=1.0)
    Path(svg_path).write_text(svg)
    return svg


# --------------------------------------------------------------------------
# data generation
# --------------------------------------------------------------------------


def generate(spec, out_dir):
    """Write ``truth.coo``, ``mask.coo`` and ``events.jsonl``.

    The tensor comes from ``data_seed`` (or ``--tensor``); the mask and the
    event stream come from the first seed. ``mask.coo`` holds ones at the
    observed cells and is what the completion stream uses.
    """
    if spec.scenario == "replay":
        raise HarnessError("cannot generate data for the replay scenario")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = spec.seeds[0]
    truth = _load_truth(spec)
    write_coo(out / "truth.coo", CooTensor.from_dense(truth))
    mask = gen_mask(truth.shape, spec.density, seed)
    ones = np.ones(len(mask))
    write_coo(out / "mask.coo", CooTensor(truth.shape, mask.indices, ones, check=False))
    stream = build_stream(spec, seed, truth)
    write_event_log(out / "events.jsonl", stream.initial, stream.steps)
    return out


# --------------------------------------------------------------------------
# density ablation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    seed: int
    density: float
    strategy: str
    time_ms: float
    pof: float

    def row(self):
        return (str(self.seed), repr(float(self.density)), self.strategy,
                f"{self.time_ms:.3f}", repr(float(self.pof)))


def ablate_density(truth, densities, rank, iters=25, seeds=(0,), beta=1e-5, repeats=1,
                   clock=time.perf_counter):
    """Static completion with each strategy at each mask density.

    The sparse strategy is masked row-wise ALS on the observed entries; the
    dense strategy imputes with the current model and runs full ALS. Both
    start from the same seeded Uniform[0, 1] factors. PoF is measured against
    the full ``truth``; ``time_ms`` is the best of ``repeats`` timings.
    """
    truth = np.asarray(truth, dtype=np.float64)
    rows = []
    sweeps = {
        "sparse": lambda data, m: cpc_als_sweep(data, m, beta),
        "dense": lambda data, m: em_als_sweep(data, m, beta),
    }
    for seed in seeds:
        for density in densities:
            mask = gen_mask(truth.shape, density, seed)
            data = CooTensor(truth.shape, mask.indices, truth.reshape(-1)[mask.keys],
                             check=False)
            for strategy in ("sparse", "dense"):
                best = math.inf
                for _ in range(max(1, repeats)):
                    model = KruskalModel.random(truth.shape, rank, np.random.default_rng(seed))
                    start = clock()
                    for _ in range(iters):
                        model = sweeps[strategy](data, model)
                    best = min(best, (clock() - start) * 1e3)
                rows.append(AblationRow(seed, float(density), strategy, best,
                                        pof_factorization(truth, model)))
    return rows


def write_ablation(out_dir, rows):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "ablation.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_HEADER)
        for r in rows:
            writer.writerow(r.row())
    series = {}
    for strategy in ("sparse", "dense"):
        sel = [r for r in rows if r.strategy == strategy]
        dens = sorted({r.density for r in sel})
        xs = [float(np.mean([r.time_ms for r in sel if r.density == d])) for d in dens]
        ys = [float(np.mean([r.pof for r in sel if r.density == d])) for d in dens]
        if xs:
            series[f"{strategy} strategy"] = (xs, ys)
    svg = line_chart(series, "Running time vs PoF across mask densities",
                     "time (ms)", "PoF", markers=True)
    (out / "ablation.svg").write_text(svg)
