"""``gocpt generate|run|plot|ablate-density``.

Exit codes: 0 success, 1 usage or input error, 2 at least one solver failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from gocpt import harness
from gocpt.harness import ExperimentSpec, HarnessError

log = logging.getLogger("gocpt")

EXIT_OK, EXIT_USAGE, EXIT_SOLVER = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default, which we reserve for solver failures
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _str_list(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _perturb(text):
    if text.lower() == "none":
        return "none"
    vals = _float_list(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError("--perturb takes FRACTION,MAGNITUDE or none")
    return vals


def _experiment_flags(p):
    p.add_argument("--config", metavar="FILE", help="JSON experiment file; flags override it")
    p.add_argument("--scenario", choices=harness.SCENARIOS)
    p.add_argument("--shape", type=_int_list, metavar="d1,d2,...")
    p.add_argument("--rank", type=int, metavar="R")
    p.add_argument("--density", type=float, metavar="F", help="observed fraction (completion)")
    p.add_argument("--prep-fraction", type=float, metavar="F")
    p.add_argument("--seed", type=_int_list, metavar="S[,S...]", dest="seeds")
    p.add_argument("--data-seed", type=int, metavar="S", help="seed of the synthetic tensor")
    p.add_argument("--solver", type=_str_list, metavar="NAME[,NAME...]", dest="solvers",
                   help="any of " + ", ".join(harness.SOLVERS))
    p.add_argument("--variant", choices=("full", "efficient"),
                   help="engine variant to run when --solver is not given")
    p.add_argument("--strategy", choices=("sparse", "dense"))
    p.add_argument("--alpha-schedule", metavar="{const:V | over-growth:V}")
    p.add_argument("--beta", type=float, metavar="V")
    p.add_argument("--lag", type=int, metavar="L", help="fill lag of the general stream")
    p.add_argument("--perturb", type=_perturb, metavar="FRAC,MAG|none")
    p.add_argument("--prep-iters", type=int, metavar="N")
    p.add_argument("--temporal-mode", type=int, metavar="N")
    p.add_argument("--tensor", metavar="FILE", help="ground-truth tensor (COO file)")
    p.add_argument("--mask", metavar="FILE", help="observation mask (COO file)")
    p.add_argument("--events", metavar="FILE", help="event log for --scenario replay")
    p.add_argument("--out", metavar="DIR")


def build_parser():
    parser = _Parser(prog="gocpt", description="Online CP factorization experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    gen = sub.add_parser("generate", help="write a synthetic tensor, mask and event log")
    _experiment_flags(gen)

    run = sub.add_parser("run", help="replay a stream with one or more solvers")
    _experiment_flags(run)

    plot = sub.add_parser("plot", help="SVG of PoF per step from steps.csv")
    plot.add_argument("steps_csv")
    plot.add_argument("--solver", type=_str_list, dest="solvers", metavar="NAME[,NAME...]")
    plot.add_argument("--out", metavar="FILE", help="SVG path (default: next to the CSV)")

    abl = sub.add_parser("ablate-density", help="sparse vs dense strategy across densities")
    abl.add_argument("--tensor", metavar="FILE")
    abl.add_argument("--shape", type=_int_list, default=(30, 30, 30), metavar="d1,d2,...")
    abl.add_argument("--rank", type=int, default=5, metavar="R")
    abl.add_argument("--data-seed", type=int, default=0, metavar="S")
    abl.add_argument("--density", type=_float_list, default=(0.02, 0.1, 0.5, 1.0),
                     metavar="F[,F...]", dest="densities")
    abl.add_argument("--iters", type=int, default=25)
    abl.add_argument("--repeats", type=int, default=1, help="best-of timing repetitions")
    abl.add_argument("--seed", type=_int_list, default=(0,), dest="seeds", metavar="S[,S...]")
    abl.add_argument("--beta", type=float, default=1e-5)
    abl.add_argument("--out", default="ablation", metavar="DIR")
    return parser


_SPEC_KEYS = (
    "scenario", "shape", "rank", "density", "prep_fraction", "seeds", "solvers",
    "strategy", "alpha_schedule", "beta", "lag", "perturb", "prep_iters",
    "temporal_mode", "data_seed", "tensor", "mask", "events", "out",
)


def spec_from_args(args):
    """Config file first, then every flag that was given."""
    doc = harness.load_config(args.config) if args.config else {}
    for key in _SPEC_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            doc[key] = value
    if doc.get("perturb") == "none":
        doc["perturb"] = None
    if "solvers" not in doc:
        variant = args.variant or "full"
        doc["solvers"] = ("gocpt" if variant == "full" else "gocpt_e",)
    if doc.get("events") and "scenario" not in doc:
        doc["scenario"] = "replay"
    return ExperimentSpec.from_dict(doc)


def _cmd_generate(args):
    spec = spec_from_args(args)
    out = harness.generate(spec, spec.out)
    print(f"wrote truth.coo, mask.coo and events.jsonl to {out}")
    return EXIT_OK


def _cmd_run(args):
    spec = spec_from_args(args)

    def progress(solver, seed, records, failure):
        status = "FAILED at step %d" % failure["t"] if failure else "ok"
        log.info("%s seed=%d steps=%d %s", solver, seed, len(records), status)

    result = harness.run_experiment(spec, progress)
    doc = harness.write_results(spec.out, result, spec)
    for name, s in doc["solvers"].items():
        print(f"{name:14s} avg PoF {s['avg_pof_mean']:.6f} +- {s['avg_pof_std']:.2g}   "
              f"time {s['total_time_mean_s']:.3f}s")
    for f in result.failures:
        print(f"solver failure: {f['solver']} seed={f['seed']} t={f['t']}: {f['error']}",
              file=sys.stderr)
    return EXIT_SOLVER if result.failures else EXIT_OK


def _cmd_plot(args):
    src = Path(args.steps_csv)
    out = Path(args.out) if args.out else src.with_name("fitness.svg")
    harness.plot_steps(src, out, args.solvers)
    print(f"wrote {out}")
    return EXIT_OK


def _cmd_ablate(args):
    import numpy as np

    from gocpt.evolution import gen_low_rank
    from gocpt.tensor import read_coo

    if args.iters < 1 or args.repeats < 1:
        raise UsageError("--iters and --repeats must be positive")
    if args.tensor:
        try:
            truth = read_coo(args.tensor).to_dense()
        except (OSError, ValueError) as exc:
            raise HarnessError(f"cannot read tensor {args.tensor}: {exc}") from None
    else:
        truth = gen_low_rank(args.shape, args.rank, args.data_seed)[1]
    for d in args.densities:
        if not 0.0 < d <= 1.0:
            raise UsageError(f"density {d} outside (0, 1]")
    rows = harness.ablate_density(
        np.asarray(truth), args.densities, args.rank, args.iters, args.seeds, args.beta,
        args.repeats,
    )
    harness.write_ablation(args.out, rows)
    for r in rows:
        print(f"seed={r.seed} density={r.density:<5g} {r.strategy:6s} "
              f"time {r.time_ms:9.2f} ms  PoF {r.pof:.6f}")
    return EXIT_OK


COMMANDS = {
    "generate": _cmd_generate,
    "run": _cmd_run,
    "plot": _cmd_plot,
    "ablate-density": _cmd_ablate,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(message)s",
        )
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (HarnessError, json.JSONDecodeError) as exc:
        print(f"gocpt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
