from typing import Callable, Dict, List, Optional
import argparse
import logging
import os
import sys

from mlgamp.stateevo import SEBreakdown, se_run
from mlgamp_harness import csvio
from mlgamp_harness.harness import (
    ExperimentConfig,
    ExperimentDiverged,
    run_experiment,
    summarize,
)
from mlgamp_harness.settings import (
    ConfigError,
    Overrides,
    RunSettings,
    load_settings,
    resolved_document,
    write_echo,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_GAP = 3

common = argparse.ArgumentParser(add_help=False)
common.add_argument(
    "--config",
    default=os.environ.get("MLGAMP_CONFIG"),
    required=False,
    help="JSON experiment configuration.",
)
common.add_argument("--seed", type=int, help="Base seed of the trials.")
common.add_argument("--trials", type=int, help="Number of Monte-Carlo trials.")
common.add_argument("--iters", type=int, help="Number of iterations.")
common.add_argument("--damping", type=float, help="Damping factor for every layer.")
common.add_argument("--out", metavar="PATH", help="Output CSV file.")
common.add_argument(
    "--jobs",
    type=int,
    help="Number of worker processes for the trials (default: run.jobs, else all CPUs).",
)
common.add_argument(
    "--verbose", action="store_true", help="Log progress of the iterations."
)

parser = argparse.ArgumentParser(description="Multi-layer GAMP experiments")
commands = parser.add_subparsers(dest="command", metavar="COMMAND")
commands.required = True
commands.add_parser(
    "run", parents=[common], help="Monte-Carlo trials with per-iteration NMSE and SER."
)
commands.add_parser("se", parents=[common], help="State evolution trace.")
compare_parser = commands.add_parser(
    "compare", parents=[common], help="Mean NMSE of the trials against state evolution."
)
compare_parser.add_argument(
    "--threshold-db",
    type=float,
    default=0.5,
    help="Largest accepted gap between trials and state evolution.",
)


def output_path(settings: RunSettings, command: str, label: Optional[str]) -> str:
    out = settings.output or os.path.splitext(settings.source)[0] + f"-{command}.csv"
    if label is None:
        return out
    base, ext = os.path.splitext(out)
    return f"{base}-{label}{ext or '.csv'}"


def _echo(config: ExperimentConfig, out: str, status: str) -> None:
    write_echo(f"{out}.config.json", resolved_document(config, out, status))


def cmd_run(settings: RunSettings, args: argparse.Namespace) -> int:
    for label, config in settings.experiment.points():
        out = output_path(settings, "run", label)
        try:
            records = run_experiment(config)
        except ExperimentDiverged as e:
            csvio.write_records(out, e.records, divergence=e)
            _echo(config, out, "diverged")
            print(f"{e} (partial results in {out})", file=sys.stderr)
            return EXIT_DIVERGED
        except SEBreakdown as e:
            _echo(config, out, "breakdown")
            print(str(e), file=sys.stderr)
            return EXIT_DIVERGED

        csvio.write_records(out, records)
        _echo(config, out, "ok")
        summary = summarize(records, config.ser_mapping)
        converged = summary.convergence_iteration or "-"
        print(
            f"{out}: final mean NMSE {summary.final_nmse_db:.2f} dB, "
            f"converged at iteration {converged}"
        )
    return EXIT_OK


def cmd_se(settings: RunSettings, args: argparse.Namespace) -> int:
    for label, config in settings.experiment.points():
        out = output_path(settings, "se", label)
        spec = config.spec
        try:
            result = se_run(spec, config.iters, config.quad)
        except SEBreakdown as e:
            csvio.write_se_trace(out, e.states, spec.n_layers, breakdown=e)
            _echo(config, out, "breakdown")
            print(f"{e} (partial trace in {out})", file=sys.stderr)
            return EXIT_DIVERGED

        csvio.write_se_trace(out, result.states, spec.n_layers)
        _echo(config, out, "ok")
        state = result.fixed_point
        status = "fixed point" if result.converged else "iteration cap"
        print(f"{out}: MSE {state.mse:.6g} after {state.t} iterations ({status})")
    return EXIT_OK


def cmd_compare(settings: RunSettings, args: argparse.Namespace) -> int:
    code = EXIT_OK
    for label, config in settings.experiment.points():
        out = output_path(settings, "compare", label)
        try:
            records = run_experiment(config)
        except ExperimentDiverged as e:
            csvio.write_comparison(out, summarize(e.records, config.ser_mapping))
            _echo(config, out, "diverged")
            print(f"{e} (partial results in {out})", file=sys.stderr)
            return EXIT_DIVERGED
        except SEBreakdown as e:
            _echo(config, out, "breakdown")
            print(str(e), file=sys.stderr)
            return EXIT_DIVERGED

        summary = summarize(records, config.ser_mapping)
        csvio.write_comparison(out, summary)
        gap = summary.max_gap_db
        ok = gap <= args.threshold_db
        _echo(config, out, "ok" if ok else "gap-exceeded")
        print(
            f"{out}: max gap {gap:.3f} dB over {len(summary.iterations)} iterations "
            f"({'within' if ok else 'exceeds'} {args.threshold_db:g} dB)"
        )
        if not ok:
            code = EXIT_GAP
    return code


COMMANDS: Dict[str, Callable[[RunSettings, argparse.Namespace], int]] = {
    "run": cmd_run,
    "se": cmd_se,
    "compare": cmd_compare,
}


def run(argv: List[str]) -> int:
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    if args.config is None:
        print("No configuration given (use --config or MLGAMP_CONFIG)", file=sys.stderr)
        return EXIT_CONFIG

    overrides = Overrides(
        seed=args.seed,
        trials=args.trials,
        iters=args.iters,
        damping=args.damping,
        jobs=args.jobs,
        out=args.out,
    )
    try:
        settings = load_settings(args.config, overrides)
    except ConfigError as e:
        print(f"Invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return COMMANDS[args.command](settings, args)


def main():
    sys.exit(run(sys.argv[1:]))
