"""Command line entry points.

Public subcommands: serve (the steering server), script (timed headless
client), bench (steering overhead report), schedule (task tree scheduling
tool).  Every config file key can be overridden with a flag of the same
name.  Exit codes: 0 success, 2 script failure, 3 startup error,
4 benchmark threshold breach.

The --worker flag is internal: the cluster coordinator spawns worker
processes as `steerkit --worker --band <start> <rows> --coordinator
<host:port>`; it is not part of the supported interface.
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
import threading

from .errors import ScriptFailure, StartupError, ThresholdBreach

EXIT_OK = 0
EXIT_SCRIPT = 2
EXIT_STARTUP = 3
EXIT_BENCH = 4

CONFIG_KEYS = ("tick_ms", "workers", "fanout", "listen", "http", "scenario",
               "max_iter", "tolerance", "levels", "tau_fast_ms",
               "tau_idle_ms")


def _worker_entry(argv) -> int:
    parser = argparse.ArgumentParser(prog="steerkit --worker", add_help=False)
    parser.add_argument("--worker", action="store_true")
    parser.add_argument("--band", nargs=2, type=int, required=True,
                        metavar=("START", "ROWS"))
    parser.add_argument("--coordinator", required=True)
    args = parser.parse_args(argv)
    from .cluster.worker import worker_main
    return worker_main(args.band[0], args.band[1], args.coordinator)


def _add_config_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group(
        "config overrides", "each flag overrides the config file key of "
        "the same name")
    for key in CONFIG_KEYS:
        group.add_argument(f"--{key}", metavar="VALUE")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="steerkit",
        description="Interactive steering for iterative solvers.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p_serve = sub.add_parser(
        "serve", help="run the steering server until interrupted")
    p_serve.add_argument("--config", metavar="FILE",
                         help="config file (documented grammar; see README)")
    p_serve.add_argument("--assets", metavar="DIR",
                         help="static files for the browser client")
    _add_config_flags(p_serve)

    p_script = sub.add_parser(
        "script", help="run a timed action script against a server")
    p_script.add_argument("file", metavar="SCRIPT")
    p_script.add_argument("--address", default="127.0.0.1:7420",
                          metavar="HOST:PORT")
    p_script.add_argument("--trail_ms", type=float, default=1000.0,
                          help="how long to keep transcribing after the "
                          "last action (default 1000)")
    p_script.add_argument("--json", metavar="FILE",
                          help="also write the transcript as JSON")

    p_bench = sub.add_parser(
        "bench", help="measure steering overhead against a disabled baseline")
    p_bench.add_argument("--duration", type=float, default=30.0,
                         help="total measurement time in seconds, >= 30")
    p_bench.add_argument("--repetitions", type=int, default=5)
    p_bench.add_argument("--grid", type=int, default=300)
    p_bench.add_argument("--sweeps", type=int, default=1200)
    p_bench.add_argument("--ticks", default="1,2,5",
                         help="comma list of tick intervals in ms")
    p_bench.add_argument("--scenario", metavar="FILE",
                         help="scenario file (default: packaged reference)")
    p_bench.add_argument("--enforce", action="store_true",
                         help="fail (exit 4) if a bounded tick setting "
                         "exceeds its overhead limit")
    p_bench.add_argument("--json", metavar="FILE",
                         help="also write the report as JSON")

    p_sched = sub.add_parser(
        "schedule", help="compute a phase schedule for a task tree file")
    p_sched.add_argument("file", metavar="TREE")
    p_sched.add_argument("--processors", type=int, required=True)
    p_sched.add_argument("--unit_cost", type=float,
                         help="cost of the unit task (default: median leaf)")
    p_sched.add_argument("--fullness_csv", metavar="FILE",
                         help="write per-phase fullness CSV here instead "
                         "of stdout")
    return parser


# -- serve --------------------------------------------------------------


def _cmd_serve(args) -> int:
    from .config import load_config
    from .server import SteeringServer
    from .web import WebGateway

    overrides = {key: getattr(args, key) for key in CONFIG_KEYS}
    config = load_config(args.config, overrides)
    server = SteeringServer(config)
    server.start()
    gateway = WebGateway(server, config.http, assets=args.assets)
    try:
        gateway.start()
    except StartupError:
        server.stop()
        raise
    print(f"steering on {config.listen[0]}:{server.port}  "
          f"web on {config.http[0]}:{gateway.port}", flush=True)

    stopping = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda _s, _f: stopping.set())
    try:
        while not stopping.is_set() and not server.wait(0.5):
            pass
    finally:
        gateway.stop()
        server.stop()
    server.check_failed()
    return EXIT_OK


# -- script -------------------------------------------------------------


def _cmd_script(args) -> int:
    from .config import _parse_address
    from .script import Script, run_script

    try:
        with open(args.file) as f:
            text = f.read()
    except OSError as e:
        raise StartupError(f"cannot read script: {e}") from e
    try:
        script = Script.parse(text)
        address = _parse_address(args.address)
    except ValueError as e:
        raise StartupError(str(e)) from e

    try:
        transcript = run_script(script, address, trail_ms=args.trail_ms)
    except ScriptFailure as e:
        print(e, file=sys.stderr)
        transcript = getattr(e, "transcript", None)
        if args.json and transcript is not None:
            _write_transcript_json(args.json, transcript)
        return EXIT_SCRIPT
    print(transcript.render_text())
    transitions = " ".join(f"(e{e},L{lv})" for e, lv in
                           transcript.transitions())
    print(f"transitions: {transitions}")
    if args.json:
        _write_transcript_json(args.json, transcript)
    return EXIT_OK


def _write_transcript_json(path: str, transcript) -> None:
    payload = [{"at_ms": e.at_ms, "kind": e.kind, **e.detail}
               for e in transcript.entries]
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)


# -- bench --------------------------------------------------------------


def _cmd_bench(args) -> int:
    from .bench import BenchSettings, benchmark_overhead, enforce

    try:
        ticks = tuple(float(t) for t in args.ticks.split(","))
        scenario_text = None
        if args.scenario:
            with open(args.scenario) as f:
                scenario_text = f.read()
        settings = BenchSettings(
            grid=args.grid, sweeps=args.sweeps,
            repetitions=args.repetitions, duration=args.duration,
            ticks=ticks, scenario_text=scenario_text)
    except (OSError, ValueError) as e:
        raise StartupError(str(e)) from e

    report = benchmark_overhead(
        settings, progress=lambda line: print(line, file=sys.stderr))
    print(report.render_text())
    if args.json:
        with open(args.json, "w") as f:
            f.write(report.to_json())
    if args.enforce:
        enforce(report)
    return EXIT_OK


# -- schedule -----------------------------------------------------------


def _cmd_schedule(args) -> int:
    from .scheduling import format_schedule, fullness_csv, parse_tree, \
        schedule_tree

    try:
        with open(args.file) as f:
            text = f.read()
    except OSError as e:
        raise StartupError(f"cannot read tree file: {e}") from e
    try:
        tree = parse_tree(text)
        schedule = schedule_tree(tree, args.processors, args.unit_cost)
    except ValueError as e:
        raise StartupError(str(e)) from e
    print(format_schedule(schedule))
    csv = fullness_csv(schedule)
    if args.fullness_csv:
        with open(args.fullness_csv, "w") as f:
            f.write(csv)
    else:
        print()
        print(csv)
    return EXIT_OK


# -- entry --------------------------------------------------------------


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    if "--worker" in argv:
        return _worker_entry(argv)
    parser = _build_parser()
    args = parser.parse_args(argv)
    commands = {
        "serve": _cmd_serve,
        "script": _cmd_script,
        "bench": _cmd_bench,
        "schedule": _cmd_schedule,
    }
    if args.command is None:
        parser.error("a subcommand is required")
    try:
        return commands[args.command](args)
    except StartupError as e:
        print(f"startup error: {e}", file=sys.stderr)
        return EXIT_STARTUP
    except ThresholdBreach as e:
        print(f"threshold breach: {e}", file=sys.stderr)
        return EXIT_BENCH
