"""``decohist`` command line: run, validate and list bundled demo configs.

Exit codes: 0 all checks passed, 1 usage or configuration error, 2 at least
one invariant check failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path

from .config import ConfigError, load_config, parse_config
from .runner import emit_report, run_experiment

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT = 0, 1, 2


def demo_names():
    return sorted(p.name[:-4] for p in resources.files("decohist.demos").iterdir() if p.name.endswith(".cfg"))


def _demo_text(name: str) -> str:
    return resources.files("decohist.demos").joinpath(name + ".cfg").read_text()


def resolve_config(ref: str):
    """A path to a config file, or the name of a bundled demo."""
    path = Path(ref)
    if path.exists():
        return load_config(path)
    name = ref[:-4] if ref.endswith(".cfg") else ref
    if name in demo_names():
        return parse_config(_demo_text(name), f"demo:{name}")
    raise ConfigError(f"no such config file or bundled demo: {ref}")


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decohist", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config", help="config file or bundled demo name")
    run.add_argument("--out", help="output directory (default runs/<name>)")
    run.add_argument("--seed", type=_u64, help="override the config seed")
    run.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    val = sub.add_parser("validate", help="check a config and print its materialized form")
    val.add_argument("config")
    sub.add_parser("list-demos", help="list bundled demo configs")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; 2 is reserved for failed invariants
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.command == "list-demos":
        for name in demo_names():
            first = _demo_text(name).splitlines()[0].lstrip("# ").strip()
            print(f"{name:24s} {first}")
        return EXIT_OK
    try:
        cfg = resolve_config(args.config)
        if args.command == "validate":
            sys.stdout.write(cfg.materialize())
            print(f"# config hash {cfg.hash}")
            return EXIT_OK
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        report = run_experiment(cfg, jobs=args.jobs)
        out = Path(args.out) if args.out else Path("runs") / cfg["name"]
        emit_report(report, out)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"decohist: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    sys.stdout.write(report.summary())
    print(f"# wall-clock {report.wall_clock:.2f}s, outputs in {out}")
    return EXIT_OK if report.passed else EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
