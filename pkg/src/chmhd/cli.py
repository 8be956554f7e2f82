"""Command line entry point.

``chmhd run --config FILE`` runs the experiment described by a TOML file;
``chmhd converge|spinodal|bubble`` run an experiment from its defaults.
Both accept repeated ``--override section.key=value``. On failure a single
``error: {...}`` JSON line goes to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import config as C
from .experiments import ExperimentError, run_experiment
from .io import OutputError

EXIT_CONFIG, EXIT_RUN, EXIT_IO = 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chmhd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the experiment described by a config file")
    r.add_argument("--config", required=True, help="TOML configuration file")
    r.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    for kind in ("converge", "spinodal", "bubble"):
        s = sub.add_parser(kind, help=f"run the {kind} experiment with default settings")
        s.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    return p


def _error(kind: str, message: str, **extra) -> None:
    print("error: " + json.dumps({"type": kind, "message": message, **extra}, default=str),
          file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        if args.command == "run":
            cfg = C.load_config(args.config, args.override)
        else:
            doc = {"experiment": {"kind": args.command}}
            for item in args.override:
                C.apply_override(doc, item)
            cfg = C.build(doc)
    except C.ConfigError as exc:
        _error("config", str(exc))
        return EXIT_CONFIG
    try:
        result = run_experiment(cfg)
    except ExperimentError as exc:
        _error("solver", str(exc), **exc.context)
        return EXIT_RUN
    except OutputError as exc:
        _error("io", str(exc))
        return EXIT_IO
    for name, path in result.files.items():
        print(f"wrote {name}: {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
