"""Command line entry point: ``fseb run|ablate|grid|compare``.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import experiment
from .data import DataFormatError
from .model import CheckpointError
from .training import NumericalAbort

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fseb", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate every seed of a config")
    r.add_argument("config")
    r.add_argument("--output-dir")

    a = sub.add_parser("ablate", help="one run per value along an ablation axis")
    a.add_argument("config")
    a.add_argument("--axis", required=True, choices=experiment.AXES)
    a.add_argument("--values", required=True, help="comma separated values")
    a.add_argument("--output-dir")

    g = sub.add_parser("grid", help="grid predictions from a checkpoint")
    g.add_argument("checkpoint")
    g.add_argument("--spec", required=True, help="config providing architecture and eval.grid")
    g.add_argument("--out")

    c = sub.add_parser("compare", help="summarize several results.json files")
    c.add_argument("paths", nargs="+")
    c.add_argument("--out", help="path prefix for the .md and .csv outputs")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            res = experiment.run(args.config, args.output_dir)
            for name, entry in res.aggregate.items():
                print(f"{name}: {experiment._format(entry)}")
        elif args.command == "ablate":
            table = experiment.ablate(args.config, args.axis, args.values.split(","), args.output_dir)
            print(table)
        elif args.command == "grid":
            print(experiment.grid_from_checkpoint(args.checkpoint, args.spec, args.out))
        else:
            text, _ = experiment.compare(args.paths, args.out)
            print(text, end="")
    except NumericalAbort as exc:
        print(f"fseb: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (experiment.ConfigError, DataFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"fseb: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
