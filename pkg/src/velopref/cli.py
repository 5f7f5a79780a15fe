"""velopref command line: velopref <stage> --config run.json [--set key=value]... [--threads n] [--seed s]"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import ConfigError, load_config
from .pipeline import STAGES, MissingInputError
from .solver import ConvergenceError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_CONVERGENCE = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="velopref", description=__doc__.split(":")[0])
    p.add_argument("command", choices=list(STAGES))
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value by dotted key; the value is parsed as JSON when possible")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, args.overrides, args.seed)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError, TypeError) as exc:
        return _fail(EXIT_VALIDATION, exc)
    try:
        stage = STAGES[args.command]
        manifest = stage(config, threads=max(1, args.threads)) if args.command == "explain" else stage(config)
    except MissingInputError as exc:
        return _fail(EXIT_VALIDATION, exc)
    except ConvergenceError as exc:
        return _fail(EXIT_CONVERGENCE, exc)
    except Exception as exc:   # noqa: BLE001 - every failure leaves as structured JSON
        return _fail(EXIT_RUNTIME, exc)
    print(json.dumps({"stage": manifest["stage"], "outputs": manifest["outputs"],
                      "summary": manifest["summary"]}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
