"""Command-line entry point.

    ecgfusion <command> [--config FILE] [--set key=value ...]
              [--out DIR] [--seed N] [--threads N]

Commands: ingest, preprocess, split, train, eval, kfold, transfer,
search, synth. Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .config import ConfigError, build_config
from .errors import Diverged, EcgFusionError, NonFiniteGradient, NonFiniteValue

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


COMMANDS = {
    "ingest": pipeline.run_ingest,
    "preprocess": pipeline.run_preprocess,
    "split": pipeline.run_split,
    "train": pipeline.run_train,
    "eval": pipeline.run_eval,
    "kfold": pipeline.run_kfold,
    "transfer": pipeline.run_transfer,
    "search": pipeline.run_search,
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="ecgfusion", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _common_flags(p)
    synth = sub.add_parser("synth", help="write a synthetic WFDB dataset")
    synth.add_argument("directory")
    synth.add_argument("--records", type=int, default=4)
    synth.add_argument("--beats-per-record", type=int, default=400)
    synth.add_argument("--classes", default="N,L,R,V,/")
    synth.add_argument("--seed", type=int, default=0)
    return parser


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key=value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    p.add_argument("--out", default=None, help="output directory (output_dir)")
    p.add_argument("--seed", default=None, help="seed override")
    p.add_argument("--threads", default=None, help="kernel thread count (0 = default)")


def _overrides(args) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    return overrides


def _apply_threads(cfg) -> None:
    n = cfg.i("threads")
    if n > 0:
        from . import kernels
        if kernels.backend() == "numba":
            import numba
            numba.set_num_threads(n)


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)

    if args.command == "synth":
        from .synthdata import generate_dataset
        classes = [c for c in args.classes.split(",") if c]
        names = generate_dataset(
            args.directory, args.records, args.beats_per_record,
            {c: 1.0 for c in classes}, seed=args.seed,
        )
        print(json.dumps({"directory": args.directory, "records": names}))
        return EXIT_OK

    try:
        cfg = build_config(args.config, _overrides(args))
    except (ConfigError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE

    try:
        _apply_threads(cfg)
        result = COMMANDS[args.command](cfg)
    except (Diverged, NonFiniteValue, NonFiniteGradient) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "detail": str(exc)}) + "\n")
        return EXIT_NUMERIC
    except (EcgFusionError, ConfigError, OSError, KeyError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "detail": str(exc)}) + "\n")
        return EXIT_DATA

    print(json.dumps({"command": args.command, "run_id": cfg.run_id(), **_jsonable(result)}))
    return EXIT_OK


def _jsonable(result: dict) -> dict:
    return json.loads(json.dumps(result, default=str))


if __name__ == "__main__":
    sys.exit(main())
