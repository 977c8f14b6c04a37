"""Command-line entry point.

Commands::

    fedep run --config PATH [--set KEY=VALUE]... [--seed N] [--strategy NAME]
    fedep toy-study [--draws N] [--seed N] [--out PATH]
    fedep gen-data --config PATH [--set KEY=VALUE]... [--out DIR]

Relative output paths are resolved against ``$FEDEP_OUTPUT_ROOT`` (default:
the working directory). Exit codes: 0 success, 1 usage or config error,
2 runtime or IO failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, dump_config, parse_config
from .models import write_csv
from .simulator import load_data, run_experiment, summarize, toy_study

OUTPUT_ROOT_ENV = "FEDEP_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("fedep")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def output_path(path: str) -> Path:
    p = Path(path)
    if p.is_absolute():
        return p
    return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / p


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects KEY=VALUE, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def _load_config(args):
    overrides = _overrides(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "strategy", None) is not None:
        overrides["strategy"] = args.strategy
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    return parse_config(text, overrides)


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=True)


def cmd_run(args) -> int:
    cfg = _load_config(args)
    root = output_path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.resolved").write_text(dump_config(cfg))
    reports = []
    for r in range(cfg.n_repeats):
        seed = cfg.seed + r
        run_dir = root if cfg.n_repeats == 1 else root / f"seed_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / "trace.jsonl", "w") as trace_f, open(run_dir / "timing.jsonl", "w") as time_f:

            def on_round(m):
                trace_f.write(_json(m.record()) + "\n")
                trace_f.flush()
                time_f.write(_json({"round": m.round, "wall_ms": m.wall_ms}) + "\n")

            _, report = run_experiment(cfg, seed, on_round, run_dir)
        (run_dir / "report.json").write_text(_json(report.to_dict()) + "\n")
        reports.append(report)
        log.info("seed %d: %s", seed, report.to_dict())
    if cfg.n_repeats > 1:
        (root / "summary.json").write_text(_json(summarize(reports)) + "\n")
    print(f"wrote {root}")
    return EXIT_OK


def cmd_toy_study(args) -> int:
    if args.draws < 1:
        raise UsageError("--draws must be >= 1")
    result = toy_study(args.draws, rng=np.random.default_rng(args.seed))
    print(f"{'strategy':<8} {'mean':>12} {'sd':>12}")
    for name in ("fedavg", "fedpa", "fedep"):
        s = result["strategies"][name]
        print(f"{name:<8} {s['mean']:>12.3e} {s['sd']:>12.3e}")
    print(f"FedEP closer than FedPA on {result['fedep_lt_fedpa']:.1%} of draws")
    if args.out:
        out = output_path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(_json(result) + "\n")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    if cfg.source != "synthetic":
        raise ConfigError("gen-data needs source = synthetic", "source")
    shards, test = load_data(cfg)
    out = output_path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(shards, out / "train.csv")
    write_csv([test], out / "test.csv")
    print(f"wrote {out / 'train.csv'} and {out / 'test.csv'}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedep", description="Federated EP simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run an experiment from a config file")
    run.add_argument("--config", required=True)
    run.add_argument("--set", action="append", metavar="KEY=VALUE")
    run.add_argument("--seed", type=int)
    run.add_argument("--strategy")
    run.set_defaults(func=cmd_run)

    toy = sub.add_parser("toy-study", help="two-client Gaussian study over random NIW draws")
    toy.add_argument("--draws", type=int, default=200)
    toy.add_argument("--seed", type=int, default=0)
    toy.add_argument("--out")
    toy.set_defaults(func=cmd_toy_study)

    gen = sub.add_parser("gen-data", help="write synthetic federated data as CSV")
    gen.add_argument("--config", required=True)
    gen.add_argument("--set", action="append", metavar="KEY=VALUE")
    gen.add_argument("--out")
    gen.set_defaults(func=cmd_gen_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
