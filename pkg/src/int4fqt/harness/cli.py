"""``int4fqt verify|train|bench|inspect --config PATH [--seed N] [--out DIR]``.

Exit status: 0 success, 1 failed suite or diverged run, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .bench import write_bench
from .config import TASKS, ConfigError, RunConfig, load_config
from .inspection import run_inspect
from .train import train, write_outputs
from .verify import report_text, run_verify, selected_suites

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("int4fqt")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="int4fqt", description="Simulated INT4 fully quantized training harness.")
    p.add_argument("task", choices=TASKS)
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (overrides the config 'output' key)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def _configure(args) -> RunConfig:
    cfg = load_config(args.config)
    changes = {"task": args.task}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output"] = args.out
    return cfg.replace(**changes)


def _verify(cfg: RunConfig) -> int:
    try:
        selected_suites(cfg.suites)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ok, results = run_verify(cfg, cfg.output)
    sys.stdout.write(report_text(results))
    return EXIT_OK if ok else EXIT_FAIL


def _train(cfg: RunConfig) -> int:
    res = train(cfg)
    path = write_outputs(res, cfg.output)
    print(f"final_loss={res.final_loss:.6g} final_accuracy={res.final_accuracy:.6g} metrics={path}")
    if res.diverged:
        print("training diverged", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _bench(cfg: RunConfig) -> int:
    cfg.shape_list()  # surface shape errors as config errors before any work
    path = write_bench(cfg, cfg.output)
    sys.stdout.write(path.read_text(encoding="utf-8"))
    return EXIT_OK


def _inspect(cfg: RunConfig) -> int:
    out = run_inspect(cfg, cfg.output)
    print(f"wrote {out}")
    return EXIT_OK


_HANDLERS = {"verify": _verify, "train": _train, "bench": _bench, "inspect": _inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _configure(args)
        return _HANDLERS[args.task](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
