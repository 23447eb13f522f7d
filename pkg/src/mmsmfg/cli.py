"""Command-line entry point ``mmfg``.

Numerical libraries are imported only after ``--threads`` has been applied to
the BLAS/OpenMP environment variables.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

KINDS = ("riccati", "lqg-solve", "oscillator", "mv-convergence", "nash-check", "fixed-point", "gain-estimate")
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")
SEED_ENV = "MMFG_SEED"


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmfg", description="Major-minor mean field game experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        p.add_argument("--config", help="YAML config (defaults apply when omitted)")
        p.add_argument("--seed", type=_u64, help=f"overrides ${SEED_ENV} and the config seed")
        p.add_argument("--threads", type=_positive, help="cap for BLAS/OpenMP threads")
        p.add_argument("--out", help="output directory (overrides the config)")
    p = sub.add_parser("validate", help="schema-check a config without running it")
    p.add_argument("--config", required=True)
    return parser


def resolve_seed(flag, env, config_seed: int) -> int:
    """Flag, then environment, then config."""
    if flag is not None:
        return int(flag)
    if env not in (None, ""):
        return _u64(env)
    return int(config_seed)


def _apply_threads(n):
    n = n or os.cpu_count() or 1
    for var in THREAD_VARS:
        os.environ[var] = str(n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command != "validate":
        _apply_threads(args.threads)

    from .config import ConfigError, parse_config, validate_config

    try:
        if args.command == "validate":
            cfg = validate_config(args.config)
            print(f"ok: {cfg.experiment} config {args.config}")
            return 0
        cfg = validate_config(args.config) if args.config else parse_config({"experiment": args.command})
        if cfg.experiment != args.command:
            raise ConfigError([f"experiment: config declares {cfg.experiment!r} but subcommand is {args.command!r}"])
        try:
            seed = resolve_seed(args.seed, os.environ.get(SEED_ENV), cfg.seed)
        except argparse.ArgumentTypeError as exc:
            raise ConfigError([f"{SEED_ENV}: {exc}"]) from None
        cfg = cfg.model_copy(update={"seed": seed, "output": args.out or cfg.output})
    except ConfigError as exc:
        for line in exc.diagnostics:
            print(f"error: {line}", file=sys.stderr)
        return 2

    from .runner import run_experiment

    report = run_experiment(cfg)
    for c in report.checks:
        mark = "skip" if c.passed is None else ("PASS" if c.passed else "FAIL")
        print(f"{mark} {c.name}: value={c.value} threshold={c.threshold}")
    if report.error:
        print(f"error: {report.error}", file=sys.stderr)
    print(f"{report.experiment}: {report.status}, outputs in {cfg.output}")
    return report.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
