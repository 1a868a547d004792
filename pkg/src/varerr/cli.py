"""Command-line entry point: ``varerr run|validate|list-scenarios``.

Exit codes: 0 pass, 1 invariant failure, 2 configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import SCENARIO_KINDS, ConfigError, validate_config
from .exact import NumericalFailure
from .scenarios import EXIT_CONFIG, EXIT_FAIL, EXIT_NUMERICAL, EXIT_PASS, run_scenario

OUTPUT_ENV = "VARERR_OUTPUT_DIR"


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="varerr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario and write its artifacts")
    run.add_argument("config", help="scenario configuration (JSON)")
    run.add_argument("--output-dir", help=f"artifact directory (default: config value, then ${OUTPUT_ENV}, "
                                          "then ./varerr-output/<name>)")
    run.add_argument("--seed", type=int, help="override the configured random seed")
    run.add_argument("--samples", type=int, help="override the number of samples")

    val = sub.add_parser("validate", help="check a configuration without running it")
    val.add_argument("config")

    sub.add_parser("list-scenarios", help="list the scenario kinds")
    return p


def output_dir_for(cfg, override: str | None) -> Path:
    if override:
        return Path(override)
    if "output_dir" in cfg.data:
        return cfg.resolve(cfg.data["output_dir"])
    root = os.environ.get(OUTPUT_ENV)
    return Path(root) / cfg.name if root else Path("varerr-output") / cfg.name


def _load(path, seed=None, samples=None):
    cfg = validate_config(path)
    if seed is not None:
        if seed < 0:
            raise ConfigError(path, ["1: --seed must be non-negative"])
        cfg.data["seed"] = seed
    if samples is not None and samples < 2:
        raise ConfigError(path, ["1: --samples must be at least 2"])
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "list-scenarios":
        for kind, text in SCENARIO_KINDS.items():
            print(f"{kind:12s} {text}")
        return EXIT_PASS

    try:
        cfg = _load(args.config, getattr(args, "seed", None), getattr(args, "samples", None))
    except ConfigError as exc:
        for m in exc.messages:
            print(f"{exc.path}:{m}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "validate":
        print(f"{args.config}: ok ({cfg.kind})")
        return EXIT_PASS

    out = output_dir_for(cfg, args.output_dir)
    try:
        outcome = run_scenario(cfg, out, args.samples)
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as exc:
        # problems only detectable while building the scenario (e.g. coverage)
        print(f"{args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    s = outcome.summary
    failed = [k for k, c in s["checks"].items() if not c["pass"]]
    print(f"{cfg.name}: {s['verdict']} (max_eps={s.get('max_eps')}, "
          f"bound_ok={s.get('bound_ok')}) -> {out}")
    for k in failed:
        print(f"  failed check: {k} (value {s['checks'][k]['value']})")
    return EXIT_PASS if outcome.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
