"""Command-line front end: ``kawasaki-lab <study> --config cfg.json``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import STUDIES, ConfigError, ExperimentConfig, StudyError, run
from .model import load_model, validate

EXIT_OK, EXIT_CRITERION, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("kawasaki_lab")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname, "msg": record.getMessage(),
                           "time": self.formatTime(record)})


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser():
    p = _Parser(prog="kawasaki-lab", description=__doc__)
    p.add_argument("--json-logs", action="store_true", help="structured JSON log lines on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    v = sub.add_parser("validate", help="check a model file or an experiment config")
    v.add_argument("--config", help="experiment config JSON")
    v.add_argument("--model", help="model JSON")
    v.add_argument("--json-logs", action="store_true", default=argparse.SUPPRESS)
    for study in STUDIES:
        s = sub.add_parser(study.replace("_", "-"), help=f"run the {study} study")
        s.add_argument("--config", required=True, help="experiment config JSON")
        s.add_argument("--out", help="output directory (overrides the config)")
        s.add_argument("--seed", type=_u64, help="master seed (overrides the config)")
        s.add_argument("--workers", type=int, help="worker processes (default: logical cores)")
        s.add_argument("--json-logs", action="store_true", default=argparse.SUPPRESS)
    return p


def _setup_logging(json_logs):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if json_logs else logging.Formatter("%(levelname)s %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.INFO)


def _validate(args) -> int:
    if not args.config and not args.model:
        log.error("validate needs --config or --model")
        return EXIT_USAGE
    try:
        if args.config:
            cfg = ExperimentConfig.from_file(args.config)
            model = cfg.model_spec
            log.info("config %s ok (hash %s)", args.config, cfg.config_hash())
        else:
            model = load_model(args.model)
    except (ConfigError, OSError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    report = validate(model)
    print(json.dumps(report.as_dict(), indent=2))
    return EXIT_OK if report.passed else EXIT_CRITERION


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(getattr(args, "json_logs", False))
    if args.command == "validate":
        return _validate(args)
    study = args.command.replace("-", "_")
    try:
        cfg = ExperimentConfig.from_file(args.config, out_dir=args.out, seed=args.seed)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    if cfg.study != study:
        log.error("config is for study %r, not %r", cfg.study, study)
        return EXIT_USAGE
    if args.workers is not None and args.workers < 1:
        log.error("--workers must be at least 1")
        return EXIT_USAGE
    log.info("running %s (hash %s) into %s", study, cfg.config_hash(), Path(cfg.out_dir))
    try:
        report = run(cfg, workers=args.workers)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (StudyError, ArithmeticError, RuntimeError, ValueError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    for name, c in report.criteria.items():
        log.info("%s %s: %s", "PASS" if c["passed"] else "FAIL", name, c["detail"])
    log.info("wall clock %.1fs", report.wall_clock)
    return EXIT_OK if report.passed else EXIT_CRITERION


if __name__ == "__main__":
    sys.exit(main())
