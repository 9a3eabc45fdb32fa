"""Command line entry point ``tosc``.

Subcommands ``train``, ``eval``, ``attack`` and ``run`` (all three in order)
take ``--config`` (a YAML file or a preset name), ``--out`` and ``--seed``;
without ``--seed`` every seed in the config runs. ``report`` reads a results
directory, and ``synth`` writes a procedural corpus for offline runs.

Exit status: 0 on full success, 1 if any (scheme, seed) run failed, 2 for
configuration or usage errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

from ..errors import ConfigError, NotFoundError, ToscError, ValidationError
from .config import PRESETS, deviations, load_config
from .report import emit_report
from .runner import StepReport, run_attack, run_eval, run_suite, run_train

STEPS = {"train": run_train, "eval": run_eval, "attack": run_attack, "run": run_suite}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tosc", description="Privacy-preserving task-oriented transceiver runs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("train", "train every scheme of the config"),
                            ("eval", "accuracy at every test SNR plus cost profile"),
                            ("attack", "black-box inversion attack and MI leakage"),
                            ("run", "train, eval and attack in one go")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help=f"YAML file or preset ({', '.join(PRESETS)})")
        p.add_argument("--out", help="results directory (overrides 'out' in the config)")
        p.add_argument("--seed", type=int, action="append", help="run seed; repeat for several (default: config seeds)")
        p.add_argument("--scheme", action="append", metavar="LABEL", help="restrict to these scheme labels")
        p.add_argument("--data-root", help="dataset root (default: config, then $TOSC_DATA_ROOT, then ./data)")
        if name == "run":
            p.add_argument("--no-attack", action="store_true", help="skip the attack step")
            p.add_argument("--report", action="store_true", help="emit the report afterwards")

    p = sub.add_parser("report", help="figures and tables from a results directory")
    p.add_argument("--out", required=True, help="results directory written by train/eval/attack")
    p.add_argument("--config", help="accepted for symmetry; the report reads only the CSV files")
    p.add_argument("--seed", type=int, help="accepted for symmetry; every seed present is reported")
    p.add_argument("--report-dir", help="where to write (default: <out>/report)")

    p = sub.add_parser("synth", help="write a procedural corpus in the standard on-disk layout")
    p.add_argument("--out", required=True, help="dataset root to write into")
    p.add_argument("--corpus", choices=("synthetic-objects", "synthetic-faces"), default="synthetic-objects")
    p.add_argument("--train", type=int, default=2000, help="training images")
    p.add_argument("--test", type=int, default=1000, help="test images")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("check", help="validate a config and print its hash and deviations")
    p.add_argument("--config", required=True)
    return parser


def _print_report(report: StepReport):
    for key in report.ok:
        print(f"ok      {report.step} {key}")
    for key, err in sorted(report.failed.items()):
        print(f"FAILED  {report.step} {key}: {err}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "synth":
            from ..synthetic import build_synthetic_corpus
            path = build_synthetic_corpus(args.out, args.corpus, args.train, args.test, seed=args.seed)
            print(path)
            return 0
        if args.command == "report":
            for name, path in sorted(emit_report(args.out, args.report_dir).items()):
                print(f"{name}: {path}")
            return 0
        cfg = load_config(args.config)
        if args.command == "check":
            print(f"config {cfg.name} hash {cfg.config_hash}")
            for line in deviations(cfg) or ["no deviations from reference settings"]:
                print(f"  {line}")
            return 0
        kwargs = dict(out=args.out, seeds=args.seed, labels=args.scheme, data_root=args.data_root)
        if args.command == "run":
            report = run_suite(cfg, attack_step=not args.no_attack, **kwargs)
        else:
            report = STEPS[args.command](cfg, **kwargs)
        _print_report(report)
        if args.command == "run" and args.report and report.ok:
            emit_report(args.out or cfg.out)
        return 0 if report.success else 1
    except (ConfigError, ValidationError, NotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ToscError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
