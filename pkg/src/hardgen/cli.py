"""Command-line entry point.

Subcommands mirror the pipeline stages. Every command resolves one JSON
config (flags override config keys), persists the resolved config into the
run directory, and is reproducible byte-for-byte from that file.

Exit codes: 0 success, 2 validation, 3 missing dependency, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig
from .errors import (
    ConfigError,
    DependencyError,
    IntegrityError,
    InvariantViolation,
    NumericError,
)
from .pipeline import (
    EXPERIMENT_KINDS,
    RunPaths,
    stage_dataset,
    stage_experiment,
    stage_finetune,
    stage_generate,
    stage_pretrain,
    stage_score,
)

RUN_ROOT_ENV = "HARDGEN_RUN_ROOT"


def _default_run_dir() -> str:
    return str(Path(os.environ.get(RUN_ROOT_ENV, "runs")) / "default")


def _resolve(args: argparse.Namespace) -> tuple[RunConfig, RunPaths]:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg, RunPaths(args.run_dir)


def _emit(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True))


def cmd_dataset(args: argparse.Namespace) -> int:
    cfg, paths = _resolve(args)
    _emit(stage_dataset(cfg, paths))
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    cfg, paths = _resolve(args)
    _emit(stage_score(cfg, paths))
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg, paths = _resolve(args)
    _emit(stage_pretrain(cfg, paths))
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    cfg, paths = _resolve(args)
    _emit(stage_finetune(cfg, paths))
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    cfg, paths = _resolve(args)
    _emit(
        stage_generate(
            cfg,
            paths,
            mu=args.mu,
            sigma=args.sigma,
            count=args.count,
            class_index=getattr(args, "class_index"),
            difficulty_only=True if args.difficulty_only else None,
            tag=args.tag,
        )
    )
    return 0


def cmd_experiment(args: argparse.Namespace) -> int:
    cfg, paths = _resolve(args)
    report = stage_experiment(cfg, paths, args.kind)
    _emit({"experiment": report.name, "summary": report.summary, "rows": len(report.table["rows"])})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hardgen",
        description=(
            "Difficulty-conditioned training-data synthesis: build the shapes "
            "dataset, score difficulty, train the conditioned generator, "
            "synthesize at commanded difficulty, and run the evaluation suite."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="JSON run config (default: built-in defaults)")
        p.add_argument("--run-dir", default=_default_run_dir(),
                       help=f"artifact directory (root from ${RUN_ROOT_ENV})")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")

    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("dataset", help="generate train/test shapes datasets", formatter_class=fmt)
    add_common(p)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("score", help="train baseline classifier, annotate difficulty, emit KDE",
                       formatter_class=fmt)
    add_common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("pretrain", help="train the base denoiser on text-only conditions",
                       formatter_class=fmt)
    add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="joint adapter + difficulty-encoder fine-tuning",
                       formatter_class=fmt)
    add_common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("generate", help="difficulty-conditioned synthesis", formatter_class=fmt)
    add_common(p)
    p.add_argument("--mu", type=float, default=None, help="difficulty mean (default from config: 0.5)")
    p.add_argument("--sigma", type=float, default=None, help="difficulty std (default from config: 0.1)")
    p.add_argument("--count", type=int, default=None,
                   help="images per class (default: match real per-class counts)")
    p.add_argument("--class", dest="class_index", type=int, default=None,
                   help="restrict generation to one class index")
    p.add_argument("--difficulty-only", action="store_true",
                   help="condition on the difficulty encoder alone (no prompt block)")
    p.add_argument("--tag", default="synthetic", help="output dataset name under datasets/")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("experiment", help="run an evaluation experiment", formatter_class=fmt)
    add_common(p)
    p.add_argument("kind", choices=EXPERIMENT_KINDS)
    p.set_defaults(func=cmd_experiment)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        _fail(exc, 2)
        return 2
    except (DependencyError, IntegrityError) as exc:
        _fail(exc, 3)
        return 3
    except (NumericError, InvariantViolation) as exc:
        _fail(exc, 4)
        return 4


def _fail(exc: Exception, code: int) -> None:
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
