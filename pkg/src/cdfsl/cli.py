"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 training failure,
4 missing upstream artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import CapacityError, CDFSLError, ConsistencyError, MissingDependencyError, TrainingError, ValidationError
from .pipeline import (
    STAGES,
    VARIANTS,
    ExperimentConfig,
    Pipeline,
    apply_overrides,
    run_ablation_matrix,
    run_kshot_sweep,
    run_source_size_sweep,
    run_temperature_sweep,
)

log = logging.getLogger("cdfsl")

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING, EXIT_MISSING = 0, 2, 3, 4


def _csv(kind):
    def parse(text: str):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc

    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdfsl", description="Cross-domain few-shot video learning at desk scale.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--variant", choices=VARIANTS, help="ablation variant")
    common.add_argument("-v", "--verbose", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-manifest", parents=[common], help="write manifest.json")
    sub.add_parser("pretrain", parents=[common], help="stage 1: masked reconstruction")
    sub.add_parser("curriculum", parents=[common], help="stage 2: supervised + consistency")
    sub.add_parser("eval", parents=[common], help="stage 3: few-shot episodes")
    run = sub.add_parser("run", parents=[common], help="all stages, resuming finished ones")
    run.add_argument("--stage", choices=STAGES, help="run only this stage")
    for name, helptext in (
        ("ablate", "ablation matrix"),
        ("sweep-temp", "sharpening temperature sweep"),
        ("sweep-kshot", "support-size sweep"),
        ("sweep-source", "source class-count sweep"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--seeds", type=_csv(int), default=[0, 1, 2])
        if name == "ablate":
            p.add_argument("--variants", type=_csv(str), default=list(VARIANTS))
        elif name == "sweep-temp":
            p.add_argument("--taus", type=_csv(float), default=[0.1, 0.5, 1.5, 5.0, 10.0])
        elif name == "sweep-kshot":
            p.add_argument("--ks", type=_csv(int), default=[1, 5, 20])
        else:
            p.add_argument("--counts", type=_csv(int), default=[4, 8, 16])
    return parser


def split_overrides(argv: list[str]) -> tuple[list[str], dict[str, str]]:
    """Pull ``--section.field VALUE`` (or ``--section.field=VALUE``) pairs out of argv."""
    rest, overrides = [], {}
    i = 0
    while i < len(argv):
        arg = argv[i]
        if arg.startswith("--") and "." in arg.split("=", 1)[0]:
            key, eq, value = arg[2:].partition("=")
            if not eq:
                if i + 1 >= len(argv):
                    raise ValidationError(f"override {arg} needs a value")
                value = argv[i + 1]
                i += 1
            overrides[key] = value
        else:
            rest.append(arg)
        i += 1
    return rest, overrides


def resolve_config(args: argparse.Namespace, overrides: dict[str, str]) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg = apply_overrides(cfg, overrides)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=str(args.out))
    if args.variant is not None:
        cfg = replace(cfg, variant=args.variant)
    ExperimentConfig.from_dict(cfg.to_dict())  # re-validate the merged result
    return cfg


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def _dispatch(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    cmd = args.command
    if cmd in ("gen-manifest", "pretrain", "curriculum", "eval", "run"):
        pipe = Pipeline(cfg)
        if cmd == "gen-manifest":
            stages = ("generate",)
        elif cmd == "run":
            stages = (args.stage,) if args.stage else STAGES
        elif cmd == "eval":
            stages = ("eval",)
        else:
            # single-stage commands still (re)write the manifest they depend on
            stages = ("generate", cmd)
        report = pipe.run(stages)
        if report is not None:
            _emit({"variant": cfg.variant, "mean": report.mean, "ci95": report.ci95, "out": cfg.out_dir})
        return
    out = Path(cfg.out_dir)
    if cmd == "ablate":
        table = run_ablation_matrix(cfg, args.variants, args.seeds, out)
    elif cmd == "sweep-temp":
        table = run_temperature_sweep(cfg, args.taus, args.seeds, out)
    elif cmd == "sweep-kshot":
        table = run_kshot_sweep(cfg, args.ks, args.seeds, out)
    else:
        table = run_source_size_sweep(cfg, args.counts, args.seeds, out)
    _emit({"rows": table.rows, **table.extra})


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        rest, overrides = split_overrides(argv)
    except ValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args = parser.parse_args(rest)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args, overrides)
        _dispatch(args, cfg)
    except MissingDependencyError as exc:
        print(f"missing dependency{_where(exc)}: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingError as exc:
        print(f"training failed{_where(exc)}: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (ValidationError, CapacityError, ConsistencyError) as exc:
        print(f"config error{_where(exc)}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CDFSLError as exc:
        print(f"failed{_where(exc)}: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    return EXIT_OK


def _where(exc: Exception) -> str:
    stage = getattr(exc, "stage", None)
    return f" in stage '{stage}'" if stage else ""


if __name__ == "__main__":
    sys.exit(main())
