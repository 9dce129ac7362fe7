"""Command-line front end.

    residual-tuner run CONFIG [--out DIR] [--seed N] [--stride N] [--filter-alpha A] [--single-thread]
    residual-tuner compare RUN_A RUN_B [--out FILE]
    residual-tuner plot RUN [--max-points N]
    residual-tuner replay STREAM.csv [--config CONFIG] [--stage KIND] [--out DIR] [--single-thread]

Exit codes: 0 success, 1 stage failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from . import experiment, report
from .config import ConfigError, ExperimentConfig, load_config, plant_params, to_stage_config
from .pipeline import STAGE_KINDS, StageConfig, StageError

log = logging.getLogger("residual_tuner")


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    doc = cfg.model_dump(mode="json")
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    for st in doc["stages"]:
        if getattr(args, "stride", None) is not None:
            st["stride"] = args.stride
        if getattr(args, "filter_alpha", None) is not None:
            st["filter_alpha"] = args.filter_alpha
    return ExperimentConfig.model_validate(doc)


def _common_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", type=Path, help="run directory (must not exist)")
    p.add_argument("--seed", type=int, help="override the experiment seed")
    p.add_argument("--stride", type=int, help="override the update stride of every stage")
    p.add_argument("--filter-alpha", type=float, help="override the low-pass coefficient of every stage")
    p.add_argument("--single-thread", action="store_true",
                   help="run tuning inline (deterministic) instead of on a background worker")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="residual-tuner", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a staged experiment")
    p.add_argument("config", type=Path)
    _common_run_flags(p)

    p = sub.add_parser("compare", help="compare two completed runs")
    p.add_argument("run_a", type=Path)
    p.add_argument("run_b", type=Path)
    p.add_argument("--out", type=Path, default=Path("comparison.csv"), help="CSV report path")

    p = sub.add_parser("plot", help="write H2 and channel-error plots for a run")
    p.add_argument("run", type=Path)
    p.add_argument("--max-points", type=int, default=1000)

    p = sub.add_parser("replay", help="learn a residual against a recorded stream CSV")
    p.add_argument("stream", type=Path)
    p.add_argument("--config", type=Path, help="take plant and stage settings from this config")
    p.add_argument("--stage", choices=STAGE_KINDS,
                   help="stage to learn (default: first stage of --config, else real-to-kin)")
    _common_run_flags(p)
    return parser


def cmd_run(args) -> int:
    try:
        cfg = _apply_overrides(load_config(args.config), args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"{args.config}: {exc}", file=sys.stderr)
        return 2
    out = args.out or experiment.default_out_root() / f"{cfg.name}-{cfg.config_hash()[:10]}"
    text = yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)
    try:
        manifest = experiment.run_experiment(cfg, out, config_text=text, single_thread=args.single_thread)
    except experiment.RunDirExists as exc:
        print(exc, file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"{exc}; partial logs in {out}", file=sys.stderr)
        return 1
    for s in manifest["stages"]:
        print(f"{s['kind']:<12} updates={s['updates']:<5} mean_h2={s.get('mean_h2', float('nan')):.5g} "
              f"trailing_h2={s.get('trailing_mean_h2', float('nan')):.5g} warm_start={s['warm_start']}")
    print(out)
    return 0


def cmd_compare(args) -> int:
    try:
        rows = report.compare_runs(args.run_a, args.run_b)
    except report.IncompleteRun as exc:
        print(exc, file=sys.stderr)
        return 2
    args.out.write_text(report.comparison_csv(rows))
    print(report.comparison_table(rows))
    return 0


def cmd_plot(args) -> int:
    try:
        files = report.plot_run(args.run, args.max_points)
    except (report.IncompleteRun, ValueError) as exc:
        print(exc, file=sys.stderr)
        return 2
    for f in files:
        print(f)
    return 0


def cmd_replay(args) -> int:
    stage = params = None
    if args.config is not None:
        try:
            cfg = _apply_overrides(load_config(args.config), args)
        except (ConfigError, ValueError) as exc:
            print(exc, file=sys.stderr)
            return 2
        chosen = [s for s in cfg.stages if args.stage in (None, s.kind)]
        if not chosen:
            print(f"{args.config}: no {args.stage} stage", file=sys.stderr)
            return 2
        sm = chosen[0]
        stage = to_stage_config(sm, default_seed=experiment.derived_seed(cfg.seed, STAGE_KINDS.index(sm.kind), 1))
        params = plant_params(cfg)
    elif args.stage or args.stride is not None or args.filter_alpha is not None or args.seed is not None:
        base = StageConfig(kind=args.stage or "real-to-kin")
        stage = replace(base,
                        stride=args.stride or base.stride,
                        filter_alpha=base.filter_alpha if args.filter_alpha is None else args.filter_alpha,
                        seed=base.seed if args.seed is None else args.seed)
    out = args.out or experiment.default_out_root() / f"replay-{args.stream.stem}"
    try:
        manifest = experiment.run_replay(args.stream, out, stage, params, single_thread=args.single_thread)
    except (ValueError, OSError) as exc:
        print(exc, file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"{exc}; partial logs in {out}", file=sys.stderr)
        return 1
    s = manifest["stages"][0]
    print(f"{s['kind']:<12} updates={s['updates']:<5} trailing_h2={s.get('trailing_mean_h2', float('nan')):.5g}")
    print(out)
    return 0


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "plot": cmd_plot, "replay": cmd_replay}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
