"""Command-line entry point for the two-stage egocentric motion workbench.

Every subcommand reads the same run configuration (``--config`` JSON file plus
``--set dotted.key=value`` overrides) so stages run separately resolve the same
experiment directory and checkpoints.
"""

import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional

import config
from ablation_analyzer import AblationAnalyzer
from kinematics import SkeletonConfig
from run_config import ConfigError, load_run_config
from run_recorder import MissingCheckpointError, RunRecorder
from synthdata import build_dataset, verify_regeneration
from trainer import ExperimentRunner, FrozenContractError
from visualizer import MotionVisualizer, PlotError, plot

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

# subcommand -> stage trained by it
TRAIN_COMMANDS = {
    "train-rvq": "rvq",
    "train-vae": "vae",
    "train-stage1": "stage1",
    "train-stage2": "stage2",
    "train-evaluator": "evaluator",
}
ALIASES = {
    "stage1-train": "train-stage1",
    "stage2-train": "train-stage2",
    "sample": "stage2-sample",
}


def _add_run_options(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="JSON run configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config value, e.g. --set optim.stage2_steps=500")
    parser.add_argument("--name", help="Run name (shorthand for --set name=...)")
    parser.add_argument("--paradigm", help="Stage-II paradigm: ar, masked, fm_raw, fm_latent or stage1")
    parser.add_argument("--vlm-mode", dest="vlm_mode", help="two_stage, frozen or joint")
    parser.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="motion_cli",
                                     description="Two-stage egocentric motion generation workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Generate and save the synthetic dataset")
    _add_run_options(p)
    p.add_argument("--out", help="Dataset directory (default: the run config's dataset path)")
    p.add_argument("--verify", action="store_true", help="Check the saved files regenerate from their seeds")

    for command, stage in TRAIN_COMMANDS.items():
        aliases = [a for a, target in ALIASES.items() if target == command]
        p = sub.add_parser(command, aliases=aliases, help=f"Train the {stage} checkpoint")
        _add_run_options(p)

    for command, help_text in (("stage1-sample", "Sample motions from the reasoner's own tokens"),
                               ("stage2-sample", "Sample motions with the stage-II generator")):
        aliases = [a for a, target in ALIASES.items() if target == command]
        p = sub.add_parser(command, aliases=aliases, help=help_text)
        _add_run_options(p)
        p.add_argument("--split", default="test", choices=["train", "test"])
        p.add_argument("--out", help="Directory for generated motion files")

    p = sub.add_parser("eval", help="Sample and score the configured variant")
    _add_run_options(p)
    p.add_argument("--plot-dir", help="Also write trajectory and metric plots here")

    p = sub.add_parser("run", help="Train every stage the variant needs, then evaluate")
    _add_run_options(p)
    p.add_argument("--plot-dir", help="Also write trajectory and metric plots here")

    p = sub.add_parser("plot", help="Plot a metric report (.json) or a motion file (.egom/.csv)")
    p.add_argument("source")
    p.add_argument("--out", default=".", help="Output directory")
    p.add_argument("--skeleton", default=config.DEFAULT_SKELETON)
    p.add_argument("--format", dest="formats", action="append", choices=["html", "png"])

    p = sub.add_parser("tokenize", help="Map a motion file to a token-grid file with the trained codec")
    _add_run_options(p)
    p.add_argument("motion")
    p.add_argument("--out", required=True, help="Token file path")

    p = sub.add_parser("vae-roundtrip", help="Reconstruction error of a motion file through the VAE")
    _add_run_options(p)
    p.add_argument("motion")

    p = sub.add_parser("compare", help="Rank recorded runs by their metric reports")
    p.add_argument("--experiment-root", default=config.EXPERIMENT_ROOT)
    p.add_argument("--paradigm")
    p.add_argument("--vlm-mode", dest="vlm_mode")
    p.add_argument("--all-runs", action="store_true", help="Keep every run instead of the newest per variant")
    p.add_argument("--pair", nargs=2, metavar=("FIRST", "SECOND"), help="Compare two variants metric by metric")
    p.add_argument("--plot-dir", help="Write a rank comparison chart here")
    return parser


def _overrides(args: argparse.Namespace, stage: Optional[str] = None) -> List[str]:
    overrides = list(args.overrides)
    for key in ("name", "paradigm", "vlm_mode"):
        value = getattr(args, key, None)
        if value:
            overrides.append(f"{key}={value}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if stage:
        overrides.append(f"stage={stage}")
    return overrides


def _runner(args: argparse.Namespace, stage: Optional[str] = None, extra: Optional[List[str]] = None) -> ExperimentRunner:
    cfg = load_run_config(args.config, _overrides(args, stage) + list(extra or []))
    return ExperimentRunner(cfg)


def _print(data: Dict):
    print(json.dumps(data, indent=2, default=str))


def _plot_run(result: Dict, plot_dir: str, skel: SkeletonConfig) -> List[str]:
    visualizer = MotionVisualizer()
    paths = plot(result["report"], plot_dir, skel=skel, name="report", visualizer=visualizer)
    if result.get("motions"):
        paths += plot(result["motions"][0], plot_dir, skel=skel, name="sample0", visualizer=visualizer)
    return paths


def cmd_gen_data(args) -> int:
    runner = _runner(args, "data")
    ds = runner.cfg.dataset
    out_dir = args.out or runner.dataset_dir()
    build_dataset(int(ds["num_samples"]), int(ds["seed"]), ds["skeleton"], out_dir=out_dir,
                  workers=int(ds["workers"]))
    result = {"dataset": out_dir}
    if args.verify:
        mismatched = verify_regeneration(out_dir)
        result["mismatched"] = mismatched
        if mismatched:
            _print(result)
            return 1
    _print(result)
    return 0


def cmd_train(args, stage: str) -> int:
    runner = _runner(args, stage)
    result = runner.run()
    stage_result = result["stages"][stage]
    _print({"stage": stage,
            "final_loss": stage_result.get("final_loss"),
            "seconds": stage_result.get("seconds"),
            "checkpoints": result["checkpoints"]})
    return 0


def cmd_sample(args, stage1: bool) -> int:
    runner = _runner(args, "eval", ["paradigm=stage1"] if stage1 else None)
    samples = runner.sample(args.split)
    paths = runner.save_samples(samples, args.out)
    _print({"count": samples["count"], "latency_ms": samples["latency_ms"],
            "out": os.path.dirname(paths[0]) if paths else args.out})
    return 0


def cmd_eval(args, stage: str) -> int:
    runner = _runner(args, stage)
    result = runner.run()
    summary = {"run_id": result["run_id"], "report": result["report"].to_dict(),
               "report_path": result["report_path"], "latency_ms": result["latency_ms"],
               "extra": result["extra"]}
    if args.plot_dir:
        summary["plots"] = _plot_run(result, args.plot_dir, runner.skel)
    _print(summary)
    return 0


def cmd_plot(args) -> int:
    visualizer = MotionVisualizer(formats=args.formats)
    paths = plot(args.source, args.out, skel=SkeletonConfig.from_name(args.skeleton), visualizer=visualizer)
    _print({"written": paths})
    return 0


def cmd_tokenize(args) -> int:
    runner = _runner(args)
    tokens = runner.tokenize_motion(args.motion, args.out)
    _print({"tokens": args.out, "levels": int(tokens.shape[0]), "steps": int(tokens.shape[1])})
    return 0


def cmd_vae_roundtrip(args) -> int:
    runner = _runner(args)
    _print(runner.vae_roundtrip(args.motion))
    return 0


def cmd_compare(args) -> int:
    recorder = RunRecorder(args.experiment_root)
    analyzer = AblationAnalyzer(recorder)
    runs = recorder.get_all_runs(paradigm=args.paradigm, vlm_mode=args.vlm_mode)
    table = analyzer.load_reports(runs, latest_only=not args.all_runs)
    if table.empty:
        logger.warning(f"No complete run records under {args.experiment_root}")
        return 1
    print(analyzer.to_markdown(table))
    summary = analyzer.get_summary_statistics(table)
    if args.pair:
        try:
            summary["comparison"] = analyzer.compare_variants(args.pair[0], args.pair[1], table)
        except KeyError as e:
            logger.error(f"{e}; known variants: {list(table.index)}")
            return 2
    if args.plot_dir:
        visualizer = MotionVisualizer()
        fig = visualizer.create_comparison_figure(analyzer.rank_variants(table))
        summary["plots"] = visualizer.save_figure(fig, os.path.join(args.plot_dir, "comparison"))
    _print(summary)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    command = ALIASES.get(args.command, args.command)
    try:
        if command == "gen-data":
            return cmd_gen_data(args)
        if command in TRAIN_COMMANDS:
            return cmd_train(args, TRAIN_COMMANDS[command])
        if command in ("stage1-sample", "stage2-sample"):
            return cmd_sample(args, stage1=command == "stage1-sample")
        if command == "eval":
            return cmd_eval(args, "eval")
        if command == "run":
            return cmd_eval(args, "all")
        if command == "plot":
            return cmd_plot(args)
        if command == "tokenize":
            return cmd_tokenize(args)
        if command == "vae-roundtrip":
            return cmd_vae_roundtrip(args)
        if command == "compare":
            return cmd_compare(args)
    except (ConfigError, MissingCheckpointError, FrozenContractError, PlotError) as e:
        logger.error(str(e))
        return 2
    logger.error(f"Unknown command '{args.command}'")
    return 2


if __name__ == "__main__":
    sys.exit(main())
