# vadd_lab/main.py

"""
Command-line surface

    python -m vadd_lab gen-data --dataset checkerboard --n 100000 --seed 0
    python -m vadd_lab train    --model vadd --dataset checkerboard
    python -m vadd_lab sample   --model vadd --dataset checkerboard --steps 1 5
    python -m vadd_lab eval     --model vadd --dataset checkerboard
    python -m vadd_lab oracle   all
    python -m vadd_lab compare  --dataset checkerboard

Exit codes: 0 success, 1 check failure, 2 usage/input error, 3 numerical abort.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

from vadd_lab import telemetry
from vadd_lab.datagen import make_dataset, write_dataset
from vadd_lab.diffusion.artifacts import write_json
from vadd_lab.diffusion.evaluator import run_eval, run_sampling
from vadd_lab.diffusion.oracles import SCOPES, run_comparison, run_oracles
from vadd_lab.diffusion.orchestrator import run_training
from vadd_lab.diffusion.registry import get_entry
from vadd_lab.errors import EXIT_OK, CheckFailure, VaddError
from vadd_lab.models import MODEL_KINDS
from vadd_lab.rng import RandomStreams
from vadd_lab.schemas import RunConfig, config_hash, load_config, load_eval_metrics

logger = logging.getLogger("vadd_lab")

DEFAULT_OUT = "runs"


def output_root(args) -> Path:
    return Path(args.out or os.environ.get("VADD_LAB_OUT") or DEFAULT_OUT)


def _run_name(cfg: RunConfig, model: str) -> str:
    return f"{model}-{cfg.dataset.name}"


def _checkpoint(args, cfg: RunConfig, root: Path) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    run_dir = root / "train" / _run_name(cfg, args.model)
    entry = get_entry(run_dir, args.tag)
    if entry is None:
        return run_dir / "checkpoints" / f"{args.tag}.json"
    logger.info("Using %s checkpoint %s (step %s)", args.tag, entry["checkpoint"], entry["step_count"])
    return Path(entry["checkpoint"])


def _overrides(args) -> dict:
    overrides = {
        "dataset.name": args.dataset,
        "sampling.steps": args.steps,
        "threads": args.threads,
    }
    if args.command == "gen-data":
        overrides["dataset.n"] = args.n
        overrides["dataset.seed"] = args.seed
    else:
        overrides["sampling.n_samples"] = args.n
        overrides["seed"] = args.seed
    return overrides


# ======================================================
# Commands
# ======================================================

def cmd_gen_data(args, cfg: RunConfig, cfg_hash: str) -> Path:
    root = output_root(args) / "data" / cfg.dataset.name
    streams = RandomStreams(cfg.dataset.seed)
    for pool in ("train", "truth"):
        write_dataset(make_dataset(cfg.dataset, streams, pool), root / pool, cfg_hash)
    return root


def cmd_train(args, cfg: RunConfig, cfg_hash: str) -> Path:
    root = output_root(args)
    run_dir = root / "train" / _run_name(cfg, args.model)
    data_dir = root / "data" / cfg.dataset.name / "train"
    resume = Path(args.resume) if args.resume else None
    run_training(cfg, args.model, data_dir, run_dir, cfg_hash, resume)
    return run_dir


def cmd_sample(args, cfg: RunConfig, cfg_hash: str) -> Path:
    root = output_root(args)
    out_dir = root / "sample" / _run_name(cfg, args.model)
    run_sampling(_checkpoint(args, cfg, root), cfg, cfg.sampling.steps, cfg.sampling.n_samples,
                 cfg.seed, cfg.threads, out_dir)
    return out_dir


def cmd_eval(args, cfg: RunConfig, cfg_hash: str) -> Path:
    root = output_root(args)
    out_dir = root / "eval" / _run_name(cfg, args.model)
    truth_dir = root / "data" / cfg.dataset.name / "truth"
    run_eval(_checkpoint(args, cfg, root), truth_dir, cfg, cfg.sampling.steps,
             cfg.sampling.n_samples, cfg.seed, cfg.threads, out_dir, cfg_hash)
    return out_dir


def cmd_oracle(args, cfg: RunConfig, cfg_hash: str) -> Path:
    out_dir = output_root(args) / "oracle"
    report = run_oracles(args.scope, cfg, cfg.seed, out_dir, cfg_hash)
    write_json(out_dir / "report.json", report.model_dump(mode="json"))
    telemetry.write_metrics(out_dir)
    if not report.passed:
        failed = ", ".join(c.name for c in report.checks if not c.passed)
        raise CheckFailure(f"oracle checks failed: {failed}")
    return out_dir


def cmd_compare(args, cfg: RunConfig, cfg_hash: str) -> Path:
    root = output_root(args)
    evals = {
        kind: load_eval_metrics(root / "eval" / _run_name(cfg, kind) / "metrics.json")
        for kind in MODEL_KINDS
    }
    out_dir = root / "compare" / cfg.dataset.name
    report = run_comparison(evals["vadd"], evals["mdlm"])
    write_json(out_dir / "report.json", report.model_dump(mode="json"))
    telemetry.write_metrics(out_dir)
    if not report.passed:
        failed = ", ".join(c.name for c in report.checks if not c.passed)
        raise CheckFailure(f"comparison gates failed: {failed}")
    return out_dir


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "oracle": cmd_oracle,
    "compare": cmd_compare,
}


# ======================================================
# Argument Parsing
# ======================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--dataset", help="checkerboard | swissroll | circles")
    common.add_argument("--steps", type=int, nargs="+", help="sampling step counts T")
    common.add_argument("--n", type=int, help="dataset size (gen-data) or sample count")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--out", help="output root (default: $VADD_LAB_OUT or runs/)")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--model", choices=MODEL_KINDS, default="vadd")
    model.add_argument("--checkpoint",
                       help="checkpoint path (default: the run's registered --tag checkpoint)")
    model.add_argument("--tag", choices=("final", "best"), default="final",
                       help="registered checkpoint to use when --checkpoint is not given")

    parser = argparse.ArgumentParser(prog="vadd_lab", description="VADD / MDLM toy-density lab")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate train and ground-truth pools")
    train = sub.add_parser("train", parents=[common, model], help="train a model")
    train.add_argument("--resume", help="continue from a final checkpoint")
    sub.add_parser("sample", parents=[common, model], help="ancestral sampling")
    sub.add_parser("eval", parents=[common, model], help="JS-T and NLL metrics")
    oracle = sub.add_parser("oracle", parents=[common], help="run verification oracles")
    oracle.add_argument("scope", nargs="?", default="all", choices=SCOPES + ("all",))
    sub.add_parser("compare", parents=[common], help="gate VADD against MDLM eval metrics")
    return parser


def main(argv=None) -> int:
    telemetry.setup_logging()
    args = build_parser().parse_args(argv)

    try:
        cfg = load_config(args.config, _overrides(args))
        cfg_hash = config_hash(cfg)
        with telemetry.command_span(args.command, config_hash=cfg_hash, seed=cfg.seed):
            out_dir = COMMANDS[args.command](args, cfg, cfg_hash)
        telemetry.write_metrics(out_dir)
    except VaddError as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code

    logger.info("Done: %s -> %s", args.command, out_dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
