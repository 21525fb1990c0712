# vadd_lab/diffusion/evaluator.py

"""
Sampling + Evaluation Runs

- run_sampling: T-step samples per requested T, written as CSV, counts
  CSV and a PPM heatmap
- run_eval: JS-T against the ground-truth pool for every T, the K-sample
  NLL on ground-truth sequences, and per-T sample statistics
"""

import logging
from pathlib import Path

from vadd_lab import telemetry
from vadd_lab.datagen import load_tokens
from vadd_lab.diffusion.artifacts import write_counts_csv, write_json, write_ppm, write_samples_csv
from vadd_lab.diffusion.registry import build_lineage, load_checkpoint
from vadd_lab.evaluation import Histogram2D, js_divergence, nll, sample_stats
from vadd_lab.models import DiffusionModel
from vadd_lab.sampler import generate_samples
from vadd_lab.schemas import EvalMetrics, RunConfig

logger = logging.getLogger(__name__)


def _draw(model: DiffusionModel, cfg: RunConfig, T: int, n_samples: int, seed: int, threads: int):
    tokens = generate_samples(
        model, T, n_samples, seed,
        chunk_size=cfg.sampling.chunk_size,
        threads=threads,
        shared_latent=cfg.model.shared_latent,
        progress=cfg.training.progress,
    )
    telemetry.SAMPLES_GENERATED.inc(len(tokens))
    return tokens


def run_sampling(checkpoint: Path, cfg: RunConfig, steps, n_samples: int, seed: int,
                 threads: int, out_dir: Path) -> dict:
    """Returns {T: directory with samples.csv, counts.csv, heatmap.ppm}."""
    model = load_checkpoint(checkpoint).model
    written = {}
    for T in steps:
        tokens = _draw(model, cfg, T, n_samples, seed, threads)
        hist = Histogram2D.from_tokens(tokens, model.arch.vocab_size)
        target = Path(out_dir) / f"T{T}"
        write_samples_csv(target / "samples.csv", tokens)
        write_counts_csv(target / "counts.csv", hist)
        write_ppm(target / "heatmap.ppm", hist)
        logger.info("[SAMPLE] T=%d: %d samples -> %s", T, len(tokens), target)
        written[T] = target
    return written


def split_half_js(tokens, vocab_size: int = 100) -> float:
    """Sampling-noise floor: JS between the two halves of one pool."""
    half = len(tokens) // 2
    return js_divergence(Histogram2D.from_tokens(tokens[:half], vocab_size),
                         Histogram2D.from_tokens(tokens[half:2 * half], vocab_size))


def _board_size(meta: dict, cfg: RunConfig) -> int:
    """Board the checkpoint was trained on; the run config only fills in for older metas."""
    trained = meta.get("config", {}).get("dataset", {})
    return int(trained.get("board_size", cfg.dataset.board_size))


def run_eval(checkpoint: Path, truth_dir: Path, cfg: RunConfig, steps, n_samples: int,
             seed: int, threads: int, out_dir: Path, cfg_hash: str) -> EvalMetrics:
    ckpt = load_checkpoint(checkpoint)
    model = ckpt.model
    vocab_size = model.arch.vocab_size
    truth = load_tokens(truth_dir, vocab_size)
    truth_hist = Histogram2D.from_tokens(truth, vocab_size)
    dataset = ckpt.meta.get("dataset", cfg.dataset.name)
    board_size = _board_size(ckpt.meta, cfg)
    lineage = build_lineage(checkpoint)
    logger.info("[EVAL] %s checkpoint lineage: %s", model.kind, " -> ".join(lineage))

    js, stats = {}, {}
    for T in steps:
        samples = _draw(model, cfg, T, n_samples, seed, threads)
        js[str(T)] = js_divergence(Histogram2D.from_tokens(samples, vocab_size), truth_hist)
        stats[str(T)] = sample_stats(samples, dataset, board_size, vocab_size)
        logger.info("[EVAL] %s JS-%d = %.4f", model.kind, T, js[str(T)])

    stats["truth"] = {
        "split_half_js": split_half_js(truth, vocab_size),
        **sample_stats(truth, dataset, board_size, vocab_size),
    }

    ev = cfg.eval
    test = truth[: ev.n_sequences]
    value = nll(model, test, ev.K, ev.n_time_pairs, seed, threads, cfg.training.t_min)

    metrics = EvalMetrics(
        js=js,
        nll=value,
        K=ev.K,
        n_time_pairs=ev.n_time_pairs,
        seed=seed,
        model=model.kind,
        config_hash=cfg_hash,
        sample_stats=stats,
        dataset=dataset,
        checkpoint=str(checkpoint),
        lineage=lineage,
    )
    write_json(Path(out_dir) / "metrics.json", metrics.model_dump(mode="json"))
    return metrics
