# vadd_lab/diffusion/orchestrator.py

"""
Training Orchestrator

Training cycle (per optimizer step h):
1. Take the next minibatch of the epoch's shuffled pool
2. Draw t, x_t and z per element; compute the annealed DELBO (or ELBO)
3. Backpropagate and check every value is finite
4. Adam update with the scheduled learning rate
5. Log a loss row every `log_every` steps

At the end the final checkpoint (with optimizer and stream states) and
the best-epoch checkpoint are saved and registered.
"""

import logging
import math
import shutil
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from tqdm import tqdm

from vadd_lab import telemetry
from vadd_lab.datagen import load_manifest, load_tokens
from vadd_lab.diffgraph import adam_step, backward, cosine_lr
from vadd_lab.diffusion.artifacts import write_json
from vadd_lab.diffusion.metrics_logger import LossLog
from vadd_lab.diffusion.registry import (
    checkpoint_meta,
    load_checkpoint,
    read_meta,
    register_checkpoint,
    save_checkpoint,
)
from vadd_lab.errors import ConfigurationError, NumericalError, UsageError
from vadd_lab.models import Architecture, DiffusionModel, build_model
from vadd_lab.objective import AnnealSchedule, LossBreakdown, batch_loss
from vadd_lab.rng import RandomStreams
from vadd_lab.schemas import RunConfig

logger = logging.getLogger(__name__)

LOSS_LOG = "metrics.csv"
DIAGNOSTIC = "diagnostic.json"


@dataclass
class TrainResult:
    model: DiffusionModel
    final_path: Path
    best_path: Path
    steps: int
    final_loss: Optional[float]
    best_loss: Optional[float]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, n // batch_size)


def learning_rate(cfg: RunConfig, step: int, total_steps: int) -> float:
    if cfg.optimizer.schedule == "constant":
        return cfg.optimizer.lr0
    return cosine_lr(step, total_steps, cfg.optimizer.lr0)


# ============================================================
# Numerical Abort
# ============================================================

def _non_finite(arrays: dict) -> list:
    return sorted(name for name, value in arrays.items() if not np.all(np.isfinite(value)))


def abort_numerical(run_dir: Path, step: int, loss: float, breakdown: LossBreakdown,
                    model: DiffusionModel, grads: Optional[dict] = None):
    """Dump a diagnostic next to the run and raise NumericalError."""
    store = model.params
    diagnostic = {
        "step": int(step),
        "loss": loss if math.isfinite(loss) else repr(loss),
        "breakdown": {k: (v if math.isfinite(v) else repr(v)) for k, v in breakdown.as_row().items()},
        "param_norms": {
            name: (float(np.linalg.norm(v)) if np.all(np.isfinite(v)) else "non-finite")
            for name, v in store.entries.items()
        },
        "non_finite_params": _non_finite(store.entries),
        "non_finite_grads": _non_finite(grads) if grads is not None else [],
    }
    write_json(Path(run_dir) / DIAGNOSTIC, diagnostic)
    raise NumericalError(f"non-finite values at step {step} (see {DIAGNOSTIC})", diagnostic)


# ============================================================
# Training Loop
# ============================================================

def _prepare_model(cfg: RunConfig, kind: str, streams: RandomStreams, resume: Optional[Path]):
    if resume is None:
        arch = Architecture.from_config(cfg.model)
        return build_model(arch, kind, streams.init), 0, None

    ckpt = load_checkpoint(resume)
    if ckpt.model.kind != kind:
        raise UsageError(f"cannot resume a '{ckpt.model.kind}' checkpoint as '{kind}'")
    if not ckpt.has_optimizer:
        raise UsageError(f"{resume} has no optimizer state; resume from a final checkpoint")
    if ckpt.rng:
        streams.load_state_dict(ckpt.rng)
    logger.info("[TRAIN] Resuming from %s at step %d", resume, ckpt.model.params.step_count)
    return ckpt.model, int(ckpt.meta.get("epoch", 0)), str(resume)


def _snapshot_parent(run_dir: Path, parent: Optional[str], final_path: Path) -> Optional[str]:
    """Copy a resumed-from final checkpoint aside and return the parent path to record."""
    if parent is None or Path(parent).resolve() != final_path.resolve():
        return parent
    meta = read_meta(final_path)
    snapshot = final_path.with_name(f"final-{int(meta.get('step_count', 0))}.json")
    shutil.copyfile(final_path, snapshot)
    register_checkpoint(run_dir, snapshot, meta)
    logger.info("[CKPT] Kept resumed checkpoint as %s", snapshot)
    return str(snapshot)


def run_training(cfg: RunConfig, kind: str, data_dir: Path, run_dir: Path, cfg_hash: str,
                 resume: Optional[Path] = None) -> TrainResult:
    data_dir, run_dir = Path(data_dir), Path(run_dir)
    manifest = load_manifest(data_dir)
    tokens = load_tokens(data_dir, cfg.model.vocab_size)
    if tokens.shape[1] != cfg.model.seq_len:
        raise ConfigurationError(
            f"data has sequences of length {tokens.shape[1]}, model expects {cfg.model.seq_len}"
        )

    streams = RandomStreams(cfg.seed)
    model, start_epoch, parent = _prepare_model(cfg, kind, streams, resume)
    store = model.params

    tr = cfg.training
    n = len(tokens)
    spe = steps_per_epoch(n, tr.batch_size)
    total_steps = tr.epochs * spe
    anneal = AnnealSchedule(tr.anneal_epochs * spe)
    logger.info("[TRAIN] %s on %s: n=%d, %d steps/epoch, %d epochs, anneal over %d steps",
                kind, manifest.name, n, spe, tr.epochs, anneal.total_anneal_steps)

    best_loss, best_store, best_epoch = math.inf, None, start_epoch
    last_loss = None

    with LossLog(run_dir / LOSS_LOG, append=resume is not None) as loss_log:
        epochs = range(start_epoch, tr.epochs)
        for epoch in tqdm(epochs, desc=f"Training {kind}", disable=not tr.progress):
            perm = streams.data.permutation(n)
            epoch_losses = []

            for k in range(spe):
                h = store.step_count
                started = time.perf_counter()
                batch = tokens[perm[k * tr.batch_size:(k + 1) * tr.batch_size]]

                g, loss_node, breakdown = batch_loss(model, batch, h, streams, anneal, tr.t_min)
                loss = float(g.value(loss_node))
                if not math.isfinite(loss):
                    abort_numerical(run_dir, h, loss, breakdown, model)

                grads = backward(g, loss_node)
                if _non_finite(grads):
                    abort_numerical(run_dir, h, loss, breakdown, model, grads)

                lr = learning_rate(cfg, h, total_steps)
                adam_step(store, grads, lr, cfg.optimizer.beta1, cfg.optimizer.beta2,
                          cfg.optimizer.eps, cfg.optimizer.weight_decay)
                if not store.all_finite():
                    abort_numerical(run_dir, h, loss, breakdown, model, grads)

                elapsed = time.perf_counter() - started
                telemetry.TRAIN_STEPS.inc()
                telemetry.TRAIN_LOSS.set(loss)
                telemetry.KL_WEIGHT.set(breakdown.lam)
                telemetry.LEARNING_RATE.set(lr)
                telemetry.STEP_LATENCY.observe(elapsed)

                if h % tr.log_every == 0:
                    wallclock_ms = 1000.0 * elapsed if tr.record_wallclock else 0.0
                    loss_log.log(h, lr, loss, breakdown, wallclock_ms)
                    logger.info("[TRAIN] step %d loss=%.4f lambda=%.3f kl=%.4f lr=%.2e",
                                h, loss, breakdown.lam, breakdown.kl_raw, lr)

                epoch_losses.append(loss)
                last_loss = loss

            epoch_loss = math.fsum(epoch_losses) / len(epoch_losses)
            if epoch_loss < best_loss:
                best_loss, best_store, best_epoch = epoch_loss, store.copy(), epoch + 1

    end_epoch = max(start_epoch, tr.epochs)
    if best_store is None:
        best_store, best_epoch = store.copy(), end_epoch

    final_path = run_dir / "checkpoints" / "final.json"
    parent = _snapshot_parent(run_dir, parent, final_path)
    common = {
        "config": cfg.model_dump(mode="json"),
        "config_hash": cfg_hash,
        "dataset": manifest.name,
        "parent": parent,
    }
    final_meta = checkpoint_meta(model, tag="final", epoch=end_epoch, loss=last_loss, **common)
    final_path = save_checkpoint(final_path, model, final_meta,
                                 rng=streams.state_dict())
    register_checkpoint(run_dir, final_path, final_meta)

    best_model = DiffusionModel(arch=model.arch, params=best_store, kind=model.kind)
    best_meta = checkpoint_meta(
        best_model, tag="best", epoch=best_epoch,
        loss=best_loss if math.isfinite(best_loss) else None, **common,
    )
    best_path = save_checkpoint(run_dir / "checkpoints" / "best.json", best_model, best_meta,
                                with_optimizer=False)
    register_checkpoint(run_dir, best_path, best_meta)

    logger.info("[TRAIN] Done: %d steps, final loss %s", store.step_count, last_loss)
    return TrainResult(
        model=model,
        final_path=final_path,
        best_path=best_path,
        steps=store.step_count,
        final_loss=last_loss,
        best_loss=best_loss if math.isfinite(best_loss) else None,
    )
