# vadd_lab/diffusion/registry.py

"""
Checkpoint Store + Registry

A checkpoint is one JSON document:
- meta: model kind, architecture, parameter counts, config, config hash,
  step count, epoch, loss, parent checkpoint
- params: name -> {shape, data}
- optimizer: Adam moments and step count (final checkpoints only)
- rng: stream states so a resumed run draws what an unbroken run would

Every saved checkpoint is also recorded in <run>/registry.json with its
lineage, the way model versions are tracked.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from vadd_lab.diffgraph import ParamStore
from vadd_lab.errors import DataError
from vadd_lab.models import Architecture, DiffusionModel, MODEL_KINDS

logger = logging.getLogger(__name__)

REGISTRY_FILE = "registry.json"
MAX_LINEAGE = 20


@dataclass
class Checkpoint:
    model: DiffusionModel
    meta: dict
    rng: dict = field(default_factory=dict)
    has_optimizer: bool = False


def _pack(arrays: dict) -> dict:
    return {
        name: {"shape": list(value.shape), "values": value.ravel().tolist()}
        for name, value in arrays.items()
    }


def _unpack(packed: dict) -> dict:
    return {
        name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in packed.items()
    }


# ============================================================
# Save / Load
# ============================================================

def checkpoint_meta(model: DiffusionModel, **extra) -> dict:
    meta = {
        "model": model.kind,
        "arch": asdict(model.arch),
        "param_counts": model.param_counts(),
        "step_count": model.params.step_count,
    }
    meta.update(extra)
    return meta


def save_checkpoint(path: Path, model: DiffusionModel, meta: dict, rng: Optional[dict] = None,
                    with_optimizer: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    store = model.params
    payload = {"meta": meta, "params": _pack(store.entries)}
    if with_optimizer:
        payload["optimizer"] = {
            "step_count": store.step_count,
            "adam_m": _pack(store.adam_m),
            "adam_v": _pack(store.adam_v),
        }
    if rng:
        payload["rng"] = rng
    path.write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")))
    logger.info("[CKPT] Saved %s (step %d)", path, store.step_count)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        payload = json.loads(path.read_text())
        meta = payload["meta"]
        if meta["model"] not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {meta['model']!r}")
        arch = Architecture(**meta["arch"])
        params = _unpack(payload["params"])
    except (ValueError, KeyError, TypeError) as e:
        raise DataError(f"corrupt checkpoint {path}: {e}")

    store = ParamStore()
    for name, value in params.items():
        store.add(name, value)

    optimizer = payload.get("optimizer")
    if optimizer is not None:
        try:
            store.adam_m.update(_unpack(optimizer["adam_m"]))
            store.adam_v.update(_unpack(optimizer["adam_v"]))
            store.step_count = int(optimizer["step_count"])
        except (ValueError, KeyError, TypeError) as e:
            raise DataError(f"corrupt optimizer state in {path}: {e}")
    else:
        store.step_count = int(meta.get("step_count", 0))

    model = DiffusionModel(arch=arch, params=store, kind=meta["model"])
    return Checkpoint(model=model, meta=meta, rng=payload.get("rng", {}),
                      has_optimizer=optimizer is not None)


# ============================================================
# Registry
# ============================================================

def get_registry(run_dir: Path) -> list:
    path = Path(run_dir) / REGISTRY_FILE
    if not path.exists():
        return []
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError:
        return []
    return data if isinstance(data, list) else [data]


def register_checkpoint(run_dir: Path, checkpoint_path: Path, meta: dict) -> dict:
    run_dir = Path(run_dir)
    entry = {
        "checkpoint": str(Path(checkpoint_path)),
        "tag": meta.get("tag", "final"),
        "model": meta.get("model"),
        "step_count": meta.get("step_count", 0),
        "loss": meta.get("loss"),
        "parent": meta.get("parent"),
        "config_hash": meta.get("config_hash"),
    }
    registry = [e for e in get_registry(run_dir) if e.get("checkpoint") != entry["checkpoint"]]
    registry.append(entry)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / REGISTRY_FILE).write_text(json.dumps(registry, indent=2, sort_keys=True) + "\n")
    logger.info("[CKPT] Registered %s (parent: %s)", entry["checkpoint"], entry["parent"] or "none")
    return entry


def get_entry(run_dir: Path, tag: str) -> Optional[dict]:
    """Most recently registered entry with the given tag ('final' or 'best')."""
    for entry in reversed(get_registry(run_dir)):
        if entry.get("tag") == tag:
            return entry
    return None


def read_meta(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text())["meta"]
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot read checkpoint meta from {path}: {e}")


def build_lineage(checkpoint_path: Path) -> list:
    """Checkpoint paths from the oldest ancestor down to checkpoint_path."""
    lineage = [str(checkpoint_path)]
    current = Path(checkpoint_path)
    for _ in range(MAX_LINEAGE):
        parent = read_meta(current).get("parent")
        if not parent or parent in lineage:
            break
        lineage.append(parent)
        current = Path(parent)
    return list(reversed(lineage))
