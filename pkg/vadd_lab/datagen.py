# vadd_lab/datagen.py

"""
Toy 2-D Densities

- checkerboard: uniform over the on-cells of a board (2x2 by default)
- swissroll: scikit-learn's spiral, (x, z) coordinates, noise 0.2
- circles: two concentric circles (radius 1 and factor 0.5), noise 0.02

Points are rescaled into [0, 1) with a fixed per-dataset box and then
discretized with bin width 0.01 into V = 100 classes per coordinate.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.datasets import make_swiss_roll

from vadd_lab.errors import DataError, UsageError
from vadd_lab.rng import RandomStreams
from vadd_lab.schemas import DATASET_NAMES, DataManifest, DatasetConfig

logger = logging.getLogger(__name__)

BIN_WIDTH = 0.01
UPPER = 1.0 - 1e-9

SWISSROLL_NOISE = 0.2
CIRCLES_NOISE = 0.02
CIRCLES_FACTOR = 0.5

_SWISS_HALF = 4.5 * math.pi + 0.8
RAW_BOUNDS = {
    "checkerboard": (0.0, 1.0),
    "swissroll": (-_SWISS_HALF, _SWISS_HALF),
    "circles": (-1.08, 1.08),
}


@dataclass
class Dataset:
    name: str
    points: np.ndarray
    tokens: np.ndarray
    seed: int
    pool: str = "train"
    board_size: int = 2

    @property
    def n(self) -> int:
        return int(self.points.shape[0])


def _check_n(n: int):
    if n < 1:
        raise UsageError(f"need n >= 1 points, got {n}")


# ============================================================
# Raw Generators
# ============================================================

def checkerboard_on_cells(board_size: int = 2) -> np.ndarray:
    """(col, row) of every on-cell; (0, 0) is the lower-left cell."""
    return np.array(
        [(i, j) for j in range(board_size) for i in range(board_size) if (i + j) % 2 == 0],
        dtype=np.int64,
    )


def gen_checkerboard(n: int, rng: np.random.Generator, board_size: int = 2) -> np.ndarray:
    _check_n(n)
    cells = checkerboard_on_cells(board_size)
    pick = rng.integers(0, len(cells), size=n)
    offsets = rng.random((n, 2))
    return (cells[pick] + offsets) / board_size


def gen_swissroll_raw(n: int, rng: np.random.Generator, noise: float = SWISSROLL_NOISE) -> np.ndarray:
    """(r cos r, r sin r) + noise with r = 1.5 pi (1 + 2u)."""
    _check_n(n)
    seed = int(rng.integers(0, 2 ** 31 - 1))
    X, _ = make_swiss_roll(n_samples=n, noise=noise, random_state=seed)
    return X[:, [0, 2]].astype(np.float64)


def gen_circles_raw(n: int, rng: np.random.Generator, noise: float = CIRCLES_NOISE,
                    factor: float = CIRCLES_FACTOR) -> np.ndarray:
    _check_n(n)
    inner = rng.random(n) < 0.5
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    radius = np.where(inner, factor, 1.0)
    points = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    return points + rng.normal(0.0, noise, size=(n, 2))


def rescale(raw, name: str) -> np.ndarray:
    if name not in RAW_BOUNDS:
        raise UsageError(f"unknown dataset '{name}'")
    lo, hi = RAW_BOUNDS[name]
    return np.clip((np.asarray(raw, dtype=np.float64) - lo) / (hi - lo), 0.0, UPPER)


def gen_swissroll(n: int, rng: np.random.Generator) -> np.ndarray:
    return rescale(gen_swissroll_raw(n, rng), "swissroll")


def gen_circles(n: int, rng: np.random.Generator) -> np.ndarray:
    return rescale(gen_circles_raw(n, rng), "circles")


def generate_points(name: str, n: int, rng: np.random.Generator, board_size: int = 2) -> np.ndarray:
    if name == "checkerboard":
        return gen_checkerboard(n, rng, board_size)
    if name == "swissroll":
        return gen_swissroll(n, rng)
    if name == "circles":
        return gen_circles(n, rng)
    raise UsageError(f"unknown dataset '{name}' (choose from {', '.join(DATASET_NAMES)})")


# ============================================================
# Discretization
# ============================================================

def discretize(points, bin_width: float = BIN_WIDTH) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.size and (points.min() < 0.0 or points.max() >= 1.0):
        raise UsageError("discretize expects coordinates in [0, 1)")
    n_bins = int(round(1.0 / bin_width))
    return np.minimum(np.floor(points / bin_width).astype(np.int64), n_bins - 1)


def make_dataset(cfg: DatasetConfig, streams: RandomStreams, pool: str = "train") -> Dataset:
    """Train pool from the data stream, ground-truth pool from the truth stream."""
    if pool == "train":
        rng, n = streams.data, cfg.n
    elif pool == "truth":
        rng, n = streams.truth, cfg.truth_n
    else:
        raise UsageError(f"unknown pool '{pool}'")

    points = generate_points(cfg.name, n, rng, cfg.board_size)
    tokens = discretize(points)
    logger.info("[DATA] %s/%s: %d points", cfg.name, pool, n)
    return Dataset(cfg.name, points, tokens, streams.seed, pool, cfg.board_size)


# ============================================================
# Files
# ============================================================

def write_dataset(dataset: Dataset, directory: Path, cfg_hash: str) -> DataManifest:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savetxt(directory / "points.csv", dataset.points, fmt="%.17g", delimiter=",")
    np.savetxt(directory / "tokens.csv", dataset.tokens, fmt="%d", delimiter=",")

    manifest = DataManifest(
        name=dataset.name,
        n=dataset.n,
        seed=dataset.seed,
        pool=dataset.pool,
        bounds=list(RAW_BOUNDS[dataset.name]),
        bin_width=BIN_WIDTH,
        board_size=dataset.board_size,
        config_hash=cfg_hash,
    )
    (directory / "manifest.json").write_text(json.dumps(manifest.model_dump(), indent=2))
    logger.info("[DATA] Wrote %d rows to %s", dataset.n, directory)
    return manifest


def load_manifest(directory: Path) -> DataManifest:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise DataError(f"dataset manifest not found: {path} (run gen-data first)")
    try:
        return DataManifest.model_validate_json(path.read_text())
    except ValueError as e:
        raise DataError(f"corrupt manifest {path}: {e}")


def load_tokens(directory: Path, vocab_size: Optional[int] = 100) -> np.ndarray:
    path = Path(directory) / "tokens.csv"
    if not path.exists():
        raise DataError(f"token file not found: {path} (run gen-data first)")
    try:
        tokens = np.loadtxt(path, delimiter=",", dtype=np.int64, ndmin=2)
    except ValueError as e:
        raise DataError(f"corrupt token file {path}: {e}")
    if vocab_size is not None and tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise DataError(f"{path} holds tokens outside [0, {vocab_size - 1}]")
    return tokens
