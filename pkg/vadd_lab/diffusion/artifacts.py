# vadd_lab/diffusion/artifacts.py

"""
Run Artifacts

- samples.csv: one row of token indices per sequence
- counts.csv: raw 100x100 histogram counts (row = first coordinate)
- heatmap.ppm: binary P6 image, linear grayscale, max count = white,
  second coordinate increasing upwards
- JSON files with sorted keys so reruns are byte-identical
"""

import json
from pathlib import Path

import numpy as np

from vadd_lab.evaluation import Histogram2D


def write_json(path: Path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def write_samples_csv(path: Path, tokens) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.atleast_2d(tokens), fmt="%d", delimiter=",")
    return path


def write_counts_csv(path: Path, hist: Histogram2D) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, hist.counts, fmt="%d", delimiter=",")
    return path


def heatmap_pixels(hist: Histogram2D) -> np.ndarray:
    counts = hist.counts.astype(np.float64)
    peak = counts.max()
    gray = np.zeros_like(counts) if peak <= 0 else np.rint(255.0 * counts / peak)
    # image rows run top-down, so flip the second coordinate
    return gray.T[::-1].astype(np.uint8)


def write_ppm(path: Path, hist: Histogram2D) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    gray = heatmap_pixels(hist)
    height, width = gray.shape
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    path.write_bytes(f"P6\n{width} {height}\n255\n".encode("ascii") + rgb.tobytes())
    return path


def read_ppm(path: Path) -> np.ndarray:
    """Gray channel of a P6 file written by write_ppm."""
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise ValueError(f"{path} is not an 8-bit P6 image")
    width, height = (int(v) for v in dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)[:, :, 0]
