# vadd_lab/sampler.py

"""
Ancestral Sampling

- start from the all-masked sequence at t=1
- walk the grid t_T=1 > ... > t_0=0, one reverse transition per step
- VADD draws a fresh z ~ N(0, I) per step (or one per trajectory when
  shared_latent is on); the baseline uses the z-free denoiser
- generate_samples splits the request into fixed-size chunks, each with
  its own derived random streams, so output does not depend on threads
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from vadd_lab.errors import NumericalError, UsageError
from vadd_lab.masking import SCHEDULE, mask_id
from vadd_lab.models import DiffusionModel, denoise_probs
from vadd_lab.rng import RandomStreams

logger = logging.getLogger(__name__)


@dataclass
class TimeGrid:
    T: int
    times: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.T < 1:
            raise UsageError(f"sampling needs T >= 1, got {self.T}")
        self.times = np.arange(self.T + 1, dtype=np.float64) / self.T

    def backward_pairs(self):
        """(s, t) pairs from the top of the grid down: (t_{T-1}, t_T), ..., (t_0, t_1)."""
        for i in range(self.T, 0, -1):
            yield float(self.times[i - 1]), float(self.times[i])


# ============================================================
# Single Reverse Transition
# ============================================================

def categorical_inverse_cdf(probs, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of `probs` (..., K) by inverting the float64 CDF."""
    probs = np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1]) * cdf[..., -1]
    index = np.sum(u[..., None] >= cdf, axis=-1)
    # u can reach the total through rounding; clamp to the last category with mass
    last = probs.shape[-1] - 1 - np.argmax(probs[..., ::-1] > 0.0, axis=-1)
    return np.minimum(index, last)


def transition_step(xt, s: float, t: float, mu, rng: np.random.Generator,
                    vocab_size: int) -> np.ndarray:
    """
    x_s ~ p(x_s | x_t): unmasked tokens are copied; a masked token becomes a
    draw from mu with probability (alpha_s - alpha_t) / (1 - alpha_t).

    Draw order per call: one unmask uniform per position, then one
    categorical uniform per position.
    """
    if not s < t:
        raise UsageError(f"transition needs s < t, got s={s}, t={t}")
    xt = np.asarray(xt, dtype=np.int64)
    mu = np.asarray(mu, dtype=np.float64)
    mask = mask_id(vocab_size)

    alpha_s = float(SCHEDULE.alpha(s))
    alpha_t = float(SCHEDULE.alpha(t))
    unmask_prob = (alpha_s - alpha_t) / (1.0 - alpha_t)

    u = rng.random(xt.shape)
    draws = categorical_inverse_cdf(mu[..., :vocab_size], rng)

    unmask = (xt == mask) & (u < unmask_prob)
    return np.where(unmask, draws, xt)


def check_monotone_unmasking(before, after, vocab_size: int):
    mask = mask_id(vocab_size)
    before = np.asarray(before)
    after = np.asarray(after)
    kept = before != mask
    if np.any(after[kept] != before[kept]):
        raise NumericalError("reverse step changed or re-masked an unmasked token")


# ============================================================
# Trajectories
# ============================================================

def _initial_state(model: DiffusionModel, n: int) -> np.ndarray:
    arch = model.arch
    return np.full((n, arch.seq_len), mask_id(arch.vocab_size), dtype=np.int64)


def vadd_ancestral(model: DiffusionModel, T: int, n: int, streams: RandomStreams,
                   shared_latent: bool = False) -> np.ndarray:
    if not model.has_latent:
        raise UsageError("vadd_ancestral needs a model with a latent pathway")
    arch = model.arch
    grid = TimeGrid(T)
    xt = _initial_state(model, n)

    z = streams.latent.standard_normal((n, arch.latent_dim)) if shared_latent else None
    for s, t in grid.backward_pairs():
        step_z = z if shared_latent else streams.latent.standard_normal((n, arch.latent_dim))
        mu = denoise_probs(model, xt, step_z, t)
        x_next = transition_step(xt, s, t, mu, streams.categorical, arch.vocab_size)
        check_monotone_unmasking(xt, x_next, arch.vocab_size)
        xt = x_next
    return xt


def mdlm_ancestral(model: DiffusionModel, T: int, n: int, streams: RandomStreams) -> np.ndarray:
    arch = model.arch
    grid = TimeGrid(T)
    xt = _initial_state(model, n)

    for s, t in grid.backward_pairs():
        mu = denoise_probs(model, xt, None, t)
        x_next = transition_step(xt, s, t, mu, streams.categorical, arch.vocab_size)
        check_monotone_unmasking(xt, x_next, arch.vocab_size)
        xt = x_next
    return xt


def ancestral(model: DiffusionModel, T: int, n: int, streams: RandomStreams,
              shared_latent: bool = False) -> np.ndarray:
    if model.has_latent:
        return vadd_ancestral(model, T, n, streams, shared_latent)
    return mdlm_ancestral(model, T, n, streams)


# ============================================================
# Chunked Generation
# ============================================================

def generate_samples(model: DiffusionModel, T: int, n_samples: int, seed: int,
                     chunk_size: int = 1024, threads: int = 1,
                     shared_latent: bool = False, progress: bool = False) -> np.ndarray:
    """
    n_samples sequences from T-step ancestral sampling.

    Chunk j draws from RandomStreams(seed).derive(T, j); chunk boundaries
    depend only on chunk_size, never on the thread count.
    """
    if n_samples < 1:
        raise UsageError("n_samples must be >= 1")
    TimeGrid(T)
    base = RandomStreams(seed)
    n_chunks = math.ceil(n_samples / chunk_size)
    sizes = [min(chunk_size, n_samples - j * chunk_size) for j in range(n_chunks)]

    def run_chunk(j):
        return ancestral(model, T, sizes[j], base.derive(T, j), shared_latent)

    logger.info("[SAMPLE] %s T=%d n=%d chunks=%d threads=%d",
                model.kind, T, n_samples, n_chunks, threads)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        chunks = list(tqdm(pool.map(run_chunk, range(n_chunks)), total=n_chunks,
                           desc=f"Sampling T={T}", disable=not progress))

    return np.concatenate(chunks, axis=0)
