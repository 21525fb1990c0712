# vadd_lab/evaluation.py

"""
Metrics and Verification Oracles

Metrics:
- empirical JS divergence between 100x100 sample histograms (nats)
- NLL as the negated K-sample DELBO, averaged over sequences
- per-sample-set statistics (quadrant occupancy, checkerboard on-cell mass)

Oracles:
- Bayes enumeration of the reverse posterior
- Gauss-Hermite integration of p(x0 | xt, z) over the latent prior
- chi-square test of masked counts against Binomial(N, 1 - alpha_t)
"""

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import logsumexp, rel_entr

from vadd_lab.datagen import checkerboard_on_cells
from vadd_lab.errors import UsageError
from vadd_lab.masking import DEFAULT_T_MIN, SCHEDULE, forward_mask, mask_id
from vadd_lab.models import DiffusionModel
from vadd_lab.objective import k_sample_delbo_curve, log_likelihood_given_z
from vadd_lab.rng import RandomStreams

logger = logging.getLogger(__name__)

MAX_QUADRATURE_DIM = 3
MIN_EXPECTED_COUNT = 5.0


# ============================================================
# Histograms + JS
# ============================================================

@dataclass
class Histogram2D:
    counts: np.ndarray

    @classmethod
    def from_tokens(cls, tokens, vocab_size: int = 100) -> "Histogram2D":
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        if tokens.shape[1] != 2:
            raise UsageError(f"2-D histogram needs sequences of length 2, got {tokens.shape[1]}")
        flat = tokens[:, 0] * vocab_size + tokens[:, 1]
        counts = np.bincount(flat, minlength=vocab_size * vocab_size)
        return cls(counts.reshape(vocab_size, vocab_size).astype(np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def normalized(self) -> np.ndarray:
        if self.total <= 0:
            raise UsageError("histogram is empty")
        return self.counts / self.total


def js_divergence(P: Histogram2D, Q: Histogram2D) -> float:
    """0.5 KL(p || m) + 0.5 KL(q || m) with m = (p + q) / 2, in nats."""
    p = P.normalized().ravel()
    q = Q.normalized().ravel()
    if p.shape != q.shape:
        raise UsageError(f"histogram shapes differ: {P.counts.shape} vs {Q.counts.shape}")
    m = 0.5 * (p + q)
    value = 0.5 * rel_entr(p, m).sum() + 0.5 * rel_entr(q, m).sum()
    return float(min(max(value, 0.0), math.log(2.0)))


# ============================================================
# Sample Statistics
# ============================================================

def quadrant_occupancy(tokens, vocab_size: int = 100) -> dict:
    """Fraction of samples per quadrant, keyed 'q<col><row>' with q00 lower-left."""
    tokens = np.atleast_2d(tokens)
    half = vocab_size // 2
    col = (tokens[:, 0] >= half).astype(int)
    row = (tokens[:, 1] >= half).astype(int)
    n = max(len(tokens), 1)
    return {f"q{i}{j}": float(np.sum((col == i) & (row == j)) / n) for i in (0, 1) for j in (0, 1)}


def on_cell_fraction(tokens, board_size: int = 2, vocab_size: int = 100) -> float:
    tokens = np.atleast_2d(tokens)
    cells = tokens * board_size // vocab_size
    return float(np.mean((cells[:, 0] + cells[:, 1]) % 2 == 0))


def sample_stats(tokens, dataset: str, board_size: int = 2, vocab_size: int = 100,
                 min_mass: float = 0.10) -> dict:
    quadrants = quadrant_occupancy(tokens, vocab_size)
    result = {
        "quadrants": quadrants,
        "quadrants_with_mass": int(sum(v >= min_mass for v in quadrants.values())),
    }
    if dataset == "checkerboard":
        tokens = np.atleast_2d(tokens)
        cells = tokens * board_size // vocab_size
        on = checkerboard_on_cells(board_size)
        mass = [float(np.mean((cells[:, 0] == i) & (cells[:, 1] == j))) for i, j in on]
        per_cell = np.bincount(np.arange(vocab_size) * board_size // vocab_size, minlength=board_size)
        result["on_cell_fraction"] = on_cell_fraction(tokens, board_size, vocab_size)
        result["on_cells"] = len(on)
        result["on_cells_with_mass"] = int(sum(m >= min_mass for m in mass))
        result["support_bins"] = int(sum(per_cell[i] * per_cell[j] for i, j in on))
    return result


# ============================================================
# NLL
# ============================================================

def nll_curve(model: DiffusionModel, tokens, Ks, n_time_pairs: int, seed: int,
              threads: int = 1, t_min: float = DEFAULT_T_MIN) -> dict:
    """
    Mean negated K-sample DELBO for every K in Ks.

    Sequence i draws from RandomStreams(seed).derive(i), and all K share
    one draw set, so the estimates are on nested samples.
    """
    tokens = np.atleast_2d(tokens)
    if len(tokens) == 0:
        raise UsageError("nll needs at least one sequence")
    base = RandomStreams(seed)

    def one(i):
        return k_sample_delbo_curve(model, tokens[i:i + 1], Ks, n_time_pairs, base.derive(i), t_min)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        curves = list(pool.map(one, range(len(tokens))))

    return {k: -math.fsum(c[k] for c in curves) / len(curves) for k in curves[0]}


def nll(model: DiffusionModel, tokens, K: int = 1000, n_time_pairs: int = 100, seed: int = 0,
        threads: int = 1, t_min: float = DEFAULT_T_MIN) -> float:
    value = nll_curve(model, tokens, [K], n_time_pairs, seed, threads, t_min)[int(K)]
    logger.info("[EVAL] NLL (K=%d, %d time pairs, %d sequences) = %.4f",
                K, n_time_pairs, len(np.atleast_2d(tokens)), value)
    return value


# ============================================================
# Gauss-Hermite Latent Integration
# ============================================================

def standard_normal_grid(dim: int, nodes_per_dim: int = 30):
    """Tensor-product nodes and log-weights for E[f(z)], z ~ N(0, I_dim)."""
    if dim > MAX_QUADRATURE_DIM:
        raise UsageError(f"quadrature supports latent dim <= {MAX_QUADRATURE_DIM}, got {dim}")
    knots, weights = np.polynomial.hermite.hermgauss(nodes_per_dim)
    knots = knots * np.sqrt(2.0)
    log_w = np.log(weights / np.sqrt(np.pi))

    nodes = np.array(list(itertools.product(knots, repeat=dim)), dtype=np.float64)
    log_weights = np.array([sum(c) for c in itertools.product(log_w, repeat=dim)], dtype=np.float64)
    return nodes, log_weights


def log_gaussian_expectation(log_f, dim: int, nodes_per_dim: int = 30) -> float:
    """log E[exp(log_f(z))] under N(0, I); log_f maps (M, dim) -> (M,)."""
    nodes, log_weights = standard_normal_grid(dim, nodes_per_dim)
    return float(logsumexp(log_weights + np.asarray(log_f(nodes), dtype=np.float64)))


def quadrature_logp(model: DiffusionModel, x0, xt, t: float, nodes_per_dim: int = 30) -> float:
    """log p(x0 | xt, t) with z integrated out against the standard-normal prior."""
    if not model.has_latent:
        return float(log_likelihood_given_z(model, x0, xt, t, None)[0])
    return log_gaussian_expectation(
        lambda z: log_likelihood_given_z(model, x0, xt, t, z),
        model.arch.latent_dim,
        nodes_per_dim,
    )


# ============================================================
# Forward-process Oracles
# ============================================================

def posterior_oracle(x0_i: int, x_t_i: int, s: float, t: float, vocab_size: int) -> np.ndarray:
    """q(x_s | x_t, x_0) by enumerating x_s and normalizing q(x_t | x_s) q(x_s | x_0)."""
    if not s < t:
        raise UsageError(f"posterior needs s < t, got s={s}, t={t}")
    mask = mask_id(vocab_size)
    alpha_s = float(SCHEDULE.alpha(s))
    alpha_t = float(SCHEDULE.alpha(t))

    joint = np.zeros(vocab_size + 1, dtype=np.float64)
    for k in range(vocab_size + 1):
        if k == mask:
            prior = 1.0 - alpha_s
            forward = 1.0 if x_t_i == mask else 0.0
        else:
            prior = alpha_s if k == x0_i else 0.0
            if x_t_i == mask:
                forward = 1.0 - alpha_t / alpha_s
            else:
                forward = alpha_t / alpha_s if x_t_i == k else 0.0
        joint[k] = forward * prior

    total = joint.sum()
    if total <= 0.0:
        if x_t_i != x0_i:
            raise UsageError(f"x_t={x_t_i} is unreachable from x_0={x0_i}")
        # alpha_t == 0 zeroes every entry, but an unmasked x_t still pins x_s
        joint[x_t_i] = 1.0
        return joint
    return joint / total


def _pool_bins(observed: np.ndarray, expected: np.ndarray):
    pooled_obs, pooled_exp = [], []
    acc_obs = acc_exp = 0.0
    for o, e in zip(observed, expected):
        acc_obs += o
        acc_exp += e
        if acc_exp >= MIN_EXPECTED_COUNT:
            pooled_obs.append(acc_obs)
            pooled_exp.append(acc_exp)
            acc_obs = acc_exp = 0.0
    if acc_exp > 0.0 or acc_obs > 0.0:
        if pooled_exp:
            pooled_obs[-1] += acc_obs
            pooled_exp[-1] += acc_exp
        else:
            pooled_obs.append(acc_obs)
            pooled_exp.append(acc_exp)
    return np.array(pooled_obs), np.array(pooled_exp)


def mask_count_test(t: float, N: int, trials: int, rng: np.random.Generator,
                    vocab_size: int = 100) -> float:
    """p-value of masked-count frequencies against Binomial(N, 1 - alpha_t)."""
    if trials < 1000:
        raise UsageError(f"mask_count_test needs >= 1000 trials, got {trials}")
    mask_prob = 1.0 - float(SCHEDULE.alpha(t))
    x0 = np.zeros((trials, N), dtype=np.int64)
    counts = (forward_mask(x0, t, rng, vocab_size) == mask_id(vocab_size)).sum(axis=1)

    if mask_prob <= 0.0 or mask_prob >= 1.0:
        return 1.0

    observed = np.bincount(counts, minlength=N + 1).astype(np.float64)
    expected = trials * stats.binom.pmf(np.arange(N + 1), N, mask_prob)
    expected *= trials / expected.sum()
    observed, expected = _pool_bins(observed, expected)
    if len(observed) < 2:
        return 1.0
    return float(stats.chisquare(observed, expected).pvalue)
