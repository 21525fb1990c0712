# vadd_lab/objective.py

"""
Training and Evaluation Objectives

- masked log-likelihood log p(x_0 | x_t, z) over masked positions
- closed-form Gaussian KL to the standard-normal prior
- KL-annealed DELBO term (VADD) and the weighted ELBO term (z-free baseline)
- Monte Carlo batch loss for one optimizer step
- K-sample DELBO likelihood estimator with shared-prefix K curves

Sign convention: *_terms return lower-bound contributions (bigger is
better); batch_loss returns their negated batch mean, which is minimized.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from vadd_lab.diffgraph import Graph
from vadd_lab.errors import UsageError
from vadd_lab.masking import (
    DEFAULT_T_MIN,
    forward_mask,
    loss_weight,
    mask_id,
    sample_times,
    validate_tokens,
)
from vadd_lab.models import (
    DiffusionModel,
    GaussianPosterior,
    denoise,
    recognize,
    reparameterize,
    sample_latent,
)
from vadd_lab.rng import RandomStreams

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LossBreakdown:
    """Weighted pieces of one DELBO contribution: total = recon - lam * kl."""

    recon: float
    kl: float
    lam: float
    total: float
    t: float
    n_masked: int
    kl_raw: float = 0.0

    def as_row(self) -> dict:
        return {
            "lambda": self.lam,
            "recon": self.recon,
            "kl": self.kl,
            "kl_raw": self.kl_raw,
            "t": self.t,
            "n_masked": self.n_masked,
        }


@dataclass(frozen=True)
class AnnealSchedule:
    total_anneal_steps: int


def kl_anneal_weight(h: int, anneal: AnnealSchedule) -> float:
    if h < 0:
        raise UsageError("anneal step must be nonnegative")
    if anneal.total_anneal_steps <= 0:
        return 1.0
    return min(1.0, h / anneal.total_anneal_steps)


# ============================================================
# Likelihood + KL Pieces
# ============================================================

def masked_log_likelihood(g: Graph, x0, xt, log_mu: int, vocab_size: int) -> int:
    """Per-sequence sum of log mu[i, x0_i] over masked positions, shape (B,)."""
    x0 = np.atleast_2d(validate_tokens(x0, vocab_size, allow_mask=False))
    xt = np.atleast_2d(validate_tokens(xt, vocab_size))
    if x0.shape != xt.shape:
        raise UsageError(f"x0 {x0.shape} and xt {xt.shape} differ in shape")
    masked = xt == mask_id(vocab_size)
    if np.any(~masked & (xt != x0)):
        raise UsageError("xt disagrees with x0 at an unmasked position")

    batch, seq_len = x0.shape
    return g.pick(
        log_mu,
        cols=x0.ravel(),
        weights=masked.ravel().astype(np.float64),
        groups=np.repeat(np.arange(batch), seq_len),
        n_groups=batch,
    )


def gauss_kl(g: Graph, mean: int, std: int, logstd: int) -> int:
    """sum_j 0.5 * (m_j^2 + s_j^2 - 1 - 2 log s_j), shape (B,)."""
    inner = g.add(g.square(mean), g.square(std))
    inner = g.sub(g.add_scalar(inner, -1.0), g.scale(logstd, 2.0))
    return g.scale(g.row_sum(inner), 0.5)


def gauss_kl_value(mean, std) -> np.ndarray:
    mean, std = np.atleast_2d(mean), np.atleast_2d(std)
    return 0.5 * np.sum(mean ** 2 + std ** 2 - 1.0 - 2.0 * np.log(std), axis=1)


def log_standard_normal(z) -> np.ndarray:
    z = np.atleast_2d(z)
    return -0.5 * np.sum(z ** 2, axis=1) - 0.5 * z.shape[1] * LOG_2PI


def log_diag_gaussian(z, mean, std) -> np.ndarray:
    z, mean, std = np.atleast_2d(z), np.atleast_2d(mean), np.atleast_2d(std)
    eps = (z - mean) / std
    return -0.5 * np.sum(eps ** 2, axis=1) - np.sum(np.log(std), axis=1) - 0.5 * z.shape[1] * LOG_2PI


# ============================================================
# Per-element Terms
# ============================================================

def delbo_terms(g: Graph, model: DiffusionModel, x0, t, streams: RandomStreams,
                lam: float, t_min: float = DEFAULT_T_MIN, xt=None, eps=None):
    """
    weight(t) * [log p(x0 | xt, z) - lam * KL(r || p)] for each row of x0.

    xt and eps are drawn from the mask / latent streams unless given.
    Returns (node of shape (B,), dict of per-row numpy pieces).
    """
    arch = model.arch
    x0 = np.atleast_2d(x0)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x0.shape[0],)).copy()
    if xt is None:
        xt = forward_mask(x0, t, streams.mask, arch.vocab_size)

    mean, std, logstd = recognize(g, x0, xt, t, arch)
    if eps is None:
        posterior = GaussianPosterior(mean=g.value(mean), std=g.value(std))
        _, eps = sample_latent(posterior, streams.latent)
    z = reparameterize(g, mean, std, eps)
    log_mu = denoise(g, xt, z, t, arch)
    ll = masked_log_likelihood(g, x0, xt, log_mu, arch.vocab_size)
    kl = gauss_kl(g, mean, std, logstd)

    weight = np.asarray(loss_weight(t, t_min), dtype=np.float64).reshape(-1)
    term = g.mul(g.sub(ll, g.scale(kl, lam)), g.constant(weight))
    pieces = {
        "recon": weight * g.value(ll),
        "kl": weight * g.value(kl),
        "kl_raw": g.value(kl).copy(),
        "t": t,
        "n_masked": (xt == mask_id(arch.vocab_size)).sum(axis=1),
        "xt": xt,
    }
    return term, pieces


def elbo_terms_mdlm(g: Graph, model: DiffusionModel, x0, t, streams: RandomStreams,
                    t_min: float = DEFAULT_T_MIN, xt=None):
    """weight(t) * log p(x0 | xt) for the z-free denoiser."""
    arch = model.arch
    x0 = np.atleast_2d(x0)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x0.shape[0],)).copy()
    if xt is None:
        xt = forward_mask(x0, t, streams.mask, arch.vocab_size)

    log_mu = denoise(g, xt, None, t, arch)
    ll = masked_log_likelihood(g, x0, xt, log_mu, arch.vocab_size)
    weight = np.asarray(loss_weight(t, t_min), dtype=np.float64).reshape(-1)
    term = g.mul(ll, g.constant(weight))
    pieces = {
        "recon": weight * g.value(ll),
        "kl": np.zeros_like(weight),
        "kl_raw": np.zeros_like(weight),
        "t": t,
        "n_masked": (xt == mask_id(arch.vocab_size)).sum(axis=1),
        "xt": xt,
    }
    return term, pieces


def delbo_term(model: DiffusionModel, x0, t: float, streams: RandomStreams, lam: float,
               t_min: float = DEFAULT_T_MIN):
    """Single-sequence DELBO contribution: (graph, scalar node, LossBreakdown)."""
    if not t_min <= t <= 1.0:
        raise UsageError(f"t must lie in [{t_min}, 1], got {t}")
    g = Graph(model.params)
    terms, pieces = delbo_terms(g, model, np.atleast_2d(x0), t, streams, lam, t_min)
    node = g.sum_all(terms)
    breakdown = LossBreakdown(
        recon=float(pieces["recon"][0]),
        kl=float(pieces["kl"][0]),
        lam=float(lam),
        total=float(g.value(node)),
        t=float(t),
        n_masked=int(pieces["n_masked"][0]),
        kl_raw=float(pieces["kl_raw"][0]),
    )
    return g, node, breakdown


def elbo_term_mdlm(model: DiffusionModel, x0, t: float, streams: RandomStreams,
                   t_min: float = DEFAULT_T_MIN):
    g = Graph(model.params)
    terms, _ = elbo_terms_mdlm(g, model, np.atleast_2d(x0), t, streams, t_min)
    return g, g.sum_all(terms)


# ============================================================
# Batch Loss (one optimizer step)
# ============================================================

def batch_loss(model: DiffusionModel, batch, h: int, streams: RandomStreams,
               anneal: AnnealSchedule, t_min: float = DEFAULT_T_MIN):
    """
    -(1/B) * sum_b term_b with fresh t, mask and z draws per element.

    Returns (graph, loss node, LossBreakdown of batch means; n_masked is
    the batch total).
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.int64))
    if batch.shape[0] < 1 or batch.size == 0:
        raise UsageError("batch_loss needs at least one sequence")
    size = batch.shape[0]

    g = Graph(model.params)
    t = sample_times(streams.time, size, t_min)
    if model.has_latent:
        lam = kl_anneal_weight(h, anneal)
        terms, pieces = delbo_terms(g, model, batch, t, streams, lam, t_min)
    else:
        lam = 0.0
        terms, pieces = elbo_terms_mdlm(g, model, batch, t, streams, t_min)

    loss = g.scale(g.sum_all(terms), -1.0 / size)
    breakdown = LossBreakdown(
        recon=float(np.mean(pieces["recon"])),
        kl=float(np.mean(pieces["kl"])),
        lam=float(lam),
        total=float(-g.value(loss)),
        t=float(np.mean(t)),
        n_masked=int(np.sum(pieces["n_masked"])),
        kl_raw=float(np.mean(pieces["kl_raw"])),
    )
    return g, loss, breakdown


# ============================================================
# Likelihood Estimation
# ============================================================

def log_likelihood_given_z(model: DiffusionModel, x0, xt, t: float, z) -> np.ndarray:
    """log p(x0 | xt, z_m, t) for each latent row z_m (forward only)."""
    arch = model.arch
    x0 = np.atleast_2d(x0)
    xt = np.atleast_2d(xt)
    if model.has_latent:
        z = np.atleast_2d(z)
        rows = z.shape[0]
    else:
        rows = 1
    g = Graph(model.params)
    x0_rep = np.repeat(x0, rows, axis=0)
    xt_rep = np.repeat(xt, rows, axis=0)
    z_node = g.constant(z) if model.has_latent else None
    log_mu = denoise(g, xt_rep, z_node, np.full(rows, t), arch)
    ll = masked_log_likelihood(g, x0_rep, xt_rep, log_mu, arch.vocab_size)
    return g.value(ll).copy()


def logmeanexp(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(logsumexp(values) - math.log(values.size))


def importance_log_weights(model: DiffusionModel, x0, xt, t: float, eps) -> np.ndarray:
    """log p(x0|xt,z_k) + log p(z_k) - log r(z_k|x0,xt) with z_k = m + s * eps_k."""
    g = Graph(model.params)
    mean_n, std_n, _ = recognize(g, x0, xt, t, model.arch)
    mean, std = g.value(mean_n), g.value(std_n)
    z = mean + std * np.atleast_2d(eps)
    ll = log_likelihood_given_z(model, x0, xt, t, z)
    return ll + log_standard_normal(z) - log_diag_gaussian(z, mean, std)


def k_sample_delbo_curve(model: DiffusionModel, x0, Ks, n_time_pairs: int,
                         streams: RandomStreams, t_min: float = DEFAULT_T_MIN) -> dict:
    """
    K-sample DELBO for every K in Ks from one set of draws: the estimate for
    K uses the first K latent samples of each (x_t, t) pair.
    """
    Ks = sorted({int(k) for k in Ks})
    if Ks[0] < 1 or n_time_pairs < 1:
        raise UsageError("K and n_time_pairs must be >= 1")
    arch = model.arch
    x0 = np.atleast_2d(validate_tokens(x0, arch.vocab_size, allow_mask=False))
    k_max = Ks[-1]

    totals = {k: 0.0 for k in Ks}
    for _ in range(n_time_pairs):
        t = float(sample_times(streams.time, 1, t_min)[0])
        xt = forward_mask(x0, t, streams.mask, arch.vocab_size)
        weight = loss_weight(t, t_min)
        if model.has_latent:
            eps = streams.latent.standard_normal((k_max, arch.latent_dim))
            log_w = importance_log_weights(model, x0, xt, t, eps)
            for k in Ks:
                totals[k] += weight * logmeanexp(log_w[:k])
        else:
            ll = float(log_likelihood_given_z(model, x0, xt, t, None)[0])
            for k in Ks:
                totals[k] += weight * ll

    return {k: totals[k] / n_time_pairs for k in Ks}


def k_sample_delbo(model: DiffusionModel, x0, K: int, n_time_pairs: int,
                   streams: RandomStreams, t_min: float = DEFAULT_T_MIN) -> float:
    return k_sample_delbo_curve(model, x0, [K], n_time_pairs, streams, t_min)[int(K)]
