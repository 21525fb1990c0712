# vadd_lab/models.py

"""
Denoising and Recognition Networks

Denoiser mu_theta(x_t, z, t):
- emb(t): sinusoidal features -> MLP [1024, 512, 512]
- emb(z): MLP [d, 512]            (absent in the z-free baseline)
- emb(x): sum of position-specific token rows, width 512
- readout MLP [512 x5, V] applied per position to
  emb(t) + emb(z) + emb(x) + position query

Recognizer r_phi(z | x_0, x_t):
- Siamese trunk MLP [512 x6] on emb(t)+emb(x_0) and emb(t)+emb(x_t)
- head MLP [512, 512, 2d] on the branch average -> (mean, log-std)

All MLPs use ELU between layers and nothing after the last one.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from vadd_lab.diffgraph import Graph, ParamStore
from vadd_lab.errors import UsageError
from vadd_lab.masking import validate_tokens
from vadd_lab.schemas import ModelConfig

logger = logging.getLogger(__name__)

MODEL_KINDS = ("vadd", "mdlm")


@dataclass(frozen=True)
class Architecture:
    vocab_size: int = 100
    seq_len: int = 2
    latent_dim: int = 2
    width: int = 512
    time_features: int = 1024
    readout_depth: int = 5
    trunk_depth: int = 5
    logstd_clamp: float = 7.0
    embed_init_std: float = 0.02

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "Architecture":
        return cls(
            vocab_size=cfg.vocab_size,
            seq_len=cfg.seq_len,
            latent_dim=cfg.latent_dim,
            width=cfg.width,
            time_features=cfg.time_features,
            readout_depth=cfg.readout_depth,
            trunk_depth=cfg.trunk_depth,
            logstd_clamp=cfg.logstd_clamp,
            embed_init_std=cfg.embed_init_std,
        )

    @property
    def time_widths(self):
        return [self.time_features, self.width, self.width]

    @property
    def z_widths(self):
        return [self.latent_dim, self.width]

    @property
    def readout_widths(self):
        return [self.width] * self.readout_depth + [self.vocab_size]

    @property
    def trunk_widths(self):
        return [self.width] * (self.trunk_depth + 1)

    @property
    def head_widths(self):
        return [self.width, self.width, 2 * self.latent_dim]


@dataclass
class GaussianPosterior:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class DiffusionModel:
    """Parameters plus the architecture they were built for."""

    arch: Architecture
    params: ParamStore
    kind: str = "vadd"

    @property
    def has_latent(self) -> bool:
        return self.kind == "vadd"

    def param_counts(self) -> dict:
        counts = {"denoiser": self.params.num_parameters("den.")}
        if self.has_latent:
            counts["recognizer"] = self.params.num_parameters("rec.")
        return counts


# ============================================================
# Initialization
# ============================================================

def _init_mlp(store, prefix, widths, rng):
    for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        store.add(f"{prefix}.{k}.W", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        store.add(f"{prefix}.{k}.b", rng.uniform(-bound, bound, size=fan_out))


def init_denoiser(store: ParamStore, arch: Architecture, rng, with_latent: bool = True):
    rows = arch.seq_len * (arch.vocab_size + 1)
    store.add("den.tok", rng.normal(0.0, arch.embed_init_std, size=(rows, arch.width)))
    store.add("den.pos", rng.normal(0.0, arch.embed_init_std, size=(arch.seq_len, arch.width)))
    _init_mlp(store, "den.time", arch.time_widths, rng)
    if with_latent:
        _init_mlp(store, "den.z", arch.z_widths, rng)
    _init_mlp(store, "den.out", arch.readout_widths, rng)


def init_recognizer(store: ParamStore, arch: Architecture, rng):
    rows = arch.seq_len * (arch.vocab_size + 1)
    store.add("rec.tok", rng.normal(0.0, arch.embed_init_std, size=(rows, arch.width)))
    _init_mlp(store, "rec.time", arch.time_widths, rng)
    _init_mlp(store, "rec.trunk", arch.trunk_widths, rng)
    _init_mlp(store, "rec.head", arch.head_widths, rng)


def build_model(arch: Architecture, kind: str, rng: np.random.Generator) -> DiffusionModel:
    if kind not in MODEL_KINDS:
        raise UsageError(f"unknown model kind '{kind}' (choose from {', '.join(MODEL_KINDS)})")
    store = ParamStore()
    init_denoiser(store, arch, rng, with_latent=(kind == "vadd"))
    if kind == "vadd":
        init_recognizer(store, arch, rng)
    model = DiffusionModel(arch=arch, params=store, kind=kind)
    logger.info("[MODEL] Built %s: %s", kind, model.param_counts())
    return model


# ============================================================
# Building Blocks
# ============================================================

def mlp(g: Graph, x: int, prefix: str, n_layers: int) -> int:
    for k in range(n_layers):
        x = g.linear(x, g.param(f"{prefix}.{k}.W"), g.param(f"{prefix}.{k}.b"))
        if k < n_layers - 1:
            x = g.elu(x)
    return x


def sinusoidal_features(t, n_features: int = 1024) -> np.ndarray:
    """[sin(w_k * 1000 t) for k] ++ [cos(w_k * 1000 t) for k], w_k = 10000^(-k/half)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = n_features // 2
    omega = 10000.0 ** (-np.arange(half) / half)
    angle = 1000.0 * t[:, None] * omega[None, :]
    return np.concatenate([np.sin(angle), np.cos(angle)], axis=1)


def time_embed(g: Graph, t, arch: Architecture, prefix: str) -> int:
    features = g.constant(sinusoidal_features(t, arch.time_features))
    return mlp(g, features, f"{prefix}.time", len(arch.time_widths) - 1)


def _position_offsets(arch: Architecture) -> np.ndarray:
    return np.arange(arch.seq_len, dtype=np.int64) * (arch.vocab_size + 1)


def sequence_embed(g: Graph, tokens, arch: Architecture, prefix: str) -> int:
    tokens = np.atleast_2d(tokens)
    return g.embed_sum(g.param(f"{prefix}.tok"), tokens + _position_offsets(arch))


# ============================================================
# Denoiser
# ============================================================

def denoise(g: Graph, xt, z: Optional[int], t, arch: Architecture) -> int:
    """
    Log-probability rows log mu, shape (B*N, V+1); row b*N+i is position i
    of sequence b. The mask column is pinned to probability 0.
    """
    xt = validate_tokens(np.atleast_2d(xt), arch.vocab_size)
    batch = xt.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))

    h = g.add(time_embed(g, t, arch, "den"), sequence_embed(g, xt, arch, "den"))
    if z is not None:
        h = g.add(h, mlp(g, z, "den.z", len(arch.z_widths) - 1))

    rows = g.repeat_rows(h, arch.seq_len)
    positions = np.tile(np.arange(arch.seq_len), batch)[:, None]
    rows = g.add(rows, g.embed_sum(g.param("den.pos"), positions))

    logits = mlp(g, rows, "den.out", len(arch.readout_widths) - 1)
    logits = g.append_column(logits, 0.0)
    return g.log_softmax_rows(logits, excluded=arch.vocab_size)


def denoise_probs(model: DiffusionModel, xt, z, t) -> np.ndarray:
    """Forward-only mu as an array of shape (B, N, V+1)."""
    g = Graph(model.params)
    z_node = g.constant(np.atleast_2d(z)) if (model.has_latent and z is not None) else None
    log_mu = denoise(g, xt, z_node, t, model.arch)
    batch = np.atleast_2d(xt).shape[0]
    return np.exp(g.value(log_mu)).reshape(batch, model.arch.seq_len, model.arch.vocab_size + 1)


# ============================================================
# Recognizer
# ============================================================

def siamese_branches(g: Graph, a, b, t, arch: Architecture) -> tuple:
    """Shared trunk on emb(t)+emb(a) and emb(t)+emb(b)."""
    temb = time_embed(g, t, arch, "rec")
    depth = len(arch.trunk_widths) - 1
    out_a = mlp(g, g.add(temb, sequence_embed(g, a, arch, "rec")), "rec.trunk", depth)
    out_b = mlp(g, g.add(temb, sequence_embed(g, b, arch, "rec")), "rec.trunk", depth)
    return out_a, out_b


def recognizer_head(g: Graph, out_a: int, out_b: int, arch: Architecture) -> tuple:
    """Returns (mean, std, clamped log-std) nodes, each (B, d)."""
    avg = g.scale(g.add(out_a, out_b), 0.5)
    head = mlp(g, avg, "rec.head", len(arch.head_widths) - 1)
    d = arch.latent_dim
    mean = g.columns(head, 0, d)
    logstd = g.clamp(g.columns(head, d, 2 * d), -arch.logstd_clamp, arch.logstd_clamp)
    return mean, g.exp(logstd), logstd


def recognize(g: Graph, x0, xt, t, arch: Architecture) -> tuple:
    x0 = validate_tokens(np.atleast_2d(x0), arch.vocab_size, allow_mask=False)
    xt = validate_tokens(np.atleast_2d(xt), arch.vocab_size)
    if x0.shape != xt.shape:
        raise UsageError(f"recognize needs x0 and xt of equal shape, got {x0.shape} and {xt.shape}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x0.shape[0],))
    out_0, out_t = siamese_branches(g, x0, xt, t, arch)
    return recognizer_head(g, out_0, out_t, arch)


def recognize_posterior(model: DiffusionModel, x0, xt, t) -> GaussianPosterior:
    g = Graph(model.params)
    mean, std, _ = recognize(g, x0, xt, t, model.arch)
    return GaussianPosterior(mean=g.value(mean).copy(), std=g.value(std).copy())


# ============================================================
# Latent Sampling
# ============================================================

def sample_latent(post: GaussianPosterior, rng: np.random.Generator) -> tuple:
    eps = rng.standard_normal(np.shape(post.mean))
    return post.mean + post.std * eps, eps


def reparameterize(g: Graph, mean: int, std: int, eps) -> int:
    """z = mean + std * eps with eps held constant, so gradients reach mean/std."""
    return g.add(mean, g.mul(std, g.constant(eps)))
