# vadd_lab/masking.py

"""
Forward Masking Process

- Linear mask schedule alpha(t) = 1 - t and its loss weight
- Forward masking q(x_t | x_0)
- Analytic posterior q(x_s | x_t, x_0)
- Mask indicators

Token sequences are int64 arrays of shape (..., N) with classes
0..V-1; the mask state is the extra index V.
"""

from dataclasses import dataclass

import numpy as np

from vadd_lab.errors import UsageError

DEFAULT_T_MIN = 1e-5


def mask_id(vocab_size: int) -> int:
    return int(vocab_size)


def validate_tokens(tokens, vocab_size: int, allow_mask: bool = True) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    upper = vocab_size if allow_mask else vocab_size - 1
    if tokens.size and (tokens.min() < 0 or tokens.max() > upper):
        raise UsageError(
            f"tokens must lie in [0, {upper}] for V={vocab_size}"
            + ("" if allow_mask else " (mask not allowed)")
        )
    return tokens


# ============================================================
# Schedule
# ============================================================

@dataclass(frozen=True)
class LinearSchedule:
    kind: str = "linear"

    def alpha(self, t):
        return 1.0 - np.asarray(t, dtype=np.float64)

    def alpha_prime(self, t):
        return np.full_like(np.asarray(t, dtype=np.float64), -1.0)

    def weight(self, t):
        """-alpha'(t) / (1 - alpha(t)); equals 1/t here."""
        return -self.alpha_prime(t) / (1.0 - self.alpha(t))


SCHEDULE = LinearSchedule()


def loss_weight(t, t_min: float = DEFAULT_T_MIN):
    weight = 1.0 / np.maximum(np.asarray(t, dtype=np.float64), t_min)
    return float(weight) if np.ndim(weight) == 0 else weight


def sample_times(rng: np.random.Generator, size: int, t_min: float = DEFAULT_T_MIN) -> np.ndarray:
    """t ~ Uniform(t_min, 1), one per batch element."""
    return t_min + (1.0 - t_min) * rng.random(size)


# ============================================================
# Forward Process
# ============================================================

def forward_mask(x0, t, rng: np.random.Generator, vocab_size: int) -> np.ndarray:
    """
    Mask each token independently with probability 1 - alpha(t).

    `t` is a float or one time per row of a (B, N) batch. Uniforms are
    drawn in row-major order (position 0..N-1 within each row).
    """
    x0 = validate_tokens(x0, vocab_size)
    if np.any(x0 == mask_id(vocab_size)):
        raise UsageError("forward_mask expects a mask-free x0")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise UsageError("t must lie in [0, 1]")

    mask_prob = 1.0 - SCHEDULE.alpha(t)
    if t.ndim == 1:
        mask_prob = mask_prob[:, None]

    u = rng.random(x0.shape)
    return np.where(u < mask_prob, mask_id(vocab_size), x0)


def posterior_probs(x_t_i: int, x_0_i: int, s: float, t: float, vocab_size: int) -> np.ndarray:
    """q(x_s^i | x_t^i, x_0^i) as a length V+1 probability vector."""
    if not s < t:
        raise UsageError(f"posterior needs s < t, got s={s}, t={t}")
    mask = mask_id(vocab_size)
    probs = np.zeros(vocab_size + 1, dtype=np.float64)

    if x_t_i != mask:
        probs[x_t_i] = 1.0
        return probs

    alpha_s = float(SCHEDULE.alpha(s))
    alpha_t = float(SCHEDULE.alpha(t))
    probs[mask] = (1.0 - alpha_s) / (1.0 - alpha_t)
    probs[x_0_i] = (alpha_s - alpha_t) / (1.0 - alpha_t)
    return probs


def mask_indicator(xt, vocab_size: int) -> np.ndarray:
    return (np.asarray(xt) == mask_id(vocab_size)).astype(np.int8)
