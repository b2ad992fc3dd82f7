"""Regularized choice solvers over a display set: softmax, simplex projection, Gumbel sampling."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

# probabilities are clamped here before any downstream log
PROB_FLOOR = 1e-300


class Regularizer(Enum):
    SHANNON_ENTROPY = "entropy"
    L2 = "l2"


@dataclass(frozen=True)
class ChoiceConfig:
    """Exploration strength eta (> 0) and the regularizer shaping the choice rule."""

    eta: float = 1.0
    regularizer: Regularizer = Regularizer.SHANNON_ENTROPY

    def __post_init__(self):
        if not (self.eta > 0):
            raise ValueError(f"eta must be > 0, got {self.eta}")


def _check_rewards(rewards: np.ndarray) -> np.ndarray:
    arr = np.asarray(rewards, dtype=float)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError("rewards must be a non-empty vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError("rewards contain NaN or Inf")
    return arr


def softmax(logits: np.ndarray) -> np.ndarray:
    """Overflow-safe softmax (max subtraction)."""
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / e.sum()


def entropy_choice_probs(rewards, config: ChoiceConfig = ChoiceConfig()) -> np.ndarray:
    """Optimal mixed choice under the entropy regularizer: softmax of eta * rewards."""
    r = _check_rewards(rewards)
    return softmax(config.eta * r)


def project_to_simplex(y: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort and threshold, O(n log n))."""
    y = np.asarray(y, dtype=float)
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, y.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(y - tau, 0.0)


def l2_choice_probs(rewards, config: ChoiceConfig = ChoiceConfig()) -> np.ndarray:
    """Optimal mixed choice under the L2 regularizer.

    Maximizing <phi, r> - ||phi||^2 / eta over the simplex is, after completing
    the square, the projection of (eta / 2) * r onto the simplex. The result may
    be sparse: low-reward slots get exactly zero probability.
    """
    r = _check_rewards(rewards)
    return project_to_simplex(0.5 * config.eta * r)


def choice_probs(rewards, config: ChoiceConfig) -> np.ndarray:
    """Dispatch to the solver matching config.regularizer."""
    if config.regularizer is Regularizer.SHANNON_ENTROPY:
        return entropy_choice_probs(rewards, config)
    return l2_choice_probs(rewards, config)


def gumbel_sample_choice(rewards, config: ChoiceConfig, rng: np.random.Generator) -> int:
    """Sample argmax_i (eta * r_i + g_i) with g_i standard Gumbel via -log(-log(U)).

    Only valid for the entropy regularizer, where this reproduces the softmax
    choice probabilities exactly.
    """
    return int(gumbel_sample_choices(rewards, config, rng, 1)[0])


def gumbel_sample_choices(rewards, config: ChoiceConfig, rng: np.random.Generator,
                          size: int) -> np.ndarray:
    """Vectorized gumbel_sample_choice: `size` independent draws at once."""
    if config.regularizer is not Regularizer.SHANNON_ENTROPY:
        raise ValueError("gumbel sampling is only exact for the entropy regularizer")
    r = _check_rewards(rewards)
    u = np.clip(rng.random((size, r.size)), 1e-300, 1.0 - 1e-16)
    noise = -np.log(-np.log(u))
    return np.argmax(config.eta * r[None, :] + noise, axis=1)


def sample_choice(rewards, config: ChoiceConfig, rng: np.random.Generator) -> int:
    """Draw one choice index from the regularized choice distribution."""
    if config.regularizer is Regularizer.SHANNON_ENTROPY:
        return gumbel_sample_choice(rewards, config, rng)
    # projected distribution can be sparse; inverse-CDF sample it directly
    probs = l2_choice_probs(rewards, config)
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random(), side="right"))
    return min(idx, probs.size - 1)


def regularizer_value(probs, kind: Regularizer) -> float:
    """R(phi): sum phi log phi (0 log 0 = 0) for entropy, sum phi^2 for L2."""
    p = np.asarray(probs, dtype=float)
    if np.any(p < -1e-6) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("probs are off the simplex")
    if kind is Regularizer.SHANNON_ENTROPY:
        pos = p[p > 0]
        return float(np.sum(pos * np.log(pos)))
    return float(np.sum(p * p))
