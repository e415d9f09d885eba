"""
SGLD chains, the replay buffer, and persistent contrastive divergence.

An improper step is x' = x + alpha * grad log p(x) + sigma * eps. A proper
step uses drift alpha / 2 and noise std sqrt(alpha), the Langevin kernel whose
stationary law is p itself.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DivergenceError
from .rng import Rng

logger = logging.getLogger(__name__)

INITS = ("uniform", "normal")


@dataclass(frozen=True)
class SamplerConfig:
    alpha: float = 1.0
    sigma: float = 0.01
    eta: int = 20
    rho: float = 0.05
    init: str = "uniform"
    init_low: float = -1.0
    init_high: float = 1.0
    proper_mode: bool = False
    decay_power: float = 0.0
    buffer_size: int = 10000
    persistent: bool = True
    clamp: Optional[float] = None

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError(f"sampler alpha must be positive, got {self.alpha}")
        if self.sigma < 0 or self.eta < 0:
            raise ConfigError("sampler sigma and eta must be non-negative")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"reinitialization probability must lie in [0, 1], got {self.rho}")
        if self.init not in INITS:
            raise ConfigError(f"unknown p0 '{self.init}', expected one of {INITS}")
        if self.buffer_size < 1:
            raise ConfigError("buffer_size must be positive")

    def step_and_noise(self, t: int = 0) -> Tuple[float, float]:
        """Drift coefficient and noise std for step t."""
        if self.proper_mode:
            alpha = self.alpha * (1.0 + t) ** (-self.decay_power) if self.decay_power else self.alpha
            return 0.5 * alpha, math.sqrt(alpha)
        return self.alpha, self.sigma


def draw_p0(cfg: SamplerConfig, rng: Rng, n: int, dim: int) -> np.ndarray:
    if cfg.init == "uniform":
        return rng.uniform(cfg.init_low, cfg.init_high, (n, dim))
    return rng.normal((n, dim))


def _drift(model, x: np.ndarray, conditional_y) -> np.ndarray:
    if conditional_y is None:
        return model.grad_logp_x(x)
    return model.grad_logit(x, conditional_y)


def sgld_step(model, x, cfg: SamplerConfig, rng: Optional[Rng] = None, conditional_y=None,
              noise: Optional[np.ndarray] = None, t: int = 0) -> np.ndarray:
    """
    One SGLD transition.

    Args:
        model: Anything exposing grad_logp_x / grad_logit (JemModel, QuadraticEnergy).
        x: State [D] or batch [N, D].
        cfg: Step size, noise scale and mode.
        rng: Noise source; ignored when `noise` is given.
        conditional_y: Class index (or one per row) to follow f(x)[y] instead of log p(x).
        noise: Pre-drawn standard normal noise shaped like x.
        t: Step index, used by the proper-mode decay schedule.

    Returns:
        The next state.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DivergenceError("SGLD state is not finite")
    drift = _drift(model, x, conditional_y)
    if not np.all(np.isfinite(drift)):
        raise DivergenceError("SGLD drift is not finite")
    step, noise_std = cfg.step_and_noise(t)
    eps = rng.normal(x.shape) if noise is None else noise
    x_next = x + step * drift + noise_std * eps
    if cfg.clamp is not None:
        x_next = np.clip(x_next, -cfg.clamp, cfg.clamp)
    return x_next


def run_chain(model, x0, cfg: SamplerConfig, steps: int, rng: Optional[Rng] = None,
              conditional_y=None, noise: Optional[np.ndarray] = None) -> np.ndarray:
    """Run `steps` SGLD steps; noise, if given, is stacked as [steps, *x.shape]."""
    x = np.asarray(x0, dtype=np.float64)
    for t in range(steps):
        x = sgld_step(model, x, cfg, rng, conditional_y,
                      noise=None if noise is None else noise[t], t=t)
    return x


class ReplayBuffer:
    """Fixed-capacity store of persistent chain states."""

    def __init__(self, capacity: int, dim: int):
        self.capacity = capacity
        self.dim = dim
        self.states = np.empty((0, dim))
        self.write_cursor = 0
        self.transitions = 0

    def __len__(self) -> int:
        return len(self.states)

    def is_full(self) -> bool:
        return len(self.states) >= self.capacity

    def insert_fresh(self, state: np.ndarray) -> int:
        """Append while growing, then overwrite the oldest slot in ring order."""
        if not self.is_full():
            self.states = np.vstack([self.states, state[None]])
            return len(self.states) - 1
        slot = self.write_cursor
        self.states[slot] = state
        self.write_cursor = (self.write_cursor + 1) % self.capacity
        return slot

    def store(self, states: np.ndarray, slots: np.ndarray, cfg: SamplerConfig, rng: Rng):
        """
        Write final chain states back; non-finite states are replaced by fresh p0 draws.

        Every write-back lands before the first fresh state is inserted, so the
        result does not depend on the order of the chains.
        """
        states = np.array(states, dtype=np.float64)
        slots = np.asarray(slots, dtype=np.int64)
        for j in np.flatnonzero(~np.all(np.isfinite(states), axis=1)):
            logger.warning(f"Chain {j} ended non-finite; refilling its slot from p0")
            states[j] = draw_p0(cfg, rng.substream("refill", int(j)), 1, self.dim)[0]
        kept = slots >= 0
        self.states[slots[kept]] = states[kept]
        for state in states[~kept]:
            self.insert_fresh(state)

    def fill(self, cfg: SamplerConfig, rng: Rng, count: Optional[int] = None):
        """Top the buffer up with p0 draws."""
        count = self.capacity - len(self) if count is None else count
        for state in draw_p0(cfg, rng, count, self.dim):
            self.insert_fresh(state)


def draw_init(buf: ReplayBuffer, cfg: SamplerConfig, rng: Rng, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Initial states for n chains.

    Chains pick distinct buffer slots at random and start from p0 instead
    with probability rho. While the buffer holds fewer than n states the
    surplus chains start fresh too. Slot index -1 marks a fresh draw.
    """
    slots = np.full(n, -1, dtype=np.int64)
    picks = rng.substream("slots").permutation(len(buf))[:n]
    slots[:len(picks)] = picks
    fresh = (rng.substream("rho").random(n) < cfg.rho) | (slots < 0)
    slots[fresh] = -1
    states = np.empty((n, buf.dim))
    if np.any(~fresh):
        states[~fresh] = buf.states[slots[~fresh]]
    if np.any(fresh):
        states[fresh] = draw_p0(cfg, rng.substream("p0"), int(fresh.sum()), buf.dim)
    return states, slots


def chain_noise(rng: Rng, slots: Sequence[int], steps: int, dim: int) -> np.ndarray:
    """Per-chain noise [steps, n, dim], each chain drawing from its own substream."""
    noise = np.empty((steps, len(slots), dim))
    for j, slot in enumerate(slots):
        noise[:, j, :] = rng.substream("chain", j, int(slot)).normal((steps, dim))
    return noise


def pcd_transition(model, buf: ReplayBuffer, cfg: SamplerConfig, rng: Rng, n: int,
                   conditional_y=None) -> np.ndarray:
    """
    One persistent contrastive divergence transition for n chains.

    Draws initial states, runs eta SGLD steps, and writes the final states back
    to their slots (fresh draws go in ring order). Returns the final states.
    """
    trng = rng.substream("pcd", buf.transitions)
    x0, slots = draw_init(buf, cfg, trng.substream("init"), n)
    noise = chain_noise(trng, slots, cfg.eta, buf.dim)
    x = run_chain(model, x0, cfg, cfg.eta, conditional_y=conditional_y, noise=noise)
    buf.store(x, slots, cfg, trng)
    buf.transitions += 1
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"PCD transition {buf.transitions} produced non-finite negatives")
    return x


def sample_px_method2(model, cfg: SamplerConfig, rng: Rng, steps: int, n: int = 1) -> np.ndarray:
    """Unconditional samples: fresh p0 chains following log p(x)."""
    x0 = draw_p0(cfg, rng.substream("p0"), n, model.input_dim)
    return run_chain(model, x0, cfg, steps, rng=rng.substream("noise"))


def sample_px_method1(model, cfg: SamplerConfig, rng: Rng, steps: int, n: int = 1,
                      class_prior: Optional[Sequence[float]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Draw y from the class prior, then follow f(x)[y]; returns (x, y)."""
    k = model.num_classes
    prior = np.full(k, 1.0 / k) if class_prior is None else np.asarray(class_prior, dtype=np.float64)
    y = rng.substream("labels").categorical(prior, n)
    x0 = draw_p0(cfg, rng.substream("p0"), n, model.input_dim)
    return run_chain(model, x0, cfg, steps, rng=rng.substream("noise"), conditional_y=y), y
