"""Denoising diffusion for 3D joint positions.

Cosine noise schedule, forward noising, a condition-modulated MLP noise
estimator, the training loss, and the ancestral reverse sampler. The
schedule can be respaced to a shorter inference subsequence; denoiser
conditioning always uses the original step index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Tensor, no_grad
from .nn.layers import ParamStore, add_dense, dense, gelu, layer_norm

MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete noise schedule over steps step_ids[i] (1-based, increasing).

    alpha_bar has one extra leading entry: alpha_bar[0] is the value before
    the first step (1 for a full schedule), alpha_bar[i + 1] pairs with
    betas[i] and step_ids[i].
    """

    alpha_bar: np.ndarray
    betas: np.ndarray
    step_ids: np.ndarray
    num_train_steps: int

    def __len__(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    def posterior_variance(self) -> np.ndarray:
        """Variance of the reverse kernel per step; zero at the first step."""
        prev = self.alpha_bar[:-1]
        cur = self.alpha_bar[1:]
        return self.betas * (1.0 - prev) / (1.0 - cur)

    def index_of_step(self, m) -> np.ndarray:
        """Map original step ids to positions in this (possibly respaced) schedule."""
        m = np.asarray(m)
        idx = np.searchsorted(self.step_ids, m)
        bad = (idx >= len(self.step_ids)) | (self.step_ids[np.minimum(idx, len(self.step_ids) - 1)] != m)
        if bad.any():
            raise ValueError(f"step {np.asarray(m)[bad].ravel()[0]} is not in the schedule")
        return idx


def cosine_schedule(num_steps: int = 1000, s: float = 0.008) -> NoiseSchedule:
    """Squared-cosine cumulative signal level with per-step betas capped at 0.999."""
    if num_steps < 1:
        raise ValueError("num_steps must be at least 1")
    m = np.arange(num_steps + 1, dtype=np.float64)
    f = np.cos(((m / num_steps + s) / (1.0 + s)) * (np.pi / 2.0)) ** 2
    alpha_bar = f / f[0]
    betas = np.minimum(1.0 - alpha_bar[1:] / alpha_bar[:-1], MAX_BETA)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(alpha_bar, betas, np.arange(1, num_steps + 1), num_steps)


def respace(schedule: NoiseSchedule, steps: int) -> NoiseSchedule:
    """Uniform-stride subsequence that always keeps the final step.

    Betas are recomputed from the selected cumulative products, so one
    respaced step covers the same total noise as the steps it replaces.
    """
    total = len(schedule)
    if not 1 <= steps <= total:
        raise ValueError(f"steps must lie in 1..{total}, got {steps}")
    stride = total // steps
    picks = np.arange(1, steps + 1) * stride - 1
    picks[-1] = total - 1
    alpha_sel = schedule.alpha_bar[picks + 1]
    prev = np.concatenate([[1.0], alpha_sel[:-1]])
    betas = 1.0 - alpha_sel / prev
    return NoiseSchedule(np.concatenate([[1.0], alpha_sel]), betas,
                         schedule.step_ids[picks], schedule.num_train_steps)


def forward_noise(schedule: NoiseSchedule, j0: np.ndarray, m, eps: np.ndarray) -> np.ndarray:
    """Noisy positions at step m: sqrt(abar) * j0 + sqrt(1 - abar) * eps."""
    j0 = np.asarray(j0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    idx = schedule.index_of_step(m)
    abar = schedule.alpha_bar[idx + 1]
    if j0.ndim == 2:
        abar = np.reshape(abar, (-1, 1)) if np.ndim(m) else abar
    return np.sqrt(abar) * j0 + np.sqrt(1.0 - abar) * eps


def sinusoidal_embedding(m, dim: int) -> np.ndarray:
    """(n, dim) sin/cos features of integer steps; dim must be even."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    m = np.asarray(m, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = m[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass(frozen=True)
class DenoiserConfig:
    cond_dim: int
    hidden: int = 1024
    depth: int = 3
    time_dim: int = 128


class Denoiser:
    """Noise estimator for one 3D position, modulated by a condition vector.

    A stack of residual MLP blocks; each block normalizes its input and
    shifts/scales it from the condition pathway (condition projection plus
    sinusoidal time features). Modulation and output layers start at zero,
    so a fresh denoiser predicts exactly zero noise.
    """

    def __init__(self, store: ParamStore, prefix: str, config: DenoiserConfig):
        self.store = store
        self.prefix = prefix
        self.config = config

    @classmethod
    def create(cls, store: ParamStore, rng: np.random.Generator, prefix: str,
               config: DenoiserConfig) -> "Denoiser":
        add_dense(store, rng, f"{prefix}.cond", config.cond_dim, config.hidden)
        add_dense(store, rng, f"{prefix}.time", config.time_dim, config.hidden)
        add_dense(store, rng, f"{prefix}.in", 3, config.hidden)
        for i in range(config.depth):
            add_dense(store, rng, f"{prefix}.mod{i}", config.hidden, 2 * config.hidden, zero_init=True)
            add_dense(store, rng, f"{prefix}.a{i}", config.hidden, config.hidden)
            add_dense(store, rng, f"{prefix}.b{i}", config.hidden, config.hidden, zero_init=True)
        add_dense(store, rng, f"{prefix}.out", config.hidden, 3, zero_init=True)
        return cls(store, prefix, config)

    def __call__(self, x: Tensor, m: np.ndarray, cond: Tensor) -> Tensor:
        cfg = self.config
        p = self.prefix
        time_feat = Tensor(sinusoidal_embedding(m, cfg.time_dim).astype(self.store.dtype))
        c = gelu(dense(self.store, f"{p}.cond", cond) + dense(self.store, f"{p}.time", time_feat))
        h = dense(self.store, f"{p}.in", x)
        hid = cfg.hidden
        for i in range(cfg.depth):
            mod = dense(self.store, f"{p}.mod{i}", c)
            scale = mod[:, :hid]
            shift = mod[:, hid:]
            hn = layer_norm(h) * (scale + 1.0) + shift
            h = h + dense(self.store, f"{p}.b{i}", gelu(dense(self.store, f"{p}.a{i}", hn)))
        return dense(self.store, f"{p}.out", layer_norm(h))


def noise_prediction_loss(denoiser, schedule: NoiseSchedule, cond: Tensor,
                          j0: np.ndarray, rng: np.random.Generator,
                          m: np.ndarray | None = None,
                          eps: np.ndarray | None = None) -> Tensor:
    """Per-position squared error between true and predicted noise, shape (n,).

    Fresh (step, noise) pairs are drawn independently per position unless
    provided explicitly.
    """
    j0 = np.asarray(j0, dtype=np.float64).reshape(-1, 3)
    n = j0.shape[0]
    if m is None:
        m = rng.integers(1, schedule.num_train_steps + 1, size=n)
    m = np.broadcast_to(np.asarray(m), (n,))
    if eps is None:
        eps = rng.standard_normal((n, 3))
    noisy = forward_noise(schedule, j0, m, eps)
    dtype = getattr(denoiser, "store", None).dtype if hasattr(denoiser, "store") else np.float64
    eps_hat = denoiser(Tensor(noisy.astype(dtype)), m, cond)
    diff = eps_hat - Tensor(eps.astype(dtype))
    return (diff * diff).sum(axis=-1)


def joint_loss(denoiser, schedule: NoiseSchedule, cond: Tensor, j0: np.ndarray,
               rng: np.random.Generator) -> Tensor:
    """Scalar diffusion loss for a single position and condition vector."""
    cond2 = cond if cond.ndim == 2 else cond.reshape(1, -1)
    return noise_prediction_loss(denoiser, schedule, cond2, np.reshape(j0, (1, 3)), rng).sum()


def sample_joint(denoiser, schedule: NoiseSchedule, cond: np.ndarray,
                 rng: np.random.Generator, steps: int = 50,
                 clip_bound: float = 1.0) -> np.ndarray:
    """Draw positions by ancestral reverse diffusion.

    cond is (c,) for one position or (n, c) for a batch; returns (3,) or
    (n, 3) accordingly. The last update adds no noise. The denoiser is
    called with the original step index of each respaced step.

    Each update rewrites the posterior mean around the implied clean
    position and clips that estimate to [-clip_bound, clip_bound]. The
    clip never binds for an accurate estimator of in-range targets (shapes
    are normalized into the half-unit cube), but it is what keeps shortened
    schedules stable: the first respaced step divides by a near-zero signal
    level, so unclipped estimator error is amplified by orders of magnitude.
    """
    cond = np.asarray(cond)
    single = cond.ndim == 1
    cond2 = cond.reshape(1, -1) if single else cond
    n = cond2.shape[0]
    sub = respace(schedule, steps) if steps != len(schedule) else schedule

    dtype = getattr(denoiser, "store", None).dtype if hasattr(denoiser, "store") else np.float64
    cond_t = Tensor(np.ascontiguousarray(cond2, dtype=dtype))
    x = rng.standard_normal((n, 3))
    with no_grad():
        for i in range(len(sub) - 1, -1, -1):
            m = np.full(n, sub.step_ids[i])
            beta = sub.betas[i]
            abar = sub.alpha_bar[i + 1]
            abar_prev = sub.alpha_bar[i]
            eps_hat = denoiser(Tensor(x.astype(dtype)), m, cond_t).data.astype(np.float64)
            x0_hat = (x - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)
            np.clip(x0_hat, -clip_bound, clip_bound, out=x0_hat)
            x = (np.sqrt(abar_prev) * beta * x0_hat
                 + np.sqrt(1.0 - beta) * (1.0 - abar_prev) * x) / (1.0 - abar)
            if i > 0:
                sigma = np.sqrt(beta * (1.0 - abar_prev) / (1.0 - abar))
                x = x + sigma * rng.standard_normal((n, 3))
    return x[0] if single else x
