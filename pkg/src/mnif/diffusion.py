"""DDPM prior over latent vectors with a residual-MLP noise predictor.

Latents are standardised per dimension before diffusion and mapped back after
sampling. The denoiser is a stack of residual blocks; each block adds a
projection of a sinusoidal timestep embedding to its input, then applies
``fc2(silu(fc1(silu(h))))`` with a skip connection. The output projection is
zero-initialised, so an untrained denoiser predicts zero noise.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import numerics as nx
from . import seeding
from .numerics import ContractError, Tensor
from .optim import Adam, schedule_lr
from .trainers import DivergenceError, LatentTable, log_line

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6
SCHEDULES = ("linear", "cosine")


@dataclass(frozen=True)
class DiffusionConfig:
    timesteps: int = 1000
    schedule: str = "cosine"
    denoiser_width: int = 256
    denoiser_blocks: int = 4
    embed_dim: int = 64
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    lr_schedule: str = "cosine"
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if self.denoiser_width < 1 or self.denoiser_blocks < 1:
            raise ValueError("denoiser width and blocks must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")

    @classmethod
    def full_size(cls, **overrides) -> DiffusionConfig:
        """Full-size denoiser: width 4096, 4 blocks, lr 1e-4, batch 32."""
        base = dict(denoiser_width=4096, denoiser_blocks=4, lr=1e-4, batch_size=32, epochs=1000)
        return cls(**{**base, **overrides})


# -- noise schedule -----------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    @classmethod
    def from_config(cls, cfg: DiffusionConfig) -> NoiseSchedule:
        T = cfg.timesteps
        if cfg.schedule == "linear":
            betas = np.linspace(cfg.beta_start, cfg.beta_end, T)
        else:
            s = 0.008
            steps = np.arange(T + 1) / T
            f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
            abar = f / f[0]
            betas = np.clip(1.0 - abar[1:] / abar[:-1], 0.0, 0.999)
        return cls(betas.astype(np.float64))

    @property
    def timesteps(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)


def forward_noise(phi0, t, noise, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) phi0 + sqrt(1 - abar_t) noise; ``t`` may be per-row."""
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= schedule.timesteps):
        raise ContractError(f"timestep out of range [0, {schedule.timesteps})")
    abar = schedule.alpha_bars[t]
    if abar.ndim:
        abar = abar[:, None]
    out = np.sqrt(abar) * np.asarray(phi0, np.float64) + np.sqrt(1.0 - abar) * np.asarray(noise, np.float64)
    return out.astype(np.float32)


# -- standardisation ------------------------------------------------------------------


@dataclass
class LatentStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, latents: np.ndarray) -> LatentStats:
        x = np.asarray(latents, dtype=np.float64)
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR))

    def standardize(self, x) -> np.ndarray:
        return (np.asarray(x, np.float64) - self.mean) / self.std

    def destandardize(self, z) -> np.ndarray:
        return np.asarray(z, np.float64) * self.std + self.mean


# -- denoiser -----------------------------------------------------------------------


def timestep_embedding(t, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=-1)
    return emb.astype(np.float32)


def _linear_init(rng, fan_out: int, fan_in: int):
    bound = 1.0 / math.sqrt(fan_in)
    w = rng.uniform(-bound, bound, (fan_out, fan_in)).astype(np.float32)
    b = rng.uniform(-bound, bound, fan_out).astype(np.float32)
    return nx.parameter(w), nx.parameter(b)


def _linear(h: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return nx.matmul(h, nx.transpose(w)) + b


class DenoiserMlp:
    """Residual MLP predicting the noise added to a standardised latent."""

    def __init__(self, latent_dim: int, width: int, blocks: int, embed_dim: int, seed):
        rng = np.random.default_rng(seed)
        self.latent_dim, self.width, self.embed_dim = latent_dim, width, embed_dim
        self.in_proj = _linear_init(rng, width, latent_dim)
        self.blocks = [
            {"time": _linear_init(rng, width, embed_dim), "fc1": _linear_init(rng, width, width),
             "fc2": _linear_init(rng, width, width)}
            for _ in range(blocks)
        ]
        self.out_proj = (nx.parameter(np.zeros((latent_dim, width), np.float32)),
                         nx.parameter(np.zeros(latent_dim, np.float32)))

    def parameters(self) -> list[Tensor]:
        params = list(self.in_proj)
        for blk in self.blocks:
            for key in ("time", "fc1", "fc2"):
                params.extend(blk[key])
        return params + list(self.out_proj)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        names = ["in_proj.w", "in_proj.b"]
        for i in range(len(self.blocks)):
            for key in ("time", "fc1", "fc2"):
                names += [f"block{i}.{key}.w", f"block{i}.{key}.b"]
        names += ["out_proj.w", "out_proj.b"]
        return list(zip(names, self.parameters()))

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, x, t) -> Tensor:
        emb = Tensor(timestep_embedding(t, self.embed_dim))
        h = _linear(nx.as_tensor(x), *self.in_proj)
        for blk in self.blocks:
            u = h + _linear(emb, *blk["time"])
            u = _linear(nx.silu(u), *blk["fc1"])
            u = _linear(nx.silu(u), *blk["fc2"])
            h = h + u
        return _linear(h, *self.out_proj)

    def predict_noise(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        with nx.no_grad():
            return self(np.asarray(x, np.float32), t).data


def denoiser_param_count(latent_dim: int, width: int, blocks: int, embed_dim: int) -> int:
    per_block = (embed_dim * width + width) + 2 * (width * width + width)
    return (latent_dim * width + width) + blocks * per_block + (width * latent_dim + latent_dim)


# -- training and sampling -------------------------------------------------------------


def train_denoiser(table: LatentTable, cfg: DiffusionConfig, seed: int) -> tuple[DenoiserMlp, LatentStats, list[dict]]:
    """Fit the noise predictor with the simple (unweighted) DDPM objective."""
    if len(table) == 0:
        raise ContractError("cannot train a denoiser on an empty latent table")
    stats = LatentStats.fit(table.latents)
    data = stats.standardize(table.latents).astype(np.float32)
    schedule = NoiseSchedule.from_config(cfg)
    model = DenoiserMlp(table.dim, cfg.denoiser_width, cfg.denoiser_blocks, cfg.embed_dim,
                        seeding.substream(seed, "denoiser-init"))
    params = model.parameters()
    opt = Adam(params, cfg.lr)
    rng = seeding.rng(seed, "diffusion")
    n = len(data)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    history, step = [], 0
    for epoch in range(cfg.epochs):
        loss_sum, batches = 0.0, 0
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            x0 = data[order[lo:lo + cfg.batch_size]]
            t = rng.integers(0, schedule.timesteps, size=len(x0))
            eps = rng.standard_normal(x0.shape).astype(np.float32)
            xt = forward_noise(x0, t, eps, schedule)
            loss = nx.mean(nx.square(model(xt, t) - eps))
            if not np.isfinite(loss.data):
                raise DivergenceError(f"non-finite denoiser loss at step {step}", step=step)
            grads = nx.grad(loss, params)
            lr = schedule_lr(cfg.lr_schedule, cfg.lr, step, total)
            opt.step(grads, lr)
            loss_sum += float(loss.data)
            batches += 1
            step += 1
        rec = {"step": step, "epoch": epoch, "loss": loss_sum / batches, "psnr": float("nan"), "lr": lr}
        history.append(rec)
        log.debug(log_line(rec))
    return model, stats, history


def sample(denoiser, stats: LatentStats, cfg: DiffusionConfig, n: int, seed: int) -> np.ndarray:
    """Ancestral sampling from pure noise, returned in latent units ``[n, H]``.

    ``denoiser`` is anything with ``predict_noise(x, t)``.
    """
    H = len(stats.mean)
    if n == 0:
        return np.zeros((0, H), dtype=np.float32)
    schedule = NoiseSchedule.from_config(cfg)
    betas, alphas, abar = schedule.betas, schedule.alphas, schedule.alpha_bars
    rng = seeding.rng(seed, "diffusion-sample")
    x = rng.standard_normal((n, H))
    for t in range(schedule.timesteps - 1, -1, -1):
        eps = denoiser.predict_noise(x.astype(np.float32), np.full(n, t)).astype(np.float64)
        mean = (x - betas[t] / math.sqrt(1.0 - abar[t]) * eps) / math.sqrt(alphas[t])
        if t > 0:
            var = betas[t] * (1.0 - abar[t - 1]) / (1.0 - abar[t])
            x = mean + math.sqrt(var) * rng.standard_normal((n, H))
        else:
            x = mean
    return stats.destandardize(x).astype(np.float32)


def sample_by_interpolation(table: LatentTable, k_neighbors: int, seed, alpha: float | None = None,
                            return_draw: bool = False):
    """Blend a random latent with one of its ``k`` nearest neighbours.

    ``alpha ~ U(0, 1)`` unless given. With ``return_draw`` also returns the
    ``(i, j, alpha)`` draw so the result can be replayed.
    """
    N = len(table)
    if N < 2:
        raise ContractError("interpolation sampling needs at least two latents")
    k = max(1, min(k_neighbors, N - 1))
    rng = np.random.default_rng(seed)
    i = int(rng.integers(N))
    lat = np.asarray(table.latents, np.float64)
    _, idx = cKDTree(lat).query(lat[i], k=min(k + 1, N))
    neighbours = [int(j) for j in np.atleast_1d(idx) if j != i][:k]
    j = neighbours[int(rng.integers(len(neighbours)))]
    a = float(rng.uniform()) if alpha is None else float(alpha)
    out = (a * lat[i] + (1.0 - a) * lat[j]).astype(np.float32)
    return (out, (i, j, a)) if return_draw else out
