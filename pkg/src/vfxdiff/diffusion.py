"""Variance-preserving schedule, v-prediction targets, training loss assembly,
non-uniform timestep sampling, and deterministic DDIM with classifier-free
guidance.

v = alpha_t * eps - sigma_t * x0; with alpha^2 + sigma^2 = 1 the pair
(x0, eps) is recovered exactly from (x_t, v), which is what both the training
target and the DDIM update rely on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import Tensor, add_all, constant, mse, scale


@dataclass
class NoiseSchedule:
    """Tables alpha_t, sigma_t for t = 1..T with alpha_t^2 + sigma_t^2 = 1."""

    T: int
    alpha: np.ndarray
    sigma: np.ndarray

    def alpha_at(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha[t - 1])

    def sigma_at(self, t: int) -> float:
        if t == 0:
            return 0.0
        self._check(t)
        return float(self.sigma[t - 1])

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} out of range [1, {self.T}]")


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear-beta variance-preserving schedule: alpha_t = sqrt(prod(1 - beta_s))."""
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    betas = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(T=T, alpha=np.sqrt(alpha_bar), sigma=np.sqrt(1.0 - alpha_bar))


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Forward noising x_t = alpha_t x0 + sigma_t eps."""
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"q_sample shape mismatch: {x0.shape} vs {eps.shape}")
    return schedule.alpha_at(t) * x0 + schedule.sigma_at(t) * eps


def v_target(x0: np.ndarray, eps: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"v_target shape mismatch: {x0.shape} vs {eps.shape}")
    return schedule.alpha_at(t) * eps - schedule.sigma_at(t) * x0


def recover_x0(x_t: np.ndarray, v_hat: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    x_t, v_hat = np.asarray(x_t, dtype=np.float64), np.asarray(v_hat, dtype=np.float64)
    if x_t.shape != v_hat.shape:
        raise ValueError(f"recover_x0 shape mismatch: {x_t.shape} vs {v_hat.shape}")
    return schedule.alpha_at(t) * x_t - schedule.sigma_at(t) * v_hat


def recover_eps(x_t: np.ndarray, v_hat: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    x_t, v_hat = np.asarray(x_t, dtype=np.float64), np.asarray(v_hat, dtype=np.float64)
    if x_t.shape != v_hat.shape:
        raise ValueError(f"recover_eps shape mismatch: {x_t.shape} vs {v_hat.shape}")
    return schedule.sigma_at(t) * x_t + schedule.alpha_at(t) * v_hat


def sample_timesteps_nonuniform(
    batch: int,
    rng: np.random.Generator,
    T: int = 1000,
    high_start: int | None = None,
    high_prob: float = 0.75,
) -> list[int]:
    """Each t independently: with probability `high_prob` uniform over the high
    band [high_start, T], else uniform over [1, high_start - 1]. The default
    boundary puts the top tenth of the steps in the high band (901 for T=1000,
    the boundary step itself belonging to the high band)."""
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    if high_start is None:
        high_start = T - T // 10 + 1
    if not 2 <= high_start <= T:
        raise ValueError(f"high band start {high_start} out of range [2, {T}]")
    out = []
    for _ in range(batch):
        if rng.random() < high_prob:
            out.append(int(rng.integers(high_start, T + 1)))
        else:
            out.append(int(rng.integers(1, high_start)))
    return out


@dataclass
class SampleDiag:
    """Per-sample record of one training-loss evaluation."""

    t: int
    n_conditions: int
    dropped: bool
    mse: float
    aux_mean: float


def training_loss(
    batch: Sequence,
    model,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    beta: float = 0.01,
    cond_dropout: float = 0.1,
    train_mode: bool = True,
) -> tuple[Tensor, list[SampleDiag]]:
    """Mean over the batch of mse(v_hat, v) + beta * mean per-layer aux loss.

    Per sample, in draw order: one non-uniform timestep, a Gaussian noise field,
    then one uniform for whole-set condition dropout. `batch` holds records with
    .target (the clean video) and .conditions.
    """
    if not batch:
        raise ValueError("training_loss needs a non-empty batch")
    mse_nodes, aux_nodes, diags = [], [], []
    for record in batch:
        x0 = np.asarray(record.target, dtype=np.float64)
        t = sample_timesteps_nonuniform(1, rng, T=schedule.T)[0]
        eps = rng.standard_normal(x0.shape)
        dropped = rng.random() < cond_dropout
        conditions = [] if dropped else list(record.conditions)
        x_t = q_sample(x0, t, eps, schedule)
        v = v_target(x0, eps, t, schedule)
        v_hat, sample_aux = model.forward_graph(x_t, t, conditions, train_mode=train_mode)
        m = mse(v_hat, constant(v))
        aux = scale(add_all(sample_aux), 1.0 / len(sample_aux)) if sample_aux else None
        mse_nodes.append(m)
        if aux is not None:
            aux_nodes.append(aux)
        diags.append(
            SampleDiag(
                t=t,
                n_conditions=len(conditions),
                dropped=dropped,
                mse=m.item(),
                aux_mean=aux.item() if aux is not None else 0.0,
            )
        )
    total = scale(add_all(mse_nodes), 1.0 / len(mse_nodes))
    if beta != 0.0 and aux_nodes:
        total = add_all([total, scale(scale(add_all(aux_nodes), 1.0 / len(aux_nodes)), beta)])
    return total, diags


@dataclass
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"sampler needs steps >= 1, got {self.steps}")
        if self.cfg_scale < 0:
            raise ValueError(f"cfg scale must be >= 0, got {self.cfg_scale}")


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Strictly decreasing timesteps from T down to 1."""
    ts = np.unique(np.round(np.linspace(T, 1, steps)).astype(int))
    return [int(t) for t in ts[::-1]]


def ddim_generate(
    conditions,
    model,
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
    shape: tuple[int, ...] | None = None,
) -> np.ndarray:
    """Deterministic DDIM from Gaussian noise, guided by
    v = v_uncond + s * (v_cond - v_uncond); final output clamped to [0, 1].

    `model` needs predict_v(x_t, t, conditions); the unconditional branch is the
    empty condition list.
    """
    if shape is None:
        shape = model.config.video_shape
    rng = np.random.default_rng(sampler.seed)
    x = rng.standard_normal(shape)
    ts = ddim_timesteps(schedule.T, sampler.steps)
    for i, t in enumerate(ts):
        t_next = ts[i + 1] if i + 1 < len(ts) else 0
        v_uncond = model.predict_v(x, t, [])
        if conditions:
            v_cond = model.predict_v(x, t, list(conditions))
            v = v_uncond + sampler.cfg_scale * (v_cond - v_uncond)
        else:
            v = v_uncond
        x0_hat = recover_x0(x, v, t, schedule)
        eps_hat = recover_eps(x, v, t, schedule)
        x = schedule.alpha_at(t_next) * x0_hat + schedule.sigma_at(t_next) * eps_hat
    return np.clip(x, 0.0, 1.0)
