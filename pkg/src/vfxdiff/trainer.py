"""Dual-phase training: a single-effect stage, then a fine-tuning stage drawing
through the splice/freeze augmentation, with AdamW updates and whole-set
condition dropout for classifier-free guidance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, training_loss
from .numerics import Tensor, backward, zero_grads
from .synthvfx import SampleRecord, augment_batch


@dataclass
class TrainConfig:
    stage1_steps: int = 2000
    stage2_steps: int = 3000
    lr: float = 1e-4
    beta: float = 0.01
    cond_dropout: float = 0.1
    batch_size: int = 4
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ValueError("stage steps must be >= 0")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ValueError(f"condition dropout must be in [0, 1], got {self.cond_dropout}")


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamWState:
    """One adaptive-moment update with decoupled weight decay, in place."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m[:] = beta1 * m + (1 - beta1) * g
        v[:] = beta2 * v + (1 - beta2) * (g * g)
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


@dataclass
class TraceRow:
    step: int
    stage: int
    mse: float
    aux_term: float  # beta * mean per-layer aux loss

    @property
    def total(self) -> float:
        return self.mse + self.aux_term


def draw_stage1_batch(pool: list[SampleRecord], rng: np.random.Generator, size: int) -> list[SampleRecord]:
    """Plain single-effect records only."""
    plain = [r for r in pool if r.provenance.tag == "plain" and len(r.conditions) == 1]
    if not plain:
        raise ValueError("pool has no plain single-effect records")
    return [plain[int(rng.integers(0, len(plain)))] for _ in range(size)]


def draw_stage2_batch(pool: list[SampleRecord], rng: np.random.Generator, size: int) -> list[SampleRecord]:
    """Everything goes through the augmentation mixture."""
    return [augment_batch(pool, rng) for _ in range(size)]


def train_dual_phase(
    pool: list[SampleRecord],
    model,
    schedule: NoiseSchedule,
    config: TrainConfig,
) -> list[TraceRow]:
    """Run both stages, mutating the model parameters; returns the loss trace."""
    if not pool:
        raise ValueError("training pool is empty")
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    state = AdamWState()
    trace: list[TraceRow] = []
    stages = ((1, config.stage1_steps, draw_stage1_batch), (2, config.stage2_steps, draw_stage2_batch))
    step_index = 0
    for stage, steps, draw in stages:
        for _ in range(steps):
            batch = draw(pool, rng, config.batch_size)
            loss, diags = training_loss(
                batch,
                model,
                schedule,
                rng,
                beta=config.beta,
                cond_dropout=config.cond_dropout,
                train_mode=True,
            )
            if not np.isfinite(loss.item()):
                raise RuntimeError(f"non-finite loss at step {step_index}")
            zero_grads(params)
            backward(loss)
            grads = {
                name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()
            }
            adamw_step(params, grads, state, config.lr, weight_decay=config.weight_decay)
            mse_mean = float(np.mean([d.mse for d in diags]))
            aux_mean = float(np.mean([d.aux_mean for d in diags]))
            trace.append(TraceRow(step=step_index, stage=stage, mse=mse_mean, aux_term=config.beta * aux_mean))
            step_index += 1
    return trace
