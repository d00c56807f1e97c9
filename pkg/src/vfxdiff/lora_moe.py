"""LoRA mixture-of-experts layers: expert decomposition, top-k gating with
full-activation inference, and the balanced-routing auxiliary loss.

Top-k gating zeroes all but the k largest softmax weights per token without
renormalizing the survivors. The auxiliary loss n * sum_i f_i * P_i treats the
routing fractions f (argmax of the full softmax, ties to the lowest index) as
constants; gradient flows only through the mean probabilities P.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    Tensor,
    add,
    add_bias,
    concat_cols,
    concat_rows,
    constant,
    emul,
    masked_softmax_rows,
    matmul,
    mul_const,
    parameter,
    scale,
)

TRAIN = "train"
INFER = "infer"


@dataclass
class LoraExpert:
    """Low-rank update (alpha/rank) * x @ a @ b with a: d x r, b: r x d_out."""

    a: Tensor
    b: Tensor
    alpha: float
    rank: int

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.a.shape[1] != self.rank or self.b.shape[0] != self.rank:
            raise ValueError(f"expert shapes {self.a.shape} / {self.b.shape} disagree with rank {self.rank}")


def init_lora(d_in: int, d_out: int, rank: int, alpha: float, rng: np.random.Generator) -> LoraExpert:
    """A from N(0, 0.02), B zero, so the update is exactly zero at init."""
    a = parameter(rng.normal(0.0, 0.02, size=(d_in, rank)))
    b = parameter(np.zeros((rank, d_out)))
    return LoraExpert(a, b, float(alpha), rank)


def expert_forward(x: Tensor, expert: LoraExpert) -> Tensor:
    """(alpha/rank) * x @ A @ B, with the scaling applied to the rank-r intermediate."""
    return matmul(scale(matmul(x, expert.a), expert.alpha / expert.rank), expert.b)


@dataclass
class MoELayerParams:
    """Base affine layer plus n LoRA experts and a gating projection."""

    weight: Tensor
    bias: Tensor
    experts: list[LoraExpert]
    gate: Tensor
    top_k: int
    mode: str = TRAIN

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def __post_init__(self):
        if self.n_experts < 1:
            raise ValueError("need at least one expert")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k {self.top_k} not in [1, {self.n_experts}]")
        if self.gate.shape != (self.weight.shape[0], self.n_experts):
            raise ValueError(f"gate shape {self.gate.shape} disagrees with {self.n_experts} experts")
        ranks = {e.rank for e in self.experts}
        alphas = {e.alpha for e in self.experts}
        if len(ranks) != 1 or len(alphas) != 1:
            raise ValueError("experts of one layer must share rank and alpha")


def init_moe_layer(
    d_in: int,
    d_out: int,
    n_experts: int,
    top_k: int,
    rank: int,
    alpha: float,
    rng: np.random.Generator,
    weight_scale: float = 0.02,
) -> MoELayerParams:
    weight = parameter(rng.normal(0.0, weight_scale, size=(d_in, d_out)))
    bias = parameter(np.zeros((1, d_out)))
    experts = [init_lora(d_in, d_out, rank, alpha, rng) for _ in range(n_experts)]
    gate = parameter(rng.normal(0.0, 0.02, size=(d_in, n_experts)))
    return MoELayerParams(weight, bias, experts, gate, top_k)


@dataclass
class RoutingStats:
    """Per-batch router statistics: routing fractions f (constant under
    differentiation), mean probabilities P (1 x n graph node), and the
    auxiliary loss node."""

    f: np.ndarray
    P: Tensor
    aux: Tensor = field(default=None)


def _top_k_indicator(probs: np.ndarray, k: int) -> np.ndarray:
    """0/1 mask keeping the k largest entries per row, ties to the lowest index."""
    order = np.argsort(-probs, axis=1, kind="stable")
    keep = np.zeros_like(probs)
    rows = np.arange(probs.shape[0])[:, None]
    keep[rows, order[:, :k]] = 1.0
    return keep


def gate_route(x: Tensor, gate: Tensor, k: int, mode: str) -> tuple[Tensor, Tensor]:
    """Per-token expert weights. Returns (weights, full softmax probs).

    Training keeps the k largest softmax entries per token, zeroing the rest
    without renormalization; inference returns the full softmax.
    """
    n = gate.shape[1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    if mode not in (TRAIN, INFER):
        raise ValueError(f"unknown routing mode {mode!r}")
    logits = matmul(x, gate)
    probs = masked_softmax_rows(logits, np.zeros(logits.shape))
    if mode == INFER or k == n:
        return probs, probs
    weights = mul_const(probs, _top_k_indicator(probs.data, k))
    return weights, probs


def routing_stats(probs: Tensor) -> RoutingStats:
    """f from the argmax of the full softmax (top-1 even when k > 1), P as the
    token-mean probability row; aux filled in by aux_loss."""
    t, n = probs.shape
    winners = np.argmax(probs.data, axis=1)  # ties resolve to the lowest index
    f = np.bincount(winners, minlength=n).astype(np.float64) / t
    mean_rows = constant(np.full((1, t), 1.0 / t))
    p_mean = matmul(mean_rows, probs)
    stats = RoutingStats(f=f, P=p_mean)
    stats.aux = aux_loss(stats)
    return stats


def aux_loss(stats: RoutingStats) -> Tensor:
    """Balanced-routing loss n * sum_i f_i P_i; equals 1 for a uniform router."""
    n = stats.f.size
    return scale(matmul(stats.P, constant(stats.f.reshape(n, 1))), float(n))


def moe_forward(x: Tensor, params: MoELayerParams, mode: str | None = None) -> tuple[Tensor, RoutingStats]:
    """Base(x) + sum_i G(x)_i * E_i(x) per token, plus batch routing stats.

    The expert sum is evaluated batched: with A_cat = [A_1 .. A_n] and
    B_cat = [B_1; ..; B_n], it equals ((x @ A_cat) * expand(G(x)) * alpha/r)
    @ B_cat, where expand repeats each gate weight over its expert's rank
    columns. Zero gate weights zero their expert's block exactly, so unrouted
    experts contribute exactly 0 regardless of their parameters.
    """
    mode = params.mode if mode is None else mode
    base = add_bias(matmul(x, params.weight), params.bias)
    weights, probs = gate_route(x, params.gate, params.top_k, mode)

    n = params.n_experts
    rank = params.experts[0].rank
    scaling = params.experts[0].alpha / rank
    a_cat = concat_cols([e.a for e in params.experts])
    b_cat = concat_rows([e.b for e in params.experts])
    expand = np.zeros((n, n * rank))
    for i in range(n):
        expand[i, i * rank : (i + 1) * rank] = scaling
    gate_cols = matmul(weights, constant(expand))
    expert_term = matmul(emul(matmul(x, a_cat), gate_cols), b_cat)
    return add(base, expert_term), routing_stats(probs)


def lora_layer_forward(x: Tensor, weight: Tensor, bias: Tensor, expert: LoraExpert) -> Tensor:
    """Plain single-LoRA layer: Base(x) + E(x); the n=1 MoE layer reduces to this."""
    return add(add_bias(matmul(x, weight), bias), expert_forward(x, expert))
