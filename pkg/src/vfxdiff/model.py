"""Toy diffusion-transformer denoiser over patchified pixel-space video tokens.

Blocks are pre-norm: IIF-masked multi-head attention (base LoRA on Q/K/V/O for
all rows, a shared spatial-condition LoRA added on Q/K/V for spatial-token
rows), then a feed-forward of two LoRA-MoE layers around a GELU. Condition
tokens ride through every block as full sequence members; the latent span is
unembedded to the v prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import conditioning as cond
from . import lora_moe as moe
from .numerics import (
    Tensor,
    add,
    add_bias,
    concat_cols,
    concat_rows,
    constant,
    gelu,
    masked_softmax_rows,
    matmul,
    mul_const,
    parameter,
    permute_flat,
    rmsnorm_rows,
    scale,
    slice_cols,
    slice_rows,
    transpose,
)


@dataclass
class MoEConfig:
    n_experts: int = 4
    top_k: int = 1
    rank: int = 4
    alpha: float = 4.0


@dataclass
class ModelConfig:
    frames: int = 8
    height: int = 24
    width: int = 24
    channels: int = 1
    patch: int = 4
    dim: int = 64
    heads: int = 2
    blocks: int = 4
    ffn_dim: int = 128
    text_len: int = 2
    vocab: int = 4
    moe: MoEConfig = field(default_factory=MoEConfig)

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(f"frame extents {self.height}x{self.width} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def grid_h(self) -> int:
        return self.height // self.patch

    @property
    def grid_w(self) -> int:
        return self.width // self.patch

    @property
    def spatial_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def latent_tokens(self) -> int:
        return self.frames * self.spatial_tokens

    @property
    def patch_elems(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def video_shape(self) -> tuple[int, int, int, int]:
        return (self.frames, self.height, self.width, self.channels)


# ---------------------------------------------------------------------------
# patch layout and positional tables
# ---------------------------------------------------------------------------


def patch_permutation(config: ModelConfig) -> np.ndarray:
    """Flat indices mapping video (F,H,W,C) onto tokens (L, p*p*C): token t is
    the row-major flattening of one p x p x C patch."""
    f_idx, y_idx, x_idx, c_idx = np.meshgrid(
        np.arange(config.frames),
        np.arange(config.height),
        np.arange(config.width),
        np.arange(config.channels),
        indexing="ij",
    )
    gy, py = y_idx // config.patch, y_idx % config.patch
    gx, px = x_idx // config.patch, x_idx % config.patch
    token = (f_idx * config.grid_h + gy) * config.grid_w + gx
    elem = (py * config.patch + px) * config.channels + c_idx
    dest = token * config.patch_elems + elem
    perm = np.empty(dest.size, dtype=np.int64)
    perm[dest.reshape(-1)] = np.arange(dest.size)
    return perm


def patchify(video: np.ndarray, config: ModelConfig, perm: np.ndarray | None = None) -> np.ndarray:
    video = np.asarray(video, dtype=np.float64)
    if video.shape != config.video_shape:
        raise ValueError(f"video shape {video.shape} != configured {config.video_shape}")
    if perm is None:
        perm = patch_permutation(config)
    return video.reshape(-1)[perm].reshape(config.latent_tokens, config.patch_elems)


def unpatchify(tokens: np.ndarray, config: ModelConfig, perm: np.ndarray | None = None) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape != (config.latent_tokens, config.patch_elems):
        raise ValueError(f"token shape {tokens.shape} != ({config.latent_tokens}, {config.patch_elems})")
    if perm is None:
        perm = patch_permutation(config)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return tokens.reshape(-1)[inv].reshape(config.video_shape)


def sinusoid_rows(positions, dim: int) -> np.ndarray:
    """Interleaved sin/cos embedding: out[p, 2i] = sin(p * w_i), out[p, 2i+1] =
    cos(p * w_i) with w_i = 10000^(-i / (dim/2))."""
    if dim % 2:
        raise ValueError(f"sinusoid dim must be even, got {dim}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = pos * freqs[None, :]
    out = np.zeros((pos.shape[0], dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def _pos_chunks(dim: int) -> tuple[int, int, int]:
    c = (dim // 3) & ~1
    return dim - 2 * c, c, c


def position_table(config: ModelConfig) -> np.ndarray:
    """L x d sinusoidal table over (frame, grid row, grid col) coordinate chunks."""
    cf, cr, cc = _pos_chunks(config.dim)
    f_emb = sinusoid_rows(np.arange(config.frames), cf)
    r_emb = sinusoid_rows(np.arange(config.grid_h), cr)
    c_emb = sinusoid_rows(np.arange(config.grid_w), cc)
    table = np.zeros((config.frames, config.grid_h, config.grid_w, config.dim))
    table[..., :cf] = f_emb[:, None, None, :]
    table[..., cf : cf + cr] = r_emb[None, :, None, :]
    table[..., cf + cr :] = c_emb[None, None, :, :]
    return table.reshape(config.latent_tokens, config.dim)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class DenoiserParams:
    """All trainable tensors, registered under stable dotted names.

    The spatial-condition LoRA is one shared set per block applied to every
    condition's spatial tokens; zero-initialized output projections make the
    initial prediction exactly zero.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.named: dict[str, Tensor] = {}
        d, d_ff = config.dim, config.ffn_dim
        m = config.moe

        self.patch_embed_w = self._reg("patch_embed.w", rng.normal(0.0, 0.02, (config.patch_elems, d)))
        self.patch_embed_b = self._reg("patch_embed.b", np.zeros((1, d)))
        self.patch_unembed_w = self._reg("patch_unembed.w", np.zeros((d, config.patch_elems)))
        self.patch_unembed_b = self._reg("patch_unembed.b", np.zeros((1, config.patch_elems)))
        self.time_proj_w = self._reg("time_proj.w", rng.normal(0.0, 0.02, (d, d)))
        self.time_proj_b = self._reg("time_proj.b", np.zeros((1, d)))
        self.effect_table = self._reg("effect_table", rng.normal(0.0, 0.02, (config.vocab, d)))
        self.text_pos = self._reg("text_pos", rng.normal(0.0, 0.02, (config.text_len, d)))
        self.spatial_proj = self._reg("spatial_proj", rng.normal(0.0, 0.02, (1, d)))

        self.blocks = []
        for bi in range(config.blocks):
            blk = {}
            for name in ("q", "k", "v", "o"):
                w_init = np.zeros((d, d)) if name == "o" else rng.normal(0.0, 0.02, (d, d))
                blk[f"{name}_w"] = self._reg(f"block{bi}.attn.{name}.w", w_init)
                blk[f"{name}_b"] = self._reg(f"block{bi}.attn.{name}.b", np.zeros((1, d)))
                blk[f"{name}_lora"] = self._reg_lora(f"block{bi}.attn.{name}.lora", d, d, m, rng)
            for name in ("q", "k", "v"):
                blk[f"{name}_slora"] = self._reg_lora(f"block{bi}.attn.{name}.spatial_lora", d, d, m, rng)
            blk["ffn1"] = self._reg_moe(f"block{bi}.ffn1", d, d_ff, m, rng)
            blk["ffn2"] = self._reg_moe(f"block{bi}.ffn2", d_ff, d, m, rng)
            self.blocks.append(blk)

    def _reg(self, name: str, data) -> Tensor:
        t = parameter(data)
        self.named[name] = t
        return t

    def _reg_lora(self, prefix: str, d_in: int, d_out: int, m: MoEConfig, rng) -> moe.LoraExpert:
        e = moe.init_lora(d_in, d_out, m.rank, m.alpha, rng)
        self.named[f"{prefix}.a"] = e.a
        self.named[f"{prefix}.b"] = e.b
        return e

    def _reg_moe(self, prefix: str, d_in: int, d_out: int, m: MoEConfig, rng) -> moe.MoELayerParams:
        layer = moe.init_moe_layer(d_in, d_out, m.n_experts, m.top_k, m.rank, m.alpha, rng)
        self.named[f"{prefix}.w"] = layer.weight
        self.named[f"{prefix}.b"] = layer.bias
        self.named[f"{prefix}.gate"] = layer.gate
        for i, e in enumerate(layer.experts):
            self.named[f"{prefix}.expert{i}.a"] = e.a
            self.named[f"{prefix}.expert{i}.b"] = e.b
        return layer


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------


class Denoiser:
    """Multi-condition v-predictor; `use_iif_mask=False` ablates to full attention."""

    def __init__(self, config: ModelConfig, seed: int = 0, use_iif_mask: bool = True):
        self.config = config
        self.params = DenoiserParams(config, seed)
        self.use_iif_mask = use_iif_mask
        self._perm = patch_permutation(config)
        self._inv_perm = np.empty_like(self._perm)
        self._inv_perm[self._perm] = np.arange(self._perm.size)
        self._pos_table = position_table(config)
        self._first_frame_pos = self._pos_table[: config.spatial_tokens]
        self._mask_cache: dict[int, np.ndarray] = {}
        self._blocked_cache: dict[int, np.ndarray] = {}
        self._spatial_rows_cache: dict[int, np.ndarray] = {}

    def parameters(self) -> dict[str, Tensor]:
        return self.params.named

    def layout_for(self, n_conditions: int) -> cond.TokenLayout:
        c = self.config
        return cond.build_layout(n_conditions, c.text_len, c.spatial_tokens, c.latent_tokens)

    def _mask_for(self, n_conditions: int) -> tuple[np.ndarray, np.ndarray]:
        if n_conditions not in self._mask_cache:
            layout = self.layout_for(n_conditions)
            mask = cond.build_iif_mask(layout) if self.use_iif_mask else np.zeros((layout.total_len,) * 2)
            self._mask_cache[n_conditions] = mask
            self._blocked_cache[n_conditions] = np.isneginf(mask)
            self._spatial_rows_cache[n_conditions] = cond.condition_row_mask(layout, "spatial")
        return self._mask_cache[n_conditions], self._blocked_cache[n_conditions]

    def time_embedding(self, t: int) -> Tensor:
        c = self.config
        if not 1 <= t <= 10_000:
            raise ValueError(f"timestep {t} out of range [1, 10000]")
        sin = constant(sinusoid_rows([t], c.dim))
        return add_bias(matmul(sin, self.params.time_proj_w), self.params.time_proj_b)

    def _projection(self, x: Tensor, blk: dict, name: str, spatial_rows: np.ndarray | None) -> Tensor:
        y = add_bias(matmul(x, blk[f"{name}_w"]), blk[f"{name}_b"])
        y = add(y, moe.expert_forward(x, blk[f"{name}_lora"]))
        if name != "o" and spatial_rows is not None:
            y = add(y, mul_const(moe.expert_forward(x, blk[f"{name}_slora"]), spatial_rows))
        return y

    def _attention(
        self, x: Tensor, blk: dict, mask: np.ndarray, blocked: np.ndarray, spatial_rows: np.ndarray | None
    ) -> Tensor:
        c = self.config
        q = self._projection(x, blk, "q", spatial_rows)
        k = self._projection(x, blk, "k", spatial_rows)
        v = self._projection(x, blk, "v", spatial_rows)
        heads = []
        for h in range(c.heads):
            lo, hi = h * c.head_dim, (h + 1) * c.head_dim
            qh, kh, vh = slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi)
            # scores = (q k^T) / sqrt(d_k); the scaling rides on the thin q factor
            scores = matmul(scale(qh, 1.0 / math.sqrt(c.head_dim)), transpose(kh))
            attn = masked_softmax_rows(scores, mask, blocked=blocked)
            heads.append(matmul(attn, vh))
        merged = concat_cols(heads) if len(heads) > 1 else heads[0]
        return self._projection(merged, blk, "o", None)

    def forward_graph(
        self,
        x_t: np.ndarray,
        t: int,
        conditions: list[cond.ConditionPair],
        train_mode: bool = True,
    ) -> tuple[Tensor, list[Tensor]]:
        """Build the graph for one noisy video; returns (v-prediction node,
        per-MoE-layer auxiliary loss nodes)."""
        c = self.config
        p = self.params
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape != c.video_shape:
            raise ValueError(f"video shape {x_t.shape} != configured {c.video_shape}")
        for pair in conditions:
            if pair.mask.shape != (c.height, c.width):
                raise ValueError(f"condition mask {pair.mask.shape} != frame extents {(c.height, c.width)}")
        n = len(conditions)
        mask, blocked = self._mask_for(n)
        spatial_rows = self._spatial_rows_cache[n] if n else None
        mode = moe.TRAIN if train_mode else moe.INFER

        tokens = permute_flat(constant(x_t), self._perm, (c.latent_tokens, c.patch_elems))
        latent = add_bias(matmul(tokens, p.patch_embed_w), p.patch_embed_b)
        latent = add(latent, constant(self._pos_table))
        latent = add_bias(latent, self.time_embedding(t))

        parts = []
        if n:
            text_blocks = cond.encode_text_conditions([pr.effect_id for pr in conditions], p.effect_table, p.text_pos)
            spatial_blocks = cond.encode_spatial_conditions(
                [pr.mask for pr in conditions], c.patch, p.spatial_proj, constant(self._first_frame_pos)
            )
            for tb, sb in zip(text_blocks, spatial_blocks):
                parts.extend((tb, sb))
        parts.append(latent)
        seq = concat_rows(parts) if len(parts) > 1 else parts[0]

        aux_nodes = []
        for blk in p.blocks:
            attn_out = self._attention(rmsnorm_rows(seq), blk, mask, blocked, spatial_rows)
            seq = add(seq, attn_out)
            h1, stats1 = moe.moe_forward(rmsnorm_rows(seq), blk["ffn1"], mode)
            h2, stats2 = moe.moe_forward(gelu(h1), blk["ffn2"], mode)
            seq = add(seq, h2)
            aux_nodes.extend((stats1.aux, stats2.aux))

        latent_span = self.layout_for(n).latent_span
        final = rmsnorm_rows(slice_rows(seq, latent_span.start, latent_span.stop))
        out_tokens = add_bias(matmul(final, p.patch_unembed_w), p.patch_unembed_b)
        v_hat = permute_flat(out_tokens, self._inv_perm, c.video_shape)
        return v_hat, aux_nodes

    def predict_v(self, x_t: np.ndarray, t: int, conditions: list[cond.ConditionPair]) -> np.ndarray:
        """Forward-only v prediction (full expert activation, no gradients kept)."""
        v_hat, _ = self.forward_graph(x_t, t, conditions, train_mode=False)
        return v_hat.data
