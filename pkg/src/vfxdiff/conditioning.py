"""Spatial-aware conditioning: token layout, IIF attention mask, and encoders.

The token sequence is [text_1, spatial_1, ..., text_N, spatial_N, latent].
The IIF (independent-information-flow) mask lets tokens of one condition pair
attend only within the pair, and latent tokens attend to the latent span plus
every text span; everything else, including latent-to-spatial, is blocked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, add, constant, embed_rows, matmul

NEG_INF = -np.inf


@dataclass(frozen=True)
class Span:
    start: int
    stop: int

    @property
    def length(self) -> int:
        return self.stop - self.start

    def indices(self) -> range:
        return range(self.start, self.stop)


@dataclass(frozen=True, eq=False)
class ConditionPair:
    """One control signal: an effect vocabulary index plus an HxW binary mask."""

    effect_id: int
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise ValueError(f"condition mask must be HxW, got shape {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise ValueError("condition mask values must be 0 or 1")
        object.__setattr__(self, "mask", m.astype(np.float64))


@dataclass(frozen=True)
class TokenLayout:
    """Spans of the concatenated sequence: N condition pairs, then the latent."""

    text_spans: tuple[Span, ...]
    spatial_spans: tuple[Span, ...]
    latent_span: Span

    @property
    def n_conditions(self) -> int:
        return len(self.text_spans)

    @property
    def total_len(self) -> int:
        return self.latent_span.stop

    def pair_span(self, k: int) -> Span:
        return Span(self.text_spans[k].start, self.spatial_spans[k].stop)


def build_layout(n_conditions: int, text_len: int, spatial_len: int, latent_len: int) -> TokenLayout:
    if n_conditions < 0:
        raise ValueError(f"n_conditions must be >= 0, got {n_conditions}")
    if text_len < 1 or spatial_len < 1:
        raise ValueError(f"span lengths must be >= 1, got text {text_len}, spatial {spatial_len}")
    if latent_len < 1:
        raise ValueError(f"latent length must be >= 1, got {latent_len}")
    text_spans = []
    spatial_spans = []
    cursor = 0
    for _ in range(n_conditions):
        text_spans.append(Span(cursor, cursor + text_len))
        cursor += text_len
        spatial_spans.append(Span(cursor, cursor + spatial_len))
        cursor += spatial_len
    latent = Span(cursor, cursor + latent_len)
    return TokenLayout(tuple(text_spans), tuple(spatial_spans), latent)


def build_iif_mask(layout: TokenLayout) -> np.ndarray:
    """The {0, -inf} attention mask for a layout; entry [i, j] gates i attending to j."""
    l = layout.total_len
    mask = np.full((l, l), NEG_INF)
    for k in range(layout.n_conditions):
        pair = layout.pair_span(k)
        mask[pair.start : pair.stop, pair.start : pair.stop] = 0.0
    lat = layout.latent_span
    mask[lat.start : lat.stop, lat.start : lat.stop] = 0.0
    for text in layout.text_spans:
        mask[lat.start : lat.stop, text.start : text.stop] = 0.0
    return mask


def condition_row_mask(layout: TokenLayout, which: str) -> np.ndarray:
    """Column vector (l x 1) flagging rows of all text or all spatial spans."""
    spans = {"text": layout.text_spans, "spatial": layout.spatial_spans}[which]
    col = np.zeros((layout.total_len, 1))
    for span in spans:
        col[span.start : span.stop] = 1.0
    return col


def encode_text_conditions(effect_ids, embed_table: Tensor, pos: Tensor) -> list[Tensor]:
    """Per-condition text token blocks: the effect's embedding row repeated over
    the prompt length, plus one positional block shared by every condition."""
    t_e, d = pos.shape
    if embed_table.shape[1] != d:
        raise ValueError(f"embedding dim {embed_table.shape[1]} != positional dim {d}")
    vocab = embed_table.shape[0]
    repeat = constant(np.ones((t_e, 1)))
    blocks = []
    for effect_id in effect_ids:
        if not 0 <= int(effect_id) < vocab:
            raise ValueError(f"effect id {effect_id} out of vocabulary of size {vocab}")
        row = embed_rows(embed_table, [int(effect_id)])
        blocks.append(add(matmul(repeat, row), pos))
    return blocks


def pool_mask(mask: np.ndarray, patch: int) -> np.ndarray:
    """Area-average an HxW mask onto the (H/patch)x(W/patch) grid, flattened to (S_p, 1)."""
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape
    if h % patch or w % patch:
        raise ValueError(f"mask extents {h}x{w} not divisible by patch {patch}")
    pooled = mask.reshape(h // patch, patch, w // patch, patch).mean(axis=(1, 3))
    return pooled.reshape(-1, 1)


def encode_spatial_conditions(masks, patch: int, proj: Tensor, first_frame_pos: Tensor) -> list[Tensor]:
    """Per-condition spatial token blocks: pooled mask values through a shared
    1xD projection, plus the latent first-frame positional block."""
    s_p, d = first_frame_pos.shape
    if proj.shape != (1, d):
        raise ValueError(f"spatial projection must be 1x{d}, got {proj.shape}")
    blocks = []
    for mask in masks:
        pooled = pool_mask(mask, patch)
        if pooled.shape[0] != s_p:
            raise ValueError(f"pooled mask has {pooled.shape[0]} patches, expected {s_p}")
        blocks.append(add(matmul(constant(pooled), proj), first_frame_pos))
    return blocks
