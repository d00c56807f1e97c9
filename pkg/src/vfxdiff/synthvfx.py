"""Procedural effect videos with ground-truth masks, plus the pseudo-multi-effect
augmentation (plain / one-effect splice / two-effect splice with per-segment
temporal freezing).

Every record keeps frame 0 equal to its reference frame, and all temporal
pixel changes stay inside the union of its condition masks.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .conditioning import ConditionPair


class EffectKind(enum.Enum):
    FADE = "fade"
    INVERT = "invert"
    GROW = "grow"
    BLINK = "blink"


EFFECT_ORDER = tuple(EffectKind)
EFFECT_IDS = {kind: i for i, kind in enumerate(EFFECT_ORDER)}


def effect_from_name(name: str) -> EffectKind:
    try:
        return EffectKind(name)
    except ValueError:
        raise ValueError(f"unknown effect {name!r}; expected one of {[k.value for k in EFFECT_ORDER]}") from None


@dataclass
class SynthConfig:
    frames: int = 8
    height: int = 24
    width: int = 24
    background: float = 0.05
    blob_intensity: tuple[float, float] = (0.75, 0.95)
    blob_radius: tuple[int, int] = (3, 4)


@dataclass
class Provenance:
    tag: str  # plain | crop-splice-1 | crop-splice-2
    frozen: tuple[bool, ...] = ()
    cut: int | None = None  # splice column; segment 0 is [0, cut), segment 1 is [cut, W)


@dataclass
class SampleRecord:
    """Reference frame, conditions, target video (F,H,W,1), and provenance."""

    id: str
    reference: np.ndarray
    conditions: list[ConditionPair]
    target: np.ndarray
    provenance: Provenance = field(default_factory=lambda: Provenance("plain"))

    @property
    def effects(self) -> list[EffectKind]:
        return [EFFECT_ORDER[c.effect_id] for c in self.conditions]


def _disk(height: int, width: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2


def render_sample(effect: EffectKind, rng: np.random.Generator, config: SynthConfig | None = None) -> SampleRecord:
    """One single-effect record: 1-2 bright blobs on a dark background, the
    effect applied across frames inside a rectangular mask around one blob.

    Fade scales in-mask intensity linearly to 0; Invert blends linearly toward
    1 - v; Grow doubles the blob radius linearly; Blink toggles the blob on and
    off with a 2-frame period. Frame 0 is always the unmodified scene.
    """
    cfg = config or SynthConfig()
    f, h, w = cfg.frames, cfg.height, cfg.width
    radius = int(rng.integers(cfg.blob_radius[0], cfg.blob_radius[1] + 1))
    intensity = float(rng.uniform(*cfg.blob_intensity))

    # For Grow the rectangle must contain the doubled disk.
    half = 2 * radius + 1 if effect is EffectKind.GROW else radius + int(rng.integers(1, 3))
    half_max = (min(h, w) - 2) // 2
    if effect is EffectKind.GROW and half > half_max:
        raise ValueError(f"blob radius {radius} too large for {h}x{w} frames with a doubling effect")
    half = min(half, half_max)
    cy = int(rng.integers(half, h - half))
    cx = int(rng.integers(half, w - half))
    mask = np.zeros((h, w))
    mask[cy - half : cy + half + 1, cx - half : cx + half + 1] = 1.0
    in_mask = mask.astype(bool)

    base = np.full((h, w), cfg.background)
    base[_disk(h, w, cy, cx, radius)] = intensity

    if rng.random() < 0.5:  # optional second, static blob away from the mask
        for _ in range(20):
            r2 = int(rng.integers(2, 4))
            y2 = int(rng.integers(r2, h - r2))
            x2 = int(rng.integers(r2, w - r2))
            d2 = _disk(h, w, y2, x2, r2)
            if not (d2 & in_mask).any():
                base[d2] = float(rng.uniform(0.55, 0.75))
                break

    video = np.repeat(base[None, :, :], f, axis=0)
    for k in range(f):
        lam = k / (f - 1)
        if effect is EffectKind.FADE:
            video[k][in_mask] = base[in_mask] * (1.0 - lam)
        elif effect is EffectKind.INVERT:
            video[k][in_mask] = (1.0 - lam) * base[in_mask] + lam * (1.0 - base[in_mask])
        elif effect is EffectKind.GROW:
            grown = np.full((h, w), cfg.background)
            grown[_disk(h, w, cy, cx, radius * (1.0 + lam))] = intensity
            video[k][in_mask] = grown[in_mask]
        elif effect is EffectKind.BLINK:
            if k % 2 == 1:
                video[k][in_mask] = cfg.background
        else:
            raise ValueError(f"unknown effect kind {effect!r}")

    target = video[..., None]
    return SampleRecord(
        id="",
        reference=target[0].copy(),
        conditions=[ConditionPair(EFFECT_IDS[effect], mask)],
        target=target,
        provenance=Provenance("plain"),
    )


def _cropped_conditions(record: SampleRecord, col_slice: slice) -> list[ConditionPair]:
    """Conditions restricted to a column range; empty-cropped masks are dropped."""
    out = []
    for c in record.conditions:
        m = np.zeros_like(c.mask)
        m[:, col_slice] = c.mask[:, col_slice]
        if m.any():
            out.append(ConditionPair(c.effect_id, m))
    return out


def _pick(pool: list[SampleRecord], rng: np.random.Generator, kind: EffectKind | None = None) -> SampleRecord:
    candidates = pool if kind is None else [r for r in pool if kind in r.effects]
    if not candidates:
        candidates = pool
    return candidates[int(rng.integers(0, len(candidates)))]


def augment_batch(pool: list[SampleRecord], rng: np.random.Generator, freeze_prob: float = 0.2) -> SampleRecord:
    """One augmented record: 20% plain single with its full mask, 40% splice of
    two same-effect records, 40% splice of two different effects. A splice cuts
    at a column in the middle half of the width, left from A and right from B;
    each spliced segment is independently frozen with `freeze_prob` (replaced by
    its first frame, masks zeroed, conditions kept as no-op triggers)."""
    if not pool:
        raise ValueError("augment_batch needs a non-empty pool")
    u = rng.random()
    if u < 0.2:
        src = _pick(pool, rng)
        return SampleRecord(
            id="",
            reference=src.reference.copy(),
            conditions=[ConditionPair(c.effect_id, c.mask.copy()) for c in src.conditions],
            target=src.target.copy(),
            provenance=Provenance("plain"),
        )

    kinds = sorted({k for r in pool for k in r.effects}, key=lambda k: EFFECT_IDS[k])
    if u < 0.6:
        tag = "crop-splice-1"
        kind = kinds[int(rng.integers(0, len(kinds)))]
        rec_a = _pick(pool, rng, kind)
        rec_b = _pick(pool, rng, kind)
    else:
        tag = "crop-splice-2"
        kind_a = kinds[int(rng.integers(0, len(kinds)))]
        others = [k for k in kinds if k is not kind_a] or kinds
        kind_b = others[int(rng.integers(0, len(others)))]
        rec_a = _pick(pool, rng, kind_a)
        rec_b = _pick(pool, rng, kind_b)

    w = rec_a.target.shape[2]
    cut = int(rng.integers(w // 4, 3 * w // 4))
    target = rec_a.target.copy()
    target[:, :, cut:] = rec_b.target[:, :, cut:]
    segments = [
        (slice(0, cut), _cropped_conditions(rec_a, slice(0, cut))),
        (slice(cut, w), _cropped_conditions(rec_b, slice(cut, w))),
    ]

    conditions: list[ConditionPair] = []
    frozen_flags = []
    for col_slice, conds in segments:
        frozen = rng.random() < freeze_prob
        frozen_flags.append(frozen)
        if frozen:
            target[:, :, col_slice] = target[0:1, :, col_slice]
            conds = [ConditionPair(c.effect_id, np.zeros_like(c.mask)) for c in conds]
        conditions.extend(conds)

    return SampleRecord(
        id="",
        reference=target[0].copy(),
        conditions=conditions,
        target=target,
        provenance=Provenance(tag, tuple(frozen_flags), cut=cut),
    )


def make_dataset(
    count: int,
    rng: np.random.Generator,
    kinds: tuple[EffectKind, ...] = EFFECT_ORDER,
    config: SynthConfig | None = None,
) -> list[SampleRecord]:
    """Balanced single-effect records, reproducible via per-record seeds spawned
    from the master generator."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    seeds = rng.integers(0, 2**63, size=count)
    records = []
    for i in range(count):
        kind = kinds[i % len(kinds)]
        rec = render_sample(kind, np.random.default_rng(int(seeds[i])), config)
        rec.id = f"{kind.value}-{i:04d}"
        records.append(rec)
    return records
