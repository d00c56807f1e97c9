"""Controllability metrics: pyramidal block-matching optical flow, regional
dynamic degree (RDD), effect controllability (ECR) from first/last frame diffs,
and effect occurrence (EOR) by 3-vote judge majority.

The flow estimator is classical coarse-to-fine block matching; RDD implements
mean in-mask flow magnitude over consecutive frame pairs on top of it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .synthvfx import EffectKind


def _frames(video: np.ndarray) -> np.ndarray:
    """(F,H,W) float frames from (F,H,W) or (F,H,W,1)."""
    v = np.asarray(video, dtype=np.float64)
    if v.ndim == 4:
        if v.shape[-1] != 1:
            raise ValueError(f"expected single-channel video, got shape {v.shape}")
        v = v[..., 0]
    if v.ndim != 3:
        raise ValueError(f"expected (F,H,W[,1]) video, got shape {v.shape}")
    return v


# ---------------------------------------------------------------------------
# optical flow
# ---------------------------------------------------------------------------


def _avg_pool2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    if h % 2 or w % 2:
        img = np.pad(img, ((0, h % 2), (0, w % 2)), mode="edge")
        h, w = img.shape
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def _block_match(a: np.ndarray, b: np.ndarray, init_flow: np.ndarray, block: int, search: int) -> np.ndarray:
    h, w = a.shape
    out = np.zeros_like(init_flow)
    deltas = [(dy, dx) for dy in range(-search, search + 1) for dx in range(-search, search + 1)]
    for y0 in range(0, h, block):
        y1 = min(y0 + block, h)
        for x0 in range(0, w, block):
            x1 = min(x0 + block, w)
            patch = a[y0:y1, x0:x1]
            # a tiny displacement penalty settles flat regions at zero flow
            penalty = 1e-4 * patch.size
            prior_dx = int(round(float(init_flow[y0:y1, x0:x1, 0].mean())))
            prior_dy = int(round(float(init_flow[y0:y1, x0:x1, 1].mean())))
            candidates = {(prior_dy + dy, prior_dx + dx) for dy, dx in deltas}
            candidates.update(deltas)  # the zero-centered window stays reachable under bad priors
            ordered = sorted(candidates, key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))
            best, best_score = ordered[0], np.inf
            for dy, dx in ordered:
                yy = np.clip(np.arange(y0, y1) + dy, 0, h - 1)
                xx = np.clip(np.arange(x0, x1) + dx, 0, w - 1)
                diff = patch - b[np.ix_(yy, xx)]
                score = float((diff * diff).sum()) + penalty * (dy * dy + dx * dx)
                if score < best_score:
                    best, best_score = (dy, dx), score
            out[y0:y1, x0:x1, 0] = best[1]
            out[y0:y1, x0:x1, 1] = best[0]
    return out


def estimate_flow(
    frame_a: np.ndarray,
    frame_b: np.ndarray,
    levels: int = 3,
    block: int = 4,
    search: int = 3,
) -> np.ndarray:
    """Dense displacement field (H,W,2) with [...,0]=x and [...,1]=y components,
    by coarse-to-fine block matching with bilinear upsampling of coarse flow."""
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    if a.ndim != 2 or a.shape != b.shape:
        raise ValueError(f"estimate_flow needs equal 2-d frames, got {a.shape} vs {b.shape}")
    pyr_a, pyr_b = [a], [b]
    for _ in range(levels - 1):
        if min(pyr_a[-1].shape) < 2 * block:
            break
        pyr_a.append(_avg_pool2(pyr_a[-1]))
        pyr_b.append(_avg_pool2(pyr_b[-1]))
    flow = np.zeros(pyr_a[-1].shape + (2,))
    for lvl in range(len(pyr_a) - 1, -1, -1):
        al, bl = pyr_a[lvl], pyr_b[lvl]
        if flow.shape[:2] != al.shape:
            flow = np.stack(
                [2.0 * _bilinear_resize(flow[..., i], al.shape[0], al.shape[1]) for i in range(2)],
                axis=-1,
            )
        flow = _block_match(al, bl, flow, block, search)
    return flow


def _flow_magnitudes(video: np.ndarray) -> np.ndarray:
    frames = _frames(video)
    if frames.shape[0] < 2:
        raise ValueError("need at least 2 frames for flow")
    mags = []
    for i in range(frames.shape[0] - 1):
        flow = estimate_flow(frames[i], frames[i + 1])
        mags.append(np.hypot(flow[..., 0], flow[..., 1]))
    return np.stack(mags)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def rdd(video: np.ndarray, mask: np.ndarray) -> float:
    """Regional dynamic degree: (1/N) sum_t (1/|s|) sum_{(x,y) in s} ||flow||_2
    over the N consecutive frame pairs."""
    m = np.asarray(mask).astype(bool)
    if not m.any():
        raise ValueError("empty region")
    mags = _flow_magnitudes(video)
    return float(np.mean([mag[m].mean() for mag in mags]))


def dynamic_degree(video: np.ndarray) -> float:
    """Mean flow magnitude over all pixels and frame pairs."""
    return float(_flow_magnitudes(video).mean())


@dataclass(frozen=True)
class EcrConfig:
    """Thresholds of the first/last diff procedure; defaults are the strict
    as-published values (inner < 0.5 and outer < 0.1, 80% selections)."""

    inner_threshold: float = 0.5
    outer_threshold: float = 0.1
    keep_fraction: float = 0.8


STRICT_PAPER = EcrConfig()


def _selected_mean_square(values: np.ndarray, fraction: float, largest: bool) -> float:
    n = values.size
    count = max(1, int(fraction * n))
    keys = -values if largest else values
    order = np.lexsort((np.arange(n), keys))  # value first, pixel index breaks ties
    return float((values[order[:count]] ** 2).mean())


def ecr_single(video: np.ndarray, mask: np.ndarray, config: EcrConfig = STRICT_PAPER) -> tuple[float, float, bool]:
    """(inner_diff, outer_diff, controllable) from |last - first| per pixel:
    inner uses the top keep_fraction of in-mask diffs, outer the bottom
    keep_fraction outside; controllable when both sit under their thresholds."""
    frames = _frames(video)
    m = np.asarray(mask).astype(bool)
    if m.shape != frames.shape[1:]:
        raise ValueError(f"mask shape {m.shape} != frame shape {frames.shape[1:]}")
    if not m.any() or m.all():
        raise ValueError("degenerate mask: must be non-empty and not full-frame")
    diff = np.abs(frames[-1] - frames[0])
    inner = _selected_mean_square(diff[m], config.keep_fraction, largest=True)
    outer = _selected_mean_square(diff[~m], config.keep_fraction, largest=False)
    controllable = inner < config.inner_threshold and outer < config.outer_threshold
    return inner, outer, controllable


# ---------------------------------------------------------------------------
# occurrence judging
# ---------------------------------------------------------------------------

Judge = Callable[[np.ndarray, EffectKind, np.ndarray], bool]


@dataclass
class JudgeVerdict:
    """Majority of three votes; votes that errored are recorded as None, and
    fewer than 2 valid (or a 1-1 split) marks the sample unevaluable."""

    answer: Optional[bool]
    votes: tuple[Optional[bool], ...]

    @property
    def unevaluable(self) -> bool:
        return self.answer is None


def eor(video: np.ndarray, effect: EffectKind, mask: np.ndarray, judge: Judge, n_votes: int = 3) -> JudgeVerdict:
    """Query the judge three times and take the most frequent answer."""
    votes: list[Optional[bool]] = []
    for _ in range(n_votes):
        try:
            votes.append(bool(judge(video, effect, mask)))
        except Exception:
            votes.append(None)
    valid = [v for v in votes if v is not None]
    if len(valid) < 2:
        return JudgeVerdict(None, tuple(votes))
    yes, no = valid.count(True), valid.count(False)
    if yes == no:
        return JudgeVerdict(None, tuple(votes))
    return JudgeVerdict(yes > no, tuple(votes))


def procedural_judge(video: np.ndarray, effect: EffectKind, mask: np.ndarray) -> bool:
    """Deterministic stand-in for a multimodal judge, keyed to the procedural
    effect signatures:

    fade    in-mask mean at the last frame <= 0.3x the first (and below it),
            monotone non-increasing within 0.02 slack
    invert  correlation of first vs last in-mask pixels <= -0.5
    grow    bright (>0.5) in-mask pixel count at the last frame >= 1.5x the
            first, and strictly larger
    blink   in-mask mean alternates: >= 2 sign changes of its discrete
            derivative (ignoring near-zero steps)
    """
    frames = _frames(video)
    m = np.asarray(mask).astype(bool)
    if not m.any():
        raise ValueError("empty mask")
    means = np.array([fr[m].mean() for fr in frames])

    if effect is EffectKind.FADE:
        monotone = bool(np.all(means[1:] <= means[:-1] + 0.02))
        return monotone and means[-1] <= 0.3 * means[0] and means[-1] < means[0]
    if effect is EffectKind.INVERT:
        first, last = frames[0][m], frames[-1][m]
        if first.std() == 0.0 or last.std() == 0.0:
            return False
        corr = float(np.corrcoef(first, last)[0, 1])
        return corr <= -0.5
    if effect is EffectKind.GROW:
        c0 = int((frames[0][m] > 0.5).sum())
        c1 = int((frames[-1][m] > 0.5).sum())
        return c1 >= 1.5 * c0 and c1 > c0
    if effect is EffectKind.BLINK:
        steps = np.diff(means)
        signs = np.sign(steps[np.abs(steps) > 0.005])
        changes = int((signs[1:] * signs[:-1] < 0).sum())
        return changes >= 2
    raise ValueError(f"unknown effect kind {effect!r}")


@dataclass
class MetricReport:
    """One evaluated (video, condition) pair."""

    sample_id: str
    rdd: float
    inner_diff: float
    outer_diff: float
    controllable: bool
    eor_answer: Optional[bool]
    dynamic_degree: float


def evaluate_condition(
    sample_id: str,
    video: np.ndarray,
    effect: EffectKind,
    mask: np.ndarray,
    judge: Judge,
    ecr_config: EcrConfig = STRICT_PAPER,
) -> MetricReport:
    """All metrics for one condition of one video."""
    inner, outer, controllable = ecr_single(video, mask, ecr_config)
    verdict = eor(video, effect, mask, judge)
    return MetricReport(
        sample_id=sample_id,
        rdd=rdd(video, mask),
        inner_diff=inner,
        outer_diff=outer,
        controllable=controllable,
        eor_answer=verdict.answer,
        dynamic_degree=dynamic_degree(video),
    )
