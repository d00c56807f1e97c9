"""HTTP client for an external occurrence judge.

One request per vote: a JSON body with the effect name, run-length encoded
mask, frame geometry, and base64 frame payloads (8-bit graymaps). The server
must answer exactly {"answer":"yes"} or {"answer":"no"}. Failed votes (after
retries) are surfaced as JudgeQueryError so the 3-vote majority in
metrics.eor records them as errored votes instead of crashing the run.
"""

from __future__ import annotations

import base64
import json
import time
import urllib.error
import urllib.request

import numpy as np

from .synthvfx import EffectKind


class JudgeQueryError(RuntimeError):
    pass


def mask_rle(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, starting with the length of the initial run of
    zeros (possibly 0)."""
    flat = np.asarray(mask).astype(np.uint8).reshape(-1)
    runs = []
    current, count = 0, 0
    for value in flat:
        if value == current:
            count += 1
        else:
            runs.append(count)
            current, count = value, 1
    runs.append(count)
    return runs


def encode_query(video: np.ndarray, effect: EffectKind, mask: np.ndarray) -> bytes:
    video = np.asarray(video, dtype=np.float64)
    if video.ndim == 4 and video.shape[-1] == 1:
        video = video[..., 0]
    frames_b64 = [
        base64.b64encode(np.round(np.clip(f, 0.0, 1.0) * 255.0).astype(np.uint8).tobytes()).decode("ascii")
        for f in video
    ]
    body = {
        "effect": effect.value,
        "height": int(video.shape[1]),
        "width": int(video.shape[2]),
        "mask_rle": mask_rle(mask),
        "frames_b64": frames_b64,
    }
    return json.dumps(body).encode("utf-8")


def remote_judge_query(
    endpoint: str,
    video: np.ndarray,
    effect: EffectKind,
    mask: np.ndarray,
    timeout: float = 10.0,
    retries: int = 2,
    backoff: float = 0.25,
) -> bool:
    """One vote from the remote judge; retries with exponential backoff."""
    payload = encode_query(video, effect, mask)
    last_error = None
    for attempt in range(retries + 1):
        try:
            req = urllib.request.Request(
                endpoint, data=payload, headers={"Content-Type": "application/json"}, method="POST"
            )
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                raw = resp.read().decode("utf-8")
            reply = json.loads(raw)
            if not isinstance(reply, dict) or set(reply) != {"answer"} or reply["answer"] not in ("yes", "no"):
                raise JudgeQueryError(f"malformed judge response: {raw!r}")
            return reply["answer"] == "yes"
        except JudgeQueryError:
            raise
        except (urllib.error.URLError, OSError, ValueError) as e:
            last_error = e
            if attempt < retries:
                time.sleep(backoff * (2**attempt))
    raise JudgeQueryError(f"judge query failed after {retries + 1} attempts: {last_error}")


def make_remote_judge(endpoint: str, timeout: float = 10.0, retries: int = 2, backoff: float = 0.25):
    """Judge callable for metrics.eor backed by the wire protocol."""

    def judge(video, effect, mask):
        return remote_judge_query(endpoint, video, effect, mask, timeout=timeout, retries=retries, backoff=backoff)

    return judge
