"""On-disk formats: binary P5 graymap frames, the OFX1 checkpoint container,
and dataset manifests.

Frames quantize unit-interval intensities to 8 bits (round-trip error at most
1/510 per pixel); masks use {0, 255}. Checkpoints are magic "OFX1", a version
word, a JSON config snapshot, then a length-prefixed table of named
little-endian float64 arrays; round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conditioning import ConditionPair
from .synthvfx import EFFECT_ORDER, Provenance, SampleRecord

CHECKPOINT_MAGIC = b"OFX1"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# P5 graymap frames
# ---------------------------------------------------------------------------


def save_frame_pgm(path, frame: np.ndarray) -> None:
    """Write an HxW unit-interval frame as binary P5 with maxval 255."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3 and frame.shape[-1] == 1:
        frame = frame[..., 0]
    if frame.ndim != 2:
        raise FormatError(f"frame must be HxW, got shape {frame.shape}")
    if frame.min() < 0.0 or frame.max() > 1.0:
        raise FormatError("frame values must lie in [0, 1]")
    h, w = frame.shape
    payload = np.round(frame * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(payload.tobytes())


def load_frame_pgm(path) -> np.ndarray:
    """Read a binary P5 graymap back to unit-interval floats."""
    with open(path, "rb") as fh:
        blob = fh.read()

    pos = 0

    def fail(message: str):
        raise FormatError(f"{path}: byte {pos}: {message}")

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(blob):
            ch = blob[pos : pos + 1]
            if ch == b"#":
                while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            fail("unexpected end of header")
        return blob[start:pos]

    if next_token() != b"P5":
        fail("expected magic 'P5'")
    try:
        w = int(next_token())
        h = int(next_token())
        maxval = int(next_token())
    except ValueError:
        fail("non-numeric header field")
    if maxval != 255:
        fail(f"unsupported maxval {maxval}, expected 255")
    pos += 1  # single whitespace byte after maxval
    expected = w * h
    data = blob[pos : pos + expected]
    if len(data) != expected:
        fail(f"payload has {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def save_mask_pgm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise FormatError("mask values must be 0 or 1")
    save_frame_pgm(path, mask.astype(np.float64))


def load_mask_pgm(path) -> np.ndarray:
    frame = load_frame_pgm(path)
    mask = (frame >= 0.5).astype(np.float64)
    return mask


def save_video(dir_path, video: np.ndarray) -> list[str]:
    """One P5 file per frame with zero-padded indices; returns relative names."""
    video = np.asarray(video)
    if video.ndim == 4 and video.shape[-1] == 1:
        video = video[..., 0]
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    names = []
    for i, frame in enumerate(video):
        name = f"frame_{i:03d}.pgm"
        save_frame_pgm(dir_path / name, frame)
        names.append(name)
    return names


def load_video(dir_path, names) -> np.ndarray:
    frames = [load_frame_pgm(Path(dir_path) / n) for n in names]
    return np.stack(frames)[..., None]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, config_snapshot: dict, arrays: dict[str, np.ndarray]) -> None:
    config_blob = json.dumps(config_snapshot, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(config_blob)))
        fh.write(config_blob)
        fh.write(struct.pack("<Q", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            name_blob = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(name_blob)))
            fh.write(name_blob)
            fh.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"{path}: truncated at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    magic = bytes(take(4))
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    (config_len,) = struct.unpack("<Q", take(8))
    config = json.loads(bytes(take(config_len)).decode("utf-8"))
    (count,) = struct.unpack("<Q", take(8))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<Q", take(8))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(ndim))
        n_elem = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(take(8 * n_elem), dtype="<f8").reshape(shape).copy()
    if pos != len(view):
        raise FormatError(f"{path}: {len(view) - pos} trailing bytes")
    return config, arrays


# ---------------------------------------------------------------------------
# dataset manifests
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    id: str
    effects: list[str]
    mask_files: list[str]
    frame_files: list[str]
    provenance_tag: str
    frozen: list[bool] = field(default_factory=list)
    cut: int | None = None


def save_dataset(root, records: list[SampleRecord]) -> None:
    """Write frames, masks, and manifest.json under `root`."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        rec_dir = root / "records" / rec.id
        frame_files = save_video(rec_dir, rec.target)
        mask_files = []
        for k, c in enumerate(rec.conditions):
            name = f"mask_{k:02d}.pgm"
            save_mask_pgm(rec_dir / name, c.mask)
            mask_files.append(name)
        entries.append(
            ManifestEntry(
                id=rec.id,
                effects=[e.value for e in rec.effects],
                mask_files=mask_files,
                frame_files=frame_files,
                provenance_tag=rec.provenance.tag,
                frozen=list(rec.provenance.frozen),
                cut=rec.provenance.cut,
            ).__dict__
        )
    manifest = {"records": entries}
    with open(root / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(root) -> list[ManifestEntry]:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"missing manifest: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    entries = [ManifestEntry(**raw) for raw in manifest["records"]]
    frame_count = None
    for entry in entries:
        rec_dir = root / "records" / entry.id
        for name in entry.frame_files + entry.mask_files:
            if not (rec_dir / name).exists():
                raise FormatError(f"manifest references missing file: {rec_dir / name}")
        if frame_count is None:
            frame_count = len(entry.frame_files)
        elif len(entry.frame_files) != frame_count:
            raise FormatError(f"record {entry.id} has {len(entry.frame_files)} frames, expected {frame_count}")
        if len(entry.effects) != len(entry.mask_files):
            raise FormatError(f"record {entry.id}: {len(entry.effects)} effects vs {len(entry.mask_files)} masks")
    return entries


def load_dataset(root) -> list[SampleRecord]:
    """Read a manifest back into records, validating referenced files."""
    root = Path(root)
    effect_by_name = {k.value: i for i, k in enumerate(EFFECT_ORDER)}
    records = []
    for entry in load_manifest(root):
        rec_dir = root / "records" / entry.id
        target = load_video(rec_dir, entry.frame_files)
        conditions = []
        for effect_name, mask_name in zip(entry.effects, entry.mask_files):
            if effect_name not in effect_by_name:
                raise FormatError(f"record {entry.id}: unknown effect {effect_name!r}")
            conditions.append(ConditionPair(effect_by_name[effect_name], load_mask_pgm(rec_dir / mask_name)))
        records.append(
            SampleRecord(
                id=entry.id,
                reference=target[0].copy(),
                conditions=conditions,
                target=target,
                provenance=Provenance(entry.provenance_tag, tuple(entry.frozen), cut=entry.cut),
            )
        )
    return records
