"""
Data IO: TGF1 feature files, JSON-lines manifests, synthetic corpora.

TGF1 layout (little-endian):
    "TGF1" | count: u32 | dim: u32 | count×dim f32, row-major
"""
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd

from utils import FormatError, ValidationError

log = logging.getLogger(__name__)

MAGIC = b"TGF1"
HEADER_BYTES = 12


# ── Feature Files ─────────────────────────────────────────────────────────────

def write_feature_file(path, matrix: np.ndarray):
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise FormatError(f"{path}: expected a 2-D matrix, got shape {m.shape}", offset=0)
    payload = m.astype("<f4")
    bad = ~np.isfinite(payload)
    if bad.any():
        raise FormatError(f"{path}: non-finite value", offset=HEADER_BYTES + 4 * int(np.argmax(bad.ravel())))
    header = MAGIC + np.array([m.shape[0], m.shape[1]], dtype="<u4").tobytes()
    Path(path).write_bytes(header + payload.tobytes(order="C"))


def read_header(path) -> Tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(HEADER_BYTES)
    return _parse_header(path, head)


def _parse_header(path, head: bytes) -> Tuple[int, int]:
    if len(head) < 4 or head[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {head[:4]!r}", offset=0)
    if len(head) < HEADER_BYTES:
        raise FormatError(f"{path}: truncated header", offset=len(head))
    count, dim = (int(x) for x in np.frombuffer(head[4:HEADER_BYTES], dtype="<u4"))
    return count, dim


def read_feature_file(path) -> np.ndarray:
    """→ float32 matrix (count × dim)."""
    raw = Path(path).read_bytes()
    count, dim = _parse_header(path, raw[:HEADER_BYTES])
    want = HEADER_BYTES + 4 * count * dim
    if len(raw) < want:
        raise FormatError(f"{path}: payload truncated, need {want} bytes", offset=len(raw))
    if len(raw) > want:
        raise FormatError(f"{path}: {len(raw) - want} trailing bytes", offset=want)
    m = np.frombuffer(raw, dtype="<f4", offset=HEADER_BYTES, count=count * dim).reshape(count, dim)
    bad = ~np.isfinite(m)
    if bad.any():
        raise FormatError(f"{path}: non-finite value", offset=HEADER_BYTES + 4 * int(np.argmax(bad.ravel())))
    return m


# ── Manifest ──────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Annotation:
    query_feature_path: str
    t_s: int
    t_e: int
    query_id: str = ""


@dataclass
class ManifestEntry:
    video_id: str
    frame_feature_path: str
    duration_frames: int
    annotations: List[Annotation] = field(default_factory=list)


def _resolve(base: Path, p: str) -> str:
    return p if os.path.isabs(p) else str(base / p)


def _validate(entry: ManifestEntry, check_files: bool):
    vid = entry.video_id
    if entry.duration_frames < 1:
        raise ValidationError(f"{vid}: duration_frames must be ≥ 1")
    for a in entry.annotations:
        if not 0 <= a.t_s <= a.t_e < entry.duration_frames:
            raise ValidationError(
                f"{vid}/{a.query_id}: need 0 ≤ t_s ≤ t_e < {entry.duration_frames}, got [{a.t_s}, {a.t_e}]")
    if not check_files:
        return
    for p in [entry.frame_feature_path] + [a.query_feature_path for a in entry.annotations]:
        if not os.path.exists(p):
            raise ValidationError(f"{vid}: missing feature file {p}")
        try:
            count, _ = read_header(p)
        except FormatError as e:
            raise ValidationError(f"{vid}: {e}")
        if p == entry.frame_feature_path and count != entry.duration_frames:
            raise ValidationError(f"{vid}: {count} frames on disk vs duration_frames {entry.duration_frames}")
        if p != entry.frame_feature_path and count < 1:
            raise ValidationError(f"{vid}: empty query feature file {p}")


def load_manifest(path, check_files: bool = True) -> List[ManifestEntry]:
    """One JSON object per line. Relative paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.read_text(encoding="utf-8").strip():
        return []
    df = pd.read_json(path, lines=True, dtype=False, convert_dates=False, encoding="utf-8")
    need = {"video_id", "frame_feature_path", "duration_frames", "annotations"}
    if missing := need - set(df.columns):
        raise ValidationError(f"{path}: manifest lacks fields {sorted(missing)}")
    base = path.parent
    entries = []
    for row in df.itertuples(index=False):
        vid = str(row.video_id)
        anns = []
        for k, a in enumerate(row.annotations or []):
            try:
                anns.append(Annotation(
                    query_feature_path=_resolve(base, str(a["query_feature_path"])),
                    t_s=int(a["t_s"]), t_e=int(a["t_e"]),
                    query_id=str(a.get("query_id") or f"{vid}#{k}"),
                ))
            except (KeyError, TypeError, ValueError) as e:
                raise ValidationError(f"{vid}: annotation {k} malformed ({e})")
        entry = ManifestEntry(vid, _resolve(base, str(row.frame_feature_path)),
                              int(row.duration_frames), anns)
        _validate(entry, check_files)
        entries.append(entry)
    log.info(f"Manifest {path.name}: {len(entries)} videos, "
             f"{sum(len(e.annotations) for e in entries)} annotations")
    return entries


def iter_annotations(entries: List[ManifestEntry]):
    for e in entries:
        for a in e.annotations:
            yield e, a


class FeatureCache:
    """Read-once store of feature matrices keyed by path. Safe for concurrent readers once warm."""

    def __init__(self):
        self._cache: Dict[str, np.ndarray] = {}

    def get(self, path: str) -> np.ndarray:
        m = self._cache.get(path)
        if m is None:
            m = self._cache[path] = read_feature_file(path)
        return m

    def warm(self, entries: List[ManifestEntry]) -> "FeatureCache":
        for e, a in iter_annotations(entries):
            self.get(e.frame_feature_path)
            self.get(a.query_feature_path)
        return self


# ── Synthetic Corpus ──────────────────────────────────────────────────────────

@dataclass(frozen=True)
class SyntheticSpec:
    num_videos: int = 10
    frames_per_video: int = 64
    raw_dim: int = 32
    event_count_per_video: int = 2
    event_length_range: Tuple[int, int] = (6, 16)
    noise_scale: float = 0.1
    seed: int = 0
    query_tokens: int = 4

    def validate(self):
        lo, hi = self.event_length_range
        slot = self.frames_per_video // max(self.event_count_per_video, 1)
        if self.num_videos < 0 or self.event_count_per_video < 1 or self.raw_dim < 1:
            raise ValidationError("synthetic spec: counts must be positive")
        if not 1 <= lo <= hi:
            raise ValidationError(f"synthetic spec: bad event_length_range {self.event_length_range}")
        if hi > slot:
            raise ValidationError(
                f"synthetic spec: events up to {hi} frames do not fit {self.event_count_per_video} "
                f"per {self.frames_per_video}-frame video")
        if self.noise_scale < 0 or self.query_tokens < 1:
            raise ValidationError("synthetic spec: noise_scale ≥ 0 and query_tokens ≥ 1 required")


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir) -> Path:
    """
    Each event draws a latent code; frames inside [t_s, t_e] are code + noise,
    background frames are noise, and every query token is a noisy copy of
    the code. Events occupy disjoint slots so intervals never overlap.
    """
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.event_length_range
    slot = spec.frames_per_video // spec.event_count_per_video
    rows = []
    for v in range(spec.num_videos):
        vid = f"vid{v:04d}"
        frames = spec.noise_scale * rng.standard_normal((spec.frames_per_video, spec.raw_dim))
        anns = []
        for k in range(spec.event_count_per_video):
            length = int(rng.integers(lo, hi + 1))
            t_s = k * slot + int(rng.integers(0, slot - length + 1))
            t_e = t_s + length - 1
            code = rng.standard_normal(spec.raw_dim)
            frames[t_s:t_e + 1] = code + spec.noise_scale * rng.standard_normal((length, spec.raw_dim))
            words = code + spec.noise_scale * rng.standard_normal((spec.query_tokens, spec.raw_dim))
            qname = f"{vid}_q{k}.tgf"
            write_feature_file(out / qname, words)
            anns.append({"query_id": f"{vid}#{k}", "query_feature_path": qname, "t_s": t_s, "t_e": t_e})
        fname = f"{vid}.tgf"
        write_feature_file(out / fname, frames)
        rows.append({"video_id": vid, "frame_feature_path": fname,
                     "duration_frames": spec.frames_per_video, "annotations": anns})
    manifest = out / "manifest.jsonl"
    text = pd.DataFrame(rows, columns=["video_id", "frame_feature_path", "duration_frames", "annotations"]) \
        .to_json(orient="records", lines=True, force_ascii=False) if rows else ""
    if text and not text.endswith("\n"):
        text += "\n"
    manifest.write_text(text, encoding="utf-8")
    log.info(f"Synthetic corpus: {spec.num_videos} videos × {spec.event_count_per_video} events → {manifest}")
    return manifest
