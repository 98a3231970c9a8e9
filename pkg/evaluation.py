"""
Evaluation: stream whole videos, score (start, end) candidates by s_i·e_j,
and report R@n,IoU=m.

Candidates are 0-based inclusive frame spans (i, j), 0 ≤ i ≤ j < L.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from data_io import Annotation, FeatureCache, ManifestEntry, iter_annotations, load_manifest
from streaming import stream_video
from twinnet import TwinNet

log = logging.getLogger(__name__)

GRIDS: Dict[str, Tuple[List[int], List[float]]] = {
    "anet": ([1, 5], [0.5, 0.7]),
    "mad":  ([5, 50, 100], [0.3, 0.5]),
}

DENSE_MAX = 8
GROWTH = 1.5


# ── Predictions ───────────────────────────────────────────────────────────────

@dataclass
class VideoPrediction:
    video_id: str
    s: np.ndarray
    m: np.ndarray
    e: np.ndarray
    warmup: np.ndarray
    gates: Optional[np.ndarray] = None   # (L, K, 2): per-frame (g_V, g_L) per layer

    def __len__(self):
        return len(self.s)


def collect_predictions(model: TwinNet, frames: np.ndarray, query_raw: np.ndarray,
                        video_id: str = "", reference: bool = False) -> VideoPrediction:
    """One (s, m, e) per frame, warm-up frames included."""
    outs = stream_video(model, frames, query_raw, reference=reference)
    arr = np.array([(o.s, o.m, o.e) for o in outs]).reshape(-1, 3)
    gates = np.array([o.gates for o in outs]) if outs and outs[0].gates else None
    return VideoPrediction(video_id, arr[:, 0], arr[:, 1], arr[:, 2],
                           np.array([o.warmup for o in outs], dtype=bool), gates)


# ── Candidates ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Candidate:
    i: int
    j: int
    score: float


@dataclass
class CandidateSet:
    i: np.ndarray
    j: np.ndarray
    score: np.ndarray

    def __len__(self):
        return len(self.i)

    def __iter__(self) -> Iterator[Candidate]:
        for a, b, c in zip(self.i, self.j, self.score):
            yield Candidate(int(a), int(b), float(c))

    def ranked(self) -> "CandidateSet":
        """Score descending, then smaller i, then smaller j."""
        order = np.lexsort((self.j, self.i, -self.score))
        return CandidateSet(self.i[order], self.j[order], self.score[order])


def _scores(pred: VideoPrediction, exclude_warmup: bool) -> Tuple[np.ndarray, np.ndarray]:
    if not exclude_warmup:
        return pred.s, pred.e
    keep = ~pred.warmup
    return pred.s * keep, pred.e * keep


def full_spans(L: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(L)


def candidate_spans_sparse(L: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Every span up to 8 frames at stride 1; then lengths ceil(8·1.5^k) ≤ L at
    start stride max(1, ⌊ℓ/8⌋), plus the start L − ℓ at each scale so the last
    frames stay inside the IoU ≥ 0.5 coverage bound (one extra span per scale).
    """
    spans = set()
    for length in range(1, min(DENSE_MAX, L) + 1):
        spans.update((a, a + length - 1) for a in range(L - length + 1))
    k = 1
    while (length := math.ceil(DENSE_MAX * GROWTH ** k)) <= L:
        stride = max(1, length // DENSE_MAX)
        starts = set(range(0, L - length + 1, stride)) | {L - length}
        spans.update((a, a + length - 1) for a in starts)
        k += 1
    ij = np.array(sorted(spans), dtype=np.int64).reshape(-1, 2)
    return ij[:, 0], ij[:, 1]


def _score_spans(pred: VideoPrediction, i: np.ndarray, j: np.ndarray, exclude_warmup: bool) -> CandidateSet:
    s, e = _scores(pred, exclude_warmup)
    return CandidateSet(i, j, s[i] * e[j])


def score_candidates_full(pred: VideoPrediction, exclude_warmup: bool = False) -> CandidateSet:
    """All L(L+1)/2 spans."""
    return _score_spans(pred, *full_spans(len(pred)), exclude_warmup)


def score_candidates_sparse(pred: VideoPrediction, exclude_warmup: bool = False) -> CandidateSet:
    return _score_spans(pred, *candidate_spans_sparse(len(pred)), exclude_warmup)


# ── IoU & Recall ──────────────────────────────────────────────────────────────

def temporal_iou(a: Tuple[int, int], b: Tuple[int, int]) -> float:
    """Inclusive frame spans: [2, 8] vs [4, 10] → 5/9."""
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]) + 1)
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter
    return inter / union


def temporal_iou_many(i: np.ndarray, j: np.ndarray, gt: Tuple[int, int]) -> np.ndarray:
    inter = np.maximum(0, np.minimum(j, gt[1]) - np.maximum(i, gt[0]) + 1)
    union = (j - i + 1) + (gt[1] - gt[0] + 1) - inter
    return inter / union


@dataclass
class MetricsReport:
    recalls: Dict[Tuple[int, float], float] = field(default_factory=dict)
    hits: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=["query_id", "n", "m", "hit"]))
    candidate_counts: Dict[str, int] = field(default_factory=dict)
    gate_means: Optional[pd.DataFrame] = None

    @property
    def queries(self) -> int:
        return int(self.hits["query_id"].nunique()) if len(self.hits) else 0

    def recall(self, n: int, m: float) -> float:
        return self.recalls[(n, m)]

    def table(self) -> pd.DataFrame:
        rows = [{"n": n, "m": m, "recall": r, "queries": self.queries}
                for (n, m), r in sorted(self.recalls.items())]
        return pd.DataFrame(rows, columns=["n", "m", "recall", "queries"])

    def write_csv(self, path) -> Path:
        """Per-query hit rows, a blank line, then the aggregate block."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.hits.to_csv(path, index=False)
        with open(path, "a", encoding="utf-8", newline="") as fh:
            fh.write("\n")
            self.table().to_csv(fh, index=False)
        log.info(f"Metrics report → {path}")
        return path

    def summary(self) -> str:
        return "  ".join(f"R@{n},IoU={m:g}: {r:.2f}" for (n, m), r in sorted(self.recalls.items()))


def recall_at_n_iou(candidates: Dict[str, CandidateSet], truths: Dict[str, Tuple[int, int]],
                    ns: Sequence[int], ms: Sequence[float]) -> MetricsReport:
    """A query hits at (n, m) when its top-n holds a span with IoU > m."""
    rows = []
    for qid, cands in candidates.items():
        ranked = cands.ranked()
        ious = temporal_iou_many(ranked.i, ranked.j, truths[qid])
        for n in ns:
            best = float(ious[:n].max()) if len(ious) else 0.0
            rows.extend({"query_id": qid, "n": n, "m": m, "hit": int(best > m)} for m in ms)
    hits = pd.DataFrame(rows, columns=["query_id", "n", "m", "hit"])
    recalls = {}
    if len(hits):
        agg = hits.groupby(["n", "m"])["hit"].mean() * 100.0
        recalls = {(int(n), float(m)): float(v) for (n, m), v in agg.items()}
    return MetricsReport(recalls, hits, {q: len(c) for q, c in candidates.items()})


# ── Dataset ───────────────────────────────────────────────────────────────────

def query_keys(pairs: Sequence[Tuple[ManifestEntry, Annotation]]) -> List[str]:
    """
    One distinct report key per annotation. Query ids are used as they are when
    unique; repeated ids are qualified as "video/query", then by manifest
    position if they still collide.
    """
    keys = [a.query_id for _, a in pairs]
    if len(set(keys)) == len(keys):
        return keys
    keys = [f"{e.video_id}/{a.query_id}" for e, a in pairs]
    if len(set(keys)) < len(keys):
        keys = [f"{k}#{pos}" for pos, k in enumerate(keys)]
    log.warning(f"Repeated query ids in manifest; reporting {len(keys)} annotations as {keys[0]!r}, ...")
    return keys


def evaluate_dataset(manifest: Union[str, Path, List[ManifestEntry]], model: TwinNet,
                     ns: Sequence[int] = (1, 5), ms: Sequence[float] = (0.5, 0.7),
                     sparse: bool = True, exclude_warmup: bool = False, workers: int = 1,
                     out_csv=None) -> MetricsReport:
    """collect → score → rank for every annotation; queries run in parallel, aggregate in manifest order."""
    entries = manifest if isinstance(manifest, list) else load_manifest(manifest)
    pairs = list(iter_annotations(entries))
    if not pairs:
        log.info("Empty manifest: nothing to evaluate")
        report = MetricsReport()
        if out_csv:
            report.write_csv(out_csv)
        return report
    cache = FeatureCache().warm(entries)
    score = score_candidates_sparse if sparse else score_candidates_full

    def run(pair):
        entry, ann = pair
        pred = collect_predictions(model, cache.get(entry.frame_feature_path),
                                   cache.get(ann.query_feature_path), entry.video_id)
        return pred, score(pred, exclude_warmup)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, pairs))
    else:
        results = [run(p) for p in pairs]

    keys = query_keys(pairs)
    candidates = {k: c for k, (_, c) in zip(keys, results)}
    truths = {k: (a.t_s, a.t_e) for k, (_, a) in zip(keys, pairs)}
    report = recall_at_n_iou(candidates, truths, ns, ms)
    gates = [p.gates for p, _ in results if p.gates is not None and p.gates.size]
    if gates and np.isfinite(np.concatenate(gates)).all():
        per_layer = np.concatenate(gates).mean(axis=0)
        report.gate_means = pd.DataFrame({"layer": np.arange(len(per_layer)),
                                          "g_V": per_layer[:, 0], "g_L": per_layer[:, 1]})
    log.info(f"Evaluated {len(pairs)} queries ({'sparse' if sparse else 'full'} candidates): {report.summary()}")
    if out_csv:
        report.write_csv(out_csv)
    return report
