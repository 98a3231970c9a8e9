"""
Streaming: online inference with the ordinary network.

Each pushed frame is embedded once and kept in a FIFO of the latest
τ = M_h + M_p rows. The first compressor layer's logits depend on one
history row at a time, so only the row that just slid into the history
block needs fresh logits; everything after the first-layer logits is
recomputed per step.

    state = stream_init(model, query_words)
    for frame in frames:
        out = stream_step(state, frame)
"""
import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from compressor import FirstLayerLogits, language_logits, query_term, vision_logits
from numerics import Tensor, get_dtype, no_grad
from twinnet import TwinNet
from utils import DimensionError, fmt_rate, require_finite, seeded_rng

log = logging.getLogger(__name__)


# ── Ring Buffer ───────────────────────────────────────────────────────────────

class RingBuffer:
    """Fixed-capacity FIFO of equal-width rows; `ordered()` is oldest → newest."""

    def __init__(self, capacity: int, width: int, fill: Optional[np.ndarray] = None):
        self.data = np.zeros((capacity, width), dtype=get_dtype())
        if fill is not None:
            self.data[:] = fill
        self.head = 0   # slot of the oldest row, next to be overwritten

    def __len__(self):
        return len(self.data)

    def push(self, row: np.ndarray) -> np.ndarray:
        evicted = self.data[self.head].copy()
        self.data[self.head] = row
        self.head = (self.head + 1) % len(self.data)
        return evicted

    def ordered(self) -> np.ndarray:
        return np.concatenate((self.data[self.head:], self.data[:self.head]))

    def load(self, rows: np.ndarray):
        if rows.shape != self.data.shape:
            raise DimensionError(f"ring load: {rows.shape} vs {self.data.shape}")
        self.data[:] = rows
        self.head = 0

    def copy(self) -> "RingBuffer":
        rb = RingBuffer.__new__(RingBuffer)
        rb.data, rb.head = self.data.copy(), self.head
        return rb


# ── State ─────────────────────────────────────────────────────────────────────

@dataclass
class StepOutput:
    T: int
    s: float
    m: float
    e: float
    warmup: bool
    gates: List[Tuple[float, float]] = field(default_factory=list)

    def as_row(self) -> dict:
        return {"T": self.T, "s": self.s, "m": self.m, "e": self.e, "warmup": self.warmup}


@dataclass
class StreamState:
    """One stream. Owned by one thread at a time; the model is shared read-only."""
    model: TwinNet
    frames: RingBuffer
    vision_cache: Optional[RingBuffer]
    language_cache: Optional[RingBuffer]
    q: np.ndarray
    qterm0: Optional[np.ndarray]
    step: int = 0
    valid_count: int = 0
    fresh_rows: int = 0          # first-layer logit rows computed by the last step
    fresh_rows_total: int = 0

    @property
    def span(self) -> int:
        return len(self.frames)

    @property
    def warmup(self) -> bool:
        return self.valid_count < self.span

    def copy(self) -> "StreamState":
        return StreamState(
            self.model, self.frames.copy(),
            self.vision_cache.copy() if self.vision_cache else None,
            self.language_cache.copy() if self.language_cache else None,
            self.q.copy(), None if self.qterm0 is None else self.qterm0.copy(),
            self.step, self.valid_count, self.fresh_rows, self.fresh_rows_total)


def _first_scope(model: TwinNet):
    return model.lfc("ord").scope("0")


def _uses_vision(model: TwinNet) -> bool:
    return not (model.cfg.disable_lfc or model.cfg.disable_lfc_vision)


def _uses_language(model: TwinNet) -> bool:
    return not (model.cfg.disable_lfc or model.cfg.disable_lfc_language)


def vision_row(state: StreamState, row: np.ndarray) -> np.ndarray:
    return vision_logits(Tensor(row[None, :]), _first_scope(state.model)).data[0]


def language_row(state: StreamState, row: np.ndarray) -> np.ndarray:
    return language_logits(Tensor(row[None, :]), Tensor(state.qterm0), _first_scope(state.model)).data[0]


def _query(model: TwinNet, query_raw) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    q = model.encode_query(np.asarray(query_raw))
    qterm0 = query_term(q, _first_scope(model)).data if _uses_language(model) else None
    return q.data, qterm0


def stream_init(model: TwinNet, query_raw: np.ndarray) -> StreamState:
    """
    Zero frame buffer; both logit caches start as the logits of a zero row,
    which is exactly what an empty (padded) history slot holds.
    """
    cfg = model.cfg
    with no_grad():
        q, qterm0 = _query(model, query_raw)
        state = StreamState(model, RingBuffer(cfg.span, cfg.d), None, None, q, qterm0)
        zero = np.zeros(cfg.d, dtype=get_dtype())
        if _uses_vision(model):
            state.vision_cache = RingBuffer(cfg.M_h, cfg.n, fill=vision_row(state, zero))
        if _uses_language(model):
            state.language_cache = RingBuffer(cfg.M_h, cfg.n, fill=language_row(state, zero))
    return state


def set_query(state: StreamState, query_raw: np.ndarray) -> StreamState:
    """Re-encode q and rebuild only the language cache from the stored history rows."""
    model = state.model
    with no_grad():
        state.q, state.qterm0 = _query(model, query_raw)
        if state.language_cache is not None:
            hist = state.frames.ordered()[:model.cfg.M_h]
            state.language_cache.load(np.stack([language_row(state, r) for r in hist]))
            log.warning(f"Query changed at frame {state.step}: rebuilt {len(hist)} language logit rows")
    return state


# ── Steps ─────────────────────────────────────────────────────────────────────

def _push_frame(state: StreamState, raw_frame) -> np.ndarray:
    cfg = state.model.cfg
    raw = np.asarray(raw_frame, dtype=get_dtype())
    if raw.shape != (cfg.frame_dim,):
        raise DimensionError(f"frame has shape {raw.shape}, stream expects ({cfg.frame_dim},)")
    require_finite(raw, f"frame {state.step}")
    row = state.model.embed(raw[None, :], np.array([state.step]), np.array([True])).data[0]
    state.frames.push(row)
    state.valid_count = min(state.valid_count + 1, state.span)
    return state.frames.ordered()


def _emit(state: StreamState, window: np.ndarray, first: FirstLayerLogits, fresh: int) -> StepOutput:
    cfg = state.model.cfg
    qterm0 = None if state.qterm0 is None else Tensor(state.qterm0)
    span, gates = state.model.ordinary_last(Tensor(window[cfg.M_h:]), Tensor(window[:cfg.M_h]),
                                            Tensor(state.q), first, qterm0)
    s, m, e = (float(v) for v in span.probs.data)
    out = StepOutput(state.step, s, m, e, state.warmup, [g.means() for g in gates])
    state.fresh_rows = fresh
    state.fresh_rows_total += fresh
    state.step += 1
    return out


def stream_step(state: StreamState, raw_frame) -> StepOutput:
    """Amortized step: two fresh first-layer logit rows, whatever M_h is."""
    with no_grad():
        window = _push_frame(state, raw_frame)
        newest = window[state.model.cfg.M_h - 1]
        fresh = 0
        first = FirstLayerLogits()
        if state.vision_cache is not None:
            state.vision_cache.push(vision_row(state, newest))
            first.vision = Tensor(state.vision_cache.ordered())
            fresh += 1
        if state.language_cache is not None:
            state.language_cache.push(language_row(state, newest))
            first.language = Tensor(state.language_cache.ordered())
            fresh += 1
        out = _emit(state, window, first, fresh)
    log.debug(f"stream T={out.T} s={out.s:.4f} e={out.e:.4f} fresh_rows={fresh}")
    return out


def stream_step_reference(state: StreamState, raw_frame) -> StepOutput:
    """Recompute every first-layer logit row from the window (2·M_h rows)."""
    cfg = state.model.cfg
    lfc0 = _first_scope(state.model)
    with no_grad():
        window = _push_frame(state, raw_frame)
        hist = Tensor(window[:cfg.M_h])
        fresh = 0
        first = FirstLayerLogits()
        if state.vision_cache is not None:
            first.vision = vision_logits(hist, lfc0)
            state.vision_cache.load(first.vision.data)
            fresh += cfg.M_h
        if state.language_cache is not None:
            first.language = language_logits(hist, Tensor(state.qterm0), lfc0)
            state.language_cache.load(first.language.data)
            fresh += cfg.M_h
        return _emit(state, window, first, fresh)


def check_cache_coherence(state: StreamState) -> bool:
    """Every cached row equals its row recomputed from the stored frame, bit for bit."""
    hist = state.frames.ordered()[:state.model.cfg.M_h]
    with no_grad():
        for cache, fn in ((state.vision_cache, vision_row), (state.language_cache, language_row)):
            if cache is None:
                continue
            fresh = np.stack([fn(state, r) for r in hist])
            if not np.array_equal(fresh, cache.ordered()):
                return False
    return True


def stream_video(model: TwinNet, frames: np.ndarray, query_raw: np.ndarray,
                 reference: bool = False) -> List[StepOutput]:
    state = stream_init(model, query_raw)
    step = stream_step_reference if reference else stream_step
    return [step(state, f) for f in np.asarray(frames)]


def outputs_frame(outputs: List[StepOutput]) -> pd.DataFrame:
    return pd.DataFrame([o.as_row() for o in outputs], columns=["T", "s", "m", "e", "warmup"])


# ── Benchmark ─────────────────────────────────────────────────────────────────

@dataclass
class BenchReport:
    steps: int
    incremental_fps: float
    reference_fps: float
    incremental_rows: int
    reference_rows: int

    @property
    def ratio(self) -> float:
        return self.incremental_fps / self.reference_fps if self.reference_fps else float("nan")

    def as_frame(self) -> pd.DataFrame:
        return pd.DataFrame([
            {"path": "incremental", "steps_per_s": self.incremental_fps, "rows_per_step": self.incremental_rows},
            {"path": "reference", "steps_per_s": self.reference_fps, "rows_per_step": self.reference_rows},
        ])

    def summary(self) -> str:
        return (f"incremental {fmt_rate(self.incremental_fps)} ({self.incremental_rows} rows/step) | "
                f"reference {fmt_rate(self.reference_fps)} ({self.reference_rows} rows/step) | "
                f"ratio {self.ratio:.2f}×")


def _timed(state: StreamState, step, frames: np.ndarray) -> float:
    t0 = time.perf_counter()
    for f in frames:
        step(state, f)
    return len(frames) / max(time.perf_counter() - t0, 1e-12)


def benchmark(model: TwinNet, steps: int = 64, seed: int = 0, query_tokens: int = 8) -> BenchReport:
    """Steps/second of both paths over the same random stream, each from a fresh state."""
    cfg = model.cfg
    rng = seeded_rng(seed)
    query = rng.standard_normal((query_tokens, cfg.word_dim))
    frames = rng.standard_normal((steps, cfg.frame_dim))
    inc = stream_init(model, query)
    ref = inc.copy()
    inc_fps = _timed(inc, stream_step, frames)
    ref_fps = _timed(ref, stream_step_reference, frames)
    report = BenchReport(steps, inc_fps, ref_fps, inc.fresh_rows, ref.fresh_rows)
    log.info(f"Bench M_h={cfg.M_h} d={cfg.d}: {report.summary()}")
    return report
