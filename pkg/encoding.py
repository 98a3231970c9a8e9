"""
Encoding: word/frame projection, the LSTM query encoder, window
partitioning and sinusoidal positions.

Every function accepts leading batch axes unless noted; parameters are read
through a ParamScope rooted at "enc".
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from app_config import ModelConfig
from numerics import (ParamScope, Tensor, add, gelu, get_dtype, glorot, linear, mul,
                      sigmoid, take, tanh)
from utils import ContractError, DimensionError

log = logging.getLogger(__name__)


# ── Parameters ────────────────────────────────────────────────────────────────

def init_encoder(p: ParamScope, cfg: ModelConfig, rng: np.random.Generator):
    d = cfg.d
    p.add("word.w", glorot(rng, (d, cfg.word_dim)))
    p.add("word.b", np.zeros(d))
    p.add("frame.w", glorot(rng, (d, cfg.frame_dim)))
    p.add("frame.b", np.zeros(d))
    p.add("lstm.w_ih", glorot(rng, (4 * d, d)))
    p.add("lstm.w_hh", glorot(rng, (4 * d, d)))
    p.add("lstm.b", np.zeros(4 * d))


# ── Projections ───────────────────────────────────────────────────────────────

def project_words(raw, p: ParamScope) -> Tensor:
    return gelu(linear(raw, p("word.w"), p("word.b")))


def project_frames(raw, p: ParamScope) -> Tensor:
    """Per-row affine map then GeLU: (..., τ, frame_dim) → (..., τ, d)."""
    raw = raw if isinstance(raw, Tensor) else Tensor(raw)
    want = p("frame.w").shape[1]
    if raw.shape[-1] != want:
        raise DimensionError(f"frame features have width {raw.shape[-1]}, model expects {want}")
    return gelu(linear(raw, p("frame.w"), p("frame.b")))


# ── Query Encoder ─────────────────────────────────────────────────────────────

def _pad_tokens(raws: Sequence[np.ndarray], word_dim: int) -> Tuple[np.ndarray, np.ndarray]:
    lengths = [len(r) for r in raws]
    if not raws or min(lengths) < 1:
        raise ContractError("query must contain at least one token")
    batch = np.zeros((len(raws), max(lengths), word_dim), dtype=get_dtype())
    for b, r in enumerate(raws):
        r = np.asarray(r)
        if r.ndim != 2 or r.shape[1] != word_dim:
            raise DimensionError(f"query {b}: expected N×{word_dim}, got {r.shape}")
        batch[b, :len(r)] = r
    mask = np.arange(batch.shape[1])[None, :] < np.array(lengths)[:, None]
    return batch, mask


def encode_queries(raws: Sequence[np.ndarray], p: ParamScope) -> Tuple[Tensor, Tensor]:
    """
    Batched single-layer LSTM over projected tokens. Shorter queries are
    right-padded; padded steps carry the previous state through unchanged,
    so q is each query's own last hidden state.

    → (q [B, d], words [B, N_max, d])
    """
    words_raw, mask = _pad_tokens(raws, p("word.w").shape[1])
    words = project_words(words_raw, p)
    B, N = mask.shape
    d = words.shape[-1]
    h = Tensor(np.zeros((B, d)))
    c = Tensor(np.zeros((B, d)))
    w_ih, w_hh, bias = p("lstm.w_ih"), p("lstm.w_hh"), p("lstm.b")
    for t in range(N):
        x = take(words, (slice(None), t))
        z = add(linear(x, w_ih, bias), linear(h, w_hh))
        i_g = sigmoid(take(z, (Ellipsis, slice(0, d))))
        f_g = sigmoid(take(z, (Ellipsis, slice(d, 2 * d))))
        g_g = tanh(take(z, (Ellipsis, slice(2 * d, 3 * d))))
        o_g = sigmoid(take(z, (Ellipsis, slice(3 * d, 4 * d))))
        c_new = add(mul(f_g, c), mul(i_g, g_g))
        h_new = mul(o_g, tanh(c_new))
        if mask[:, t].all():
            h, c = h_new, c_new
        else:
            m = mask[:, t:t + 1].astype(get_dtype())
            h = add(mul(h_new, m), mul(h, 1.0 - m))
            c = add(mul(c_new, m), mul(c, 1.0 - m))
    return h, words


def encode_query(raw_words: np.ndarray, p: ParamScope) -> Tuple[Tensor, Tensor]:
    """One query: raw N×word_dim → (q [d], words [N, d])."""
    raw_words = np.asarray(raw_words)
    if raw_words.ndim != 2 or raw_words.shape[0] == 0:
        raise ContractError(f"query needs N ≥ 1 tokens, got shape {raw_words.shape}")
    q, words = encode_queries([raw_words], p)
    return take(q, 0), take(words, 0)


# ── Window Partition ──────────────────────────────────────────────────────────

@dataclass
class FrameWindow:
    """
    Raw feature blocks around anchor T with their absolute frame indices.
    Rows whose index falls outside the video are zero and flagged invalid.
    """
    T: int
    present: np.ndarray
    present_index: np.ndarray
    present_valid: np.ndarray
    history: np.ndarray
    history_index: np.ndarray
    history_valid: np.ndarray
    future: Optional[np.ndarray] = None
    future_index: Optional[np.ndarray] = None
    future_valid: Optional[np.ndarray] = None

    @property
    def span(self) -> int:
        return len(self.present) + len(self.history)

    @property
    def has_future(self) -> bool:
        return self.future is not None


def _gather(frames: np.ndarray, index: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    valid = (index >= 0) & (index < len(frames))
    out = np.zeros((len(index), frames.shape[1]), dtype=frames.dtype)
    out[valid] = frames[index[valid]]
    return out, valid


def partition_window(frames: np.ndarray, T: int, M_p: int, M_h: int,
                     with_future: bool = False) -> FrameWindow:
    """
    present = T−M_p+1..T, history = T−M_p−M_h+1..T−M_p, future = T+1..T+M_h.
    """
    frames = np.asarray(frames)
    p_idx = np.arange(T - M_p + 1, T + 1)
    h_idx = np.arange(T - M_p - M_h + 1, T - M_p + 1)
    present, p_ok = _gather(frames, p_idx)
    history, h_ok = _gather(frames, h_idx)
    win = FrameWindow(T, present, p_idx, p_ok, history, h_idx, h_ok)
    if with_future:
        f_idx = np.arange(T + 1, T + M_h + 1)
        win.future, win.future_valid = _gather(frames, f_idx)
        win.future_index = f_idx
    return win


# ── Positions ─────────────────────────────────────────────────────────────────

def positional_table(positions, d: int) -> np.ndarray:
    """Sinusoidal rows: sin on even channels, cos on odd, at each absolute position."""
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    k = np.arange(d)
    freq = 1.0 / np.power(10000.0, (k - k % 2) / d)
    ang = pos * freq
    return np.where(k % 2 == 0, np.sin(ang), np.cos(ang)).astype(get_dtype())


def positional_encode(block, offset: int) -> Tensor:
    block = block if isinstance(block, Tensor) else Tensor(block)
    m, d = block.shape[-2:]
    return add(block, positional_table(np.arange(offset, offset + m), d))


def embed_block(raw, index: np.ndarray, valid: np.ndarray, p: ParamScope,
                cfg: ModelConfig) -> Tensor:
    """Project, zero the invalid rows, then add positions on the valid rows only."""
    keep = np.asarray(valid, dtype=get_dtype())[..., None]
    x = mul(project_frames(raw, p), keep)
    if cfg.positional:
        x = add(x, positional_table(index, cfg.d) * keep)
    return x
