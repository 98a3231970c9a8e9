"""
Language-guided feature compressor.

K stacked layers squeeze M_h frame rows into n tokens. Each layer mixes a
TokenLearner-style vision branch with a query-conditioned language branch,
weighted by two scalar router gates:

    V^k = g_V · softmax_rows(E_V)ᵀ V^{k-1}  +  g_L · softmax_rows(E_L)ᵀ V^{k-1}

E_V rows are W₂(W₁v + b₁) + b₂ and E_L rows are W₃ tanh(W₁v + W₂q + b).
Both depend on a single input row (plus q), which is what lets the stream
engine cache the first layer's logits one frame at a time.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from app_config import ModelConfig
from numerics import (ParamScope, Tensor, add, gelu, get_dtype, glorot, linear, matmul,
                      mean, mul, reshape, sigmoid, softmax, tanh, transpose)

log = logging.getLogger(__name__)


# ── Parameters ────────────────────────────────────────────────────────────────

def _init_router(p: ParamScope, d: int, rng):
    p.add("w1", glorot(rng, (d // 2, d)))
    p.add("b1", np.zeros(d // 2))
    p.add("w2", glorot(rng, (1, d // 2)))
    p.add("b2", np.zeros(1))


def init_compressor(p: ParamScope, cfg: ModelConfig, rng: np.random.Generator):
    """One scope per layer: lfc.{k}.vision / language / vision_router / language_router."""
    if cfg.disable_lfc:
        return
    d, n = cfg.d, cfg.n
    for k in range(cfg.K):
        lp = p.scope(str(k))
        if not cfg.disable_lfc_vision:
            lp.add("vision.w1", glorot(rng, (n, d)))
            lp.add("vision.b1", np.zeros(n))
            lp.add("vision.w2", glorot(rng, (n, n)))
            lp.add("vision.b2", np.zeros(n))
        if not cfg.disable_lfc_language:
            lp.add("language.w1", glorot(rng, (d, d)))
            lp.add("language.w2", glorot(rng, (d, d)))
            lp.add("language.w3", glorot(rng, (n, d)))
            lp.add("language.b", np.zeros(d))
        if not (cfg.disable_lfc_vision or cfg.disable_lfc_language):
            _init_router(lp.scope("vision_router"), d, rng)
            _init_router(lp.scope("language_router"), d, rng)


# ── Branch Logits ─────────────────────────────────────────────────────────────

def vision_logits(x, p: ParamScope) -> Tensor:
    """(..., m, d) → (..., m, n). No interior nonlinearity."""
    return linear(linear(x, p("vision.w1"), p("vision.b1")), p("vision.w2"), p("vision.b2"))


def query_term(q, p: ParamScope) -> Tensor:
    """W₂q + b, shaped (..., 1, d) so it broadcasts over input rows."""
    q = q if isinstance(q, Tensor) else Tensor(q)
    q2 = reshape(q, q.shape[:-1] + (1, q.shape[-1]))
    return linear(q2, p("language.w2"), p("language.b"))


def language_logits(x, qterm, p: ParamScope) -> Tensor:
    return linear(tanh(add(linear(x, p("language.w1")), qterm)), p("language.w3"))


def _accumulate(logits: Tensor, x) -> Tuple[Tensor, Tensor]:
    """Softmax over input tokens (each output column sums to 1), then Sᵀ·x."""
    scores = softmax(logits, axis=-2)
    return matmul(transpose(scores), x), scores


def vision_branch(x, p: ParamScope, logits: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """→ (output (..., n, d), scores (..., m, n))"""
    return _accumulate(vision_logits(x, p) if logits is None else logits, x)


def language_branch(x, q, p: ParamScope, logits: Optional[Tensor] = None,
                    qterm: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    if logits is None:
        logits = language_logits(x, query_term(q, p) if qterm is None else qterm, p)
    return _accumulate(logits, x)


# ── Router Gates ──────────────────────────────────────────────────────────────

@dataclass
class GateValues:
    """Per-layer router outputs; None where the branch is ablated."""
    g_V: Optional[np.ndarray] = None
    g_L: Optional[np.ndarray] = None

    def means(self) -> Tuple[float, float]:
        f = lambda g: float(np.mean(g)) if g is not None else float("nan")
        return f(self.g_V), f(self.g_L)


def _router(x, p: ParamScope, activation: str) -> Tensor:
    h = gelu(linear(x, p("w1"), p("b1")))
    r = tanh(linear(h, p("w2"), p("b2")))
    return gelu(r) if activation == "gelu" else sigmoid(r)


def fusion_gates(x, q, p: ParamScope, activation: str = "gelu") -> Tuple[Tensor, Tensor]:
    """
    g_V from the mean-pooled input rows, g_L from q alone.
    Each gate comes back shaped (..., 1, 1) to scale an (..., n, d) branch.
    """
    q = q if isinstance(q, Tensor) else Tensor(q)
    pooled = mean(x, axis=-2, keepdims=True)
    g_v = _router(pooled, p.scope("vision_router"), activation)
    g_l = _router(reshape(q, q.shape[:-1] + (1, q.shape[-1])), p.scope("language_router"), activation)
    return g_v, g_l


# ── Compress ──────────────────────────────────────────────────────────────────

def segment_pool_matrix(m: int, n: int) -> np.ndarray:
    """(n, m) averaging matrix over n near-equal contiguous segments."""
    P = np.zeros((n, m), dtype=get_dtype())
    for j, seg in enumerate(np.array_split(np.arange(m), n)):
        P[j, seg] = 1.0 / len(seg)
    return P


@dataclass
class FirstLayerLogits:
    """Precomputed first-layer logits (M_h, n); either may be None."""
    vision: Optional[Tensor] = None
    language: Optional[Tensor] = None


def compress(V, q, p: ParamScope, cfg: ModelConfig,
             first: Optional[FirstLayerLogits] = None,
             qterm0: Optional[Tensor] = None) -> Tuple[Tensor, List[GateValues]]:
    """
    (..., M_h, d) → (..., n, d). `first` supplies cached first-layer logits;
    `qterm0` a cached first-layer query term.
    """
    V = V if isinstance(V, Tensor) else Tensor(V)
    if cfg.disable_lfc:
        return matmul(segment_pool_matrix(V.shape[-2], cfg.n), V), []
    x = V
    gates: List[GateValues] = []
    for k in range(cfg.K):
        lp = p.scope(str(k))
        cached = first if k == 0 and first is not None else FirstLayerLogits()
        parts, gv = [], GateValues()
        if not cfg.disable_lfc_vision:
            parts.append(vision_branch(x, lp, logits=cached.vision)[0])
        if not cfg.disable_lfc_language:
            parts.append(language_branch(x, q, lp, logits=cached.language,
                                         qterm=qterm0 if k == 0 else None)[0])
        if len(parts) == 2:
            g_v, g_l = fusion_gates(x, q, lp, cfg.gate_activation)
            gv = GateValues(g_V=g_v.data.reshape(-1), g_L=g_l.data.reshape(-1))
            x = add(mul(g_v, parts[0]), mul(g_l, parts[1]))
        else:
            x = parts[0]
        gates.append(gv)
    return x, gates
