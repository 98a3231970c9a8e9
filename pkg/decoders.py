"""
Decoders: pre-norm causal transformer decoder, the two-stage prophet
decoder, and the product-similarity span predictor.
"""
import logging
from dataclasses import dataclass

import numpy as np

from app_config import ModelConfig
from numerics import (ParamScope, Tensor, add, causal_mask, concat, gelu, glorot, linear,
                      matmul, mean, mul, reshape, rsqrt, scaled_dot_attention, sigmoid, sub,
                      take, transpose)

log = logging.getLogger(__name__)

LN_EPS = 1e-5


# ── Building Blocks ───────────────────────────────────────────────────────────

def _init_attention(p: ParamScope, d: int, rng):
    for w in ("q", "k", "v", "o"):
        p.add(f"w{w}", glorot(rng, (d, d)))
        p.add(f"b{w}", np.zeros(d))


def _init_norm(p: ParamScope, d: int):
    p.add("gain", np.ones(d))
    p.add("shift", np.zeros(d))


def _init_feed_forward(p: ParamScope, d: int, rng):
    p.add("w1", glorot(rng, (4 * d, d)))
    p.add("b1", np.zeros(4 * d))
    p.add("w2", glorot(rng, (d, 4 * d)))
    p.add("b2", np.zeros(d))


def attention_block(x, memory, p: ParamScope, heads: int, mask=None) -> Tensor:
    q = linear(x, p("wq"), p("bq"))
    k = linear(memory, p("wk"), p("bk"))
    v = linear(memory, p("wv"), p("bv"))
    return linear(scaled_dot_attention(q, k, v, mask=mask, heads=heads), p("wo"), p("bo"))


def layer_norm(x, p: ParamScope) -> Tensor:
    centred = sub(x, mean(x, axis=-1, keepdims=True))
    var = mean(mul(centred, centred), axis=-1, keepdims=True)
    return add(mul(mul(centred, rsqrt(add(var, LN_EPS))), p("gain")), p("shift"))


def feed_forward(x, p: ParamScope) -> Tensor:
    return linear(gelu(linear(x, p("w1"), p("b1"))), p("w2"), p("b2"))


# ── Transformer Decoder ───────────────────────────────────────────────────────

def init_transformer_decoder(p: ParamScope, layers: int, d: int, rng):
    for i in range(layers):
        lp = p.scope(f"layer{i}")
        _init_norm(lp.scope("ln_self"), d)
        _init_attention(lp.scope("self_attn"), d, rng)
        _init_norm(lp.scope("ln_cross"), d)
        _init_attention(lp.scope("cross_attn"), d, rng)
        _init_norm(lp.scope("ln_ff"), d)
        _init_feed_forward(lp.scope("ff"), d, rng)
    if layers:
        _init_norm(p.scope("ln_out"), d)


def decoder_layer(x, memory, p: ParamScope, heads: int) -> Tensor:
    """Causal self-attention, cross-attention onto memory, feed-forward; each pre-normed and residual."""
    mask = causal_mask(x.shape[-2])
    h = layer_norm(x, p.scope("ln_self"))
    x = add(x, attention_block(h, h, p.scope("self_attn"), heads, mask))
    x = add(x, attention_block(layer_norm(x, p.scope("ln_cross")), memory, p.scope("cross_attn"), heads))
    return add(x, feed_forward(layer_norm(x, p.scope("ln_ff")), p.scope("ff")))


def transformer_decoder(x, memory, p: ParamScope, layers: int, heads: int) -> Tensor:
    """Zero layers is the identity."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    for i in range(layers):
        x = decoder_layer(x, memory, p.scope(f"layer{i}"), heads)
    return layer_norm(x, p.scope("ln_out")) if layers else x


# ── Ordinary Decoder ──────────────────────────────────────────────────────────

def init_ordinary_decoder(p: ParamScope, cfg: ModelConfig, rng):
    init_transformer_decoder(p, cfg.L_dec, cfg.d, rng)


def ordinary_decode(V_p, V_h_tilde, p: ParamScope, cfg: ModelConfig) -> Tensor:
    """Present rows query the compressed history: (..., M_p, d)."""
    return transformer_decoder(V_p, V_h_tilde, p, cfg.L_dec, cfg.heads)


# ── Prophet Decoder ───────────────────────────────────────────────────────────

def init_prophet_decoder(p: ParamScope, cfg: ModelConfig, rng):
    d = cfg.d
    init_transformer_decoder(p.scope("hist"), cfg.L_dec - 1, d, rng)
    init_transformer_decoder(p.scope("fut"), cfg.L_dec - 1, d, rng)
    p.add("fuse_h.w", glorot(rng, (d, 2 * d)))
    p.add("fuse_h.b", np.zeros(d))
    _init_norm(p.scope("ln_self"), d)
    _init_attention(p.scope("self_attn"), d, rng)
    p.add("fuse_m.w", glorot(rng, (d, 2 * d)))
    p.add("fuse_m.b", np.zeros(d))
    _init_norm(p.scope("ln_cross"), d)
    _init_attention(p.scope("cross_attn"), d, rng)
    _init_norm(p.scope("ln_out"), d)


def prophet_decode(V_p, V_h_tilde, V_f_tilde, p: ParamScope, cfg: ModelConfig) -> Tensor:
    """
    Separate stage: the present rows decode history and future with their
    own (L_dec−1)-layer decoders. United stage: fuse both readings, run one
    causal self-attention, then cross-attend the fused memory.
    """
    heads = cfg.heads
    H_h = transformer_decoder(V_p, V_h_tilde, p.scope("hist"), cfg.L_dec - 1, heads)
    H_f = transformer_decoder(V_p, V_f_tilde, p.scope("fut"), cfg.L_dec - 1, heads)
    H_hat = linear(concat([H_h, H_f], axis=-1), p("fuse_h.w"), p("fuse_h.b"))
    h = layer_norm(H_hat, p.scope("ln_self"))
    H_tilde = add(H_hat, attention_block(h, h, p.scope("self_attn"), heads, causal_mask(h.shape[-2])))
    memory = linear(concat([V_h_tilde, V_f_tilde], axis=-1), p("fuse_m.w"), p("fuse_m.b"))
    out = add(H_tilde, attention_block(layer_norm(H_tilde, p.scope("ln_cross")), memory,
                                       p.scope("cross_attn"), heads))
    return layer_norm(out, p.scope("ln_out"))


# ── Span Predictor ────────────────────────────────────────────────────────────

@dataclass
class SpanProbabilities:
    """Columns (start, middle, end); probs = sigmoid(logits)."""
    logits: Tensor
    probs: Tensor

    def numpy(self) -> np.ndarray:
        return self.probs.data


def init_predictor(p: ParamScope, cfg: ModelConfig, rng):
    for xi in ("s", "m", "e"):
        p.add(f"w_{xi}", glorot(rng, (cfg.d, cfg.d)))


def _query_columns(q, p: ParamScope) -> Tensor:
    """[W^s q | W^m q | W^e q] as (..., d, 3)."""
    q = q if isinstance(q, Tensor) else Tensor(q)
    q2 = reshape(q, q.shape[:-1] + (1, q.shape[-1]))
    cols = [transpose(linear(q2, p(f"w_{xi}"))) for xi in ("s", "m", "e")]
    return concat(cols, axis=-1)


def predict(H, q, p: ParamScope) -> SpanProbabilities:
    """logit^ξ_t = H_t · W^ξ q for every present row."""
    logits = matmul(H, _query_columns(q, p))
    return SpanProbabilities(logits, sigmoid(logits))


def predict_last(H, q, p: ParamScope) -> SpanProbabilities:
    """Only the row at anchor T: (..., 3)."""
    H = H if isinstance(H, Tensor) else Tensor(H)
    last = take(H, (Ellipsis, slice(H.shape[-2] - 1, None), slice(None)))
    logits = matmul(last, _query_columns(q, p))
    logits = reshape(logits, logits.shape[:-2] + (3,))
    return SpanProbabilities(logits, sigmoid(logits))
