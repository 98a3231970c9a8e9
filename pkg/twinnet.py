"""
TwinNet: the ordinary (deployed) network and the prophet (training-only)
network over one parameter store, plus checkpoint IO.

Parameter paths:
    enc.*        shared query/frame encoder
    ord.lfc.*    ord.dec.*    ord.pred.*
    pro.lfc.*    pro.dec.*    pro.pred.*     (absent when disable_prophet)
"""
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app_config import ModelConfig, load_config, save_config
from compressor import FirstLayerLogits, GateValues, compress, init_compressor
from data_io import read_feature_file, write_feature_file
from decoders import (SpanProbabilities, init_ordinary_decoder, init_predictor,
                      init_prophet_decoder, ordinary_decode, predict, predict_last,
                      prophet_decode)
from encoding import embed_block, encode_queries, encode_query, init_encoder
from numerics import ParamStore, Parameter, Tensor, set_precision
from utils import ContractError, DimensionError, ValidationError, fmt_shape, seeded_rng

log = logging.getLogger(__name__)


class TwinNet:

    def __init__(self, cfg: ModelConfig, seed: Optional[int] = None):
        set_precision(cfg.precision)
        self.cfg = cfg
        self.store = ParamStore()
        rng = seeded_rng(cfg.seed if seed is None else seed)
        init_encoder(self.store.scope("enc"), cfg, rng)
        init_compressor(self.store.scope("ord.lfc"), cfg, rng)
        init_ordinary_decoder(self.store.scope("ord.dec"), cfg, rng)
        init_predictor(self.store.scope("ord.pred"), cfg, rng)
        if cfg.uses_prophet:
            init_compressor(self.store.scope("pro.lfc"), cfg, rng)
            init_prophet_decoder(self.store.scope("pro.dec"), cfg, rng)
            init_predictor(self.store.scope("pro.pred"), cfg, rng)
        log.debug(f"TwinNet: {len(self.store)} tensors, {self.store.count():,} weights")

    def __repr__(self):
        return f"TwinNet(d={self.cfg.d}, params={self.store.count():,}, prophet={self.cfg.uses_prophet})"

    # scopes
    @property
    def enc(self): return self.store.scope("enc")

    def lfc(self, net: str = "ord"): return self.store.scope(f"{net}.lfc")

    def parameters(self, net: Optional[str] = None) -> List[Parameter]:
        return list(self.store) if net is None else self.store.under(f"{net}.")

    # encoder
    def encode(self, raws: Sequence[np.ndarray]) -> Tensor:
        return encode_queries(raws, self.enc)[0]

    def encode_query(self, raw: np.ndarray) -> Tensor:
        return encode_query(raw, self.enc)[0]

    def embed(self, raw, index, valid) -> Tensor:
        return embed_block(raw, index, valid, self.enc, self.cfg)

    # ordinary network
    def ordinary(self, V_p, V_h, q, first: Optional[FirstLayerLogits] = None,
                 qterm0=None) -> Tuple[SpanProbabilities, List[GateValues]]:
        """All M_p present rows: (..., M_p, 3)."""
        mem, gates = compress(V_h, q, self.lfc("ord"), self.cfg, first, qterm0)
        H = ordinary_decode(V_p, mem, self.store.scope("ord.dec"), self.cfg)
        return predict(H, q, self.store.scope("ord.pred")), gates

    def ordinary_last(self, V_p, V_h, q, first: Optional[FirstLayerLogits] = None,
                      qterm0=None) -> Tuple[SpanProbabilities, List[GateValues]]:
        """Only the anchor row: (..., 3)."""
        mem, gates = compress(V_h, q, self.lfc("ord"), self.cfg, first, qterm0)
        H = ordinary_decode(V_p, mem, self.store.scope("ord.dec"), self.cfg)
        return predict_last(H, q, self.store.scope("ord.pred")), gates

    # prophet network
    def prophet(self, V_p, V_h, V_f, q) -> SpanProbabilities:
        if not self.cfg.uses_prophet:
            raise ContractError("prophet network is disabled for this model")
        lfc = self.lfc("pro")
        fut, _ = compress(V_f, q, lfc, self.cfg)
        if self.cfg.disable_prophet_history:
            hist = Tensor(np.zeros(fut.shape))
        else:
            hist, _ = compress(V_h, q, lfc, self.cfg)
        H = prophet_decode(V_p, hist, fut, self.store.scope("pro.dec"), self.cfg)
        return predict(H, q, self.store.scope("pro.pred"))


# ── Checkpoints ───────────────────────────────────────────────────────────────
# <dir>/config.txt   key=value ModelConfig
# <dir>/index.txt    name<TAB>file<TAB>shape, one parameter per line
# <dir>/NNNN.tgf     TGF1 matrix; vectors are stored as 1×n

def save_checkpoint(model: TwinNet, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(model.cfg, out / "config.txt")
    lines = []
    for i, p in enumerate(model.store):
        value = p.value.data
        fname = f"{i:04d}.tgf"
        write_feature_file(out / fname, value.reshape(1, -1) if value.ndim == 1 else value)
        lines.append(f"{p.name}\t{fname}\t{'x'.join(str(s) for s in value.shape)}")
    (out / "index.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info(f"Checkpoint saved: {len(lines)} tensors → {out}")
    return out


def load_checkpoint(ckpt_dir, cfg: Optional[ModelConfig] = None) -> TwinNet:
    """Rebuild the model from config.txt (or `cfg`) and overwrite every parameter."""
    ckpt = Path(ckpt_dir)
    index = ckpt / "index.txt"
    if not index.exists():
        raise ValidationError(f"{ckpt}: not a checkpoint (index.txt missing)")
    model = TwinNet(cfg or load_config(ckpt / "config.txt"))
    state = {}
    for lineno, line in enumerate(index.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            name, fname, shape = line.split("\t")
        except ValueError:
            raise ValidationError(f"{index}:{lineno}: expected name<TAB>file<TAB>shape")
        dims = tuple(int(s) for s in shape.split("x"))
        arr = read_feature_file(ckpt / fname)
        if arr.size != int(np.prod(dims)):
            raise DimensionError(f"{name}: file holds {fmt_shape(arr.shape)}, index says {fmt_shape(dims)}")
        state[name] = arr.reshape(dims)
    model.store.load_state(state)
    log.info(f"Checkpoint loaded from {ckpt}: {model}")
    return model
