"""
Training: sample construction, Gaussian span labels, weighted binary CE,
distillation from the prophet network, and the AdamW training loop with
linear warm-up and cosine decay.
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from app_config import ModelConfig
from data_io import Annotation, FeatureCache, ManifestEntry, iter_annotations, load_manifest
from decoders import SpanProbabilities
from encoding import FrameWindow, partition_window
from numerics import (AdamWState, Tape, Tensor, adamw_step, add, backward, clip, log_, mul,
                      no_grad, scale, sub, total)
from twinnet import TwinNet, save_checkpoint
from utils import NumericError, ValidationError, fmt_secs, seeded_rng

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
METRIC_COLUMNS = ["step", "L_ord", "L_pro", "L_kd", "total", "lr"]


# ── Labels ────────────────────────────────────────────────────────────────────

@dataclass
class GroundTruth:
    """labels (M_p, 3) with columns (start, middle, end); mask marks real frames."""
    labels: np.ndarray
    mask: np.ndarray


def gaussian_labels(t_s: int, t_e: int, positions, alphas=(0.25, 0.21, 0.25),
                    sigma_floor: float = 0.5) -> np.ndarray:
    """y^ξ_t = exp(−(t − t_ξ)² / 2σ_ξ²), σ_ξ = max(α_ξ (t_e − t_s), floor). → (..., 3)"""
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    centres = np.array([t_s, 0.5 * (t_s + t_e), t_e], dtype=np.float64)
    sigma = np.maximum(np.asarray(alphas, dtype=np.float64) * (t_e - t_s), sigma_floor)
    return np.exp(-((pos - centres) ** 2) / (2.0 * sigma ** 2))


# ── Samples ───────────────────────────────────────────────────────────────────

@dataclass
class SampleInstance:
    query_id: str
    T: int
    window: FrameWindow
    words: np.ndarray
    truth: GroundTruth


def anchor_range(ann: Annotation, duration: int, cfg: ModelConfig) -> Tuple[int, int]:
    return max(0, ann.t_s - cfg.M_h), min(duration - 1, ann.t_e + cfg.M_p)


def build_sample(ann: Annotation, frames: np.ndarray, words: np.ndarray, cfg: ModelConfig,
                 rng: np.random.Generator, anchor: Optional[int] = None) -> SampleInstance:
    """Anchor T uniform over [t_s − M_h, t_e + M_p] clipped to the video, unless given."""
    if anchor is None:
        lo, hi = anchor_range(ann, len(frames), cfg)
        anchor = int(rng.integers(lo, hi + 1))
    win = partition_window(frames, anchor, cfg.M_p, cfg.M_h, with_future=cfg.uses_prophet)
    labels = gaussian_labels(ann.t_s, ann.t_e, win.present_index, cfg.alphas, cfg.sigma_floor)
    truth = GroundTruth(labels * win.present_valid[:, None], win.present_valid.copy())
    return SampleInstance(ann.query_id, anchor, win, np.asarray(words), truth)


@dataclass
class Batch:
    query_ids: List[str]
    present: np.ndarray
    present_index: np.ndarray
    present_valid: np.ndarray
    history: np.ndarray
    history_index: np.ndarray
    history_valid: np.ndarray
    words: List[np.ndarray]
    labels: np.ndarray
    mask: np.ndarray
    future: Optional[np.ndarray] = None
    future_index: Optional[np.ndarray] = None
    future_valid: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.query_ids)


def collate(samples: Sequence[SampleInstance]) -> Batch:
    w = [s.window for s in samples]
    batch = Batch(
        query_ids=[s.query_id for s in samples],
        present=np.stack([x.present for x in w]),
        present_index=np.stack([x.present_index for x in w]),
        present_valid=np.stack([x.present_valid for x in w]),
        history=np.stack([x.history for x in w]),
        history_index=np.stack([x.history_index for x in w]),
        history_valid=np.stack([x.history_valid for x in w]),
        words=[s.words for s in samples],
        labels=np.stack([s.truth.labels for s in samples]),
        mask=np.stack([s.truth.mask for s in samples]),
    )
    if all(x.has_future for x in w):
        batch.future = np.stack([x.future for x in w])
        batch.future_index = np.stack([x.future_index for x in w])
        batch.future_valid = np.stack([x.future_valid for x in w])
    return batch


# ── Losses ────────────────────────────────────────────────────────────────────

def hard_sample_weights(labels: np.ndarray, probs, gamma: float) -> np.ndarray:
    """|y − p|^γ as a constant."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return np.abs(labels - np.clip(p, PROB_EPS, 1.0 - PROB_EPS)) ** gamma


def _binary_ce(target: np.ndarray, probs: Tensor) -> Tensor:
    p = clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    return scale(add(mul(target, log_(p)), mul(1.0 - target, log_(sub(1.0, p)))), -1.0)


def weighted_ce(labels: np.ndarray, probs: Tensor, gamma: float, mask: np.ndarray,
                weights: Optional[np.ndarray] = None) -> Tensor:
    """Σ over valid rows and the three columns of w·CE(y, p); w carries no gradient."""
    w = hard_sample_weights(labels, probs, gamma) if weights is None else weights
    w = w * np.asarray(mask, dtype=w.dtype)[..., None]
    return total(mul(w, _binary_ce(labels, probs)))


def kd_loss(teacher, student: Tensor, gamma: float, mask: np.ndarray, labels: np.ndarray,
            weights: Optional[np.ndarray] = None) -> Tensor:
    """Student CE against the detached teacher, weighted by the ground-truth |y − p_student|^γ."""
    target = np.clip(teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher), 0.0, 1.0)
    w = hard_sample_weights(labels, student, gamma) if weights is None else weights
    w = w * np.asarray(mask, dtype=w.dtype)[..., None]
    return total(mul(w, _binary_ce(target, student)))


def total_loss(L_ord: Tensor, L_pro: Tensor, L_kd: Tensor, lam: float) -> Tensor:
    """(1−λ)·L_ord + L_pro + λ·L_kd"""
    return add(add(scale(L_ord, 1.0 - lam), L_pro), scale(L_kd, lam))


@dataclass
class LossBreakdown:
    L_ord: float
    L_pro: float
    L_kd: float
    total: float

    def as_row(self) -> Dict[str, float]:
        return {"L_ord": self.L_ord, "L_pro": self.L_pro, "L_kd": self.L_kd, "total": self.total}


@dataclass
class Frozen:
    """Loss constants pinned at one parameter point (gradient checks)."""
    w_ord: np.ndarray
    w_pro: Optional[np.ndarray] = None
    teacher: Optional[np.ndarray] = None


@dataclass
class LossResult:
    total: Tensor
    breakdown: LossBreakdown
    ordinary: SpanProbabilities
    prophet: Optional[SpanProbabilities] = None


def compute_losses(model: TwinNet, batch: Batch, frozen: Optional[Frozen] = None) -> LossResult:
    """Forward both networks over a batch. Loss values are per-sample means of the summed terms."""
    cfg = model.cfg
    B = len(batch)
    q = model.encode(batch.words)
    V_p = model.embed(batch.present, batch.present_index, batch.present_valid)
    V_h = model.embed(batch.history, batch.history_index, batch.history_valid)
    ordinary, _ = model.ordinary(V_p, V_h, q)
    w_ord = frozen.w_ord if frozen else None
    L_ord = scale(weighted_ce(batch.labels, ordinary.probs, cfg.gamma, batch.mask, w_ord), 1.0 / B)
    prophet = None
    if cfg.uses_prophet:
        if batch.future is None:
            raise ValidationError("prophet training needs windows built with future frames")
        V_f = model.embed(batch.future, batch.future_index, batch.future_valid)
        prophet = model.prophet(V_p, V_h, V_f, q)
        w_pro = frozen.w_pro if frozen else None
        teacher = frozen.teacher if frozen and frozen.teacher is not None else prophet.probs.data
        L_pro = scale(weighted_ce(batch.labels, prophet.probs, cfg.gamma, batch.mask, w_pro), 1.0 / B)
        L_kd = scale(kd_loss(teacher, ordinary.probs, cfg.gamma, batch.mask, batch.labels, w_ord), 1.0 / B)
    else:
        L_pro = L_kd = Tensor(0.0)
    loss = total_loss(L_ord, L_pro, L_kd, cfg.lam)
    br = LossBreakdown(L_ord.item(), L_pro.item(), L_kd.item(), loss.item())
    return LossResult(loss, br, ordinary, prophet)


def freeze(model: TwinNet, batch: Batch) -> Frozen:
    """Pin weights and distillation targets at the current parameters."""
    with no_grad():
        res = compute_losses(model, batch)
    g = model.cfg.gamma
    fz = Frozen(w_ord=hard_sample_weights(batch.labels, res.ordinary.probs, g))
    if res.prophet is not None:
        fz.w_pro = hard_sample_weights(batch.labels, res.prophet.probs, g)
        fz.teacher = res.prophet.probs.data.copy()
    return fz


# ── Schedule & Step ───────────────────────────────────────────────────────────

def lr_at(step: int, total_steps: int, base: float, warmup_frac: float = 0.1) -> float:
    """Linear warm-up over the first warmup_frac of steps, then cosine decay toward 0."""
    warm = int(math.ceil(total_steps * warmup_frac))
    if step < warm:
        return base * (step + 1) / warm
    progress = (step - warm) / max(1, total_steps - warm)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def train_step(model: TwinNet, batch: Batch, opt: AdamWState, lr: float) -> LossBreakdown:
    params = model.parameters()
    with Tape() as tape:
        res = compute_losses(model, batch)
    if not np.isfinite(res.breakdown.total):
        raise NumericError(f"non-finite loss {res.breakdown.total}")
    grads = backward(tape, res.total, params)
    adamw_step(params, grads, opt, lr=lr)
    return res.breakdown


# ── Training Loop ─────────────────────────────────────────────────────────────

@dataclass
class TrainResult:
    model: TwinNet
    history: pd.DataFrame
    checkpoint: Optional[Path] = None
    seconds: float = 0.0


def _build(args) -> SampleInstance:
    entry, ann, seed, cache, cfg = args
    return build_sample(ann, cache.get(entry.frame_feature_path), cache.get(ann.query_feature_path),
                        cfg, seeded_rng(seed))


def train(manifest: Union[str, Path, List[ManifestEntry]], cfg: ModelConfig,
          out_dir=None, model: Optional[TwinNet] = None) -> TrainResult:
    """
    Shuffle annotations each epoch, build one window per annotation, take an
    AdamW step per batch. Every sample gets its own seed drawn from the run's
    generator, so the result is the same for any worker count.
    """
    t0 = time.perf_counter()
    entries = manifest if isinstance(manifest, list) else load_manifest(manifest)
    pairs = list(iter_annotations(entries))
    if not pairs:
        raise ValidationError("manifest has no annotations to train on")
    cache = FeatureCache().warm(entries)
    model = model or TwinNet(cfg)
    opt = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = seeded_rng(cfg.seed)
    per_epoch = math.ceil(len(pairs) / cfg.batch_size)
    total_steps = per_epoch * cfg.epochs
    rows = []
    step = 0
    log.info(f"Training {model} on {len(pairs)} annotations: "
             f"{cfg.epochs} epochs × {per_epoch} steps, batch {cfg.batch_size}, workers {cfg.workers}")
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(pairs))
            epoch_loss = []
            for b in range(per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                seeds = rng.integers(0, 2**32, size=len(idx))
                jobs = [(*pairs[i], int(s), cache, cfg) for i, s in zip(idx, seeds)]
                samples = list(pool.map(_build, jobs)) if cfg.workers > 1 else [_build(j) for j in jobs]
                batch = collate(samples)
                lr = lr_at(step, total_steps, cfg.lr, cfg.warmup_frac)
                try:
                    br = train_step(model, batch, opt, lr)
                except NumericError as e:
                    raise NumericError(f"step {step}: {e} (samples {', '.join(batch.query_ids)})") from e
                rows.append({"step": step, **br.as_row(), "lr": lr})
                epoch_loss.append(br.total)
                log.debug(f"step {step} lr={lr:.2e} total={br.total:.5f} ord={br.L_ord:.5f} "
                          f"pro={br.L_pro:.5f} kd={br.L_kd:.5f}")
                step += 1
            log.info(f"Epoch {epoch + 1}/{cfg.epochs}: mean loss {np.mean(epoch_loss):.5f}")
    history = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    res = TrainResult(model, history, seconds=time.perf_counter() - t0)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        history.to_csv(out / "metrics.csv", index=False)
        res.checkpoint = save_checkpoint(model, out / "checkpoint")
    log.info(f"Training done in {fmt_secs(res.seconds)}")
    return res
