"""
Configuration: model/training hyperparameters, named presets, key=value files.
"""
import logging
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional

from utils import ConfigError, sb, sf, si

log = logging.getLogger(__name__)


# ── Model Config ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class ModelConfig:
    # widths
    d: int = 64
    frame_dim: int = 32
    word_dim: int = 32
    # window / compression
    M_p: int = 8
    M_h: int = 32
    n: int = 8
    K: int = 2
    L_dec: int = 2
    heads: int = 4
    positional: bool = True
    gate_activation: str = "gelu"
    # labels & losses
    gamma: float = 3.0
    alpha_s: float = 0.25
    alpha_m: float = 0.21
    alpha_e: float = 0.25
    sigma_floor: float = 0.5
    lam: float = 0.3
    # optimisation
    lr: float = 1e-3
    weight_decay: float = 5e-4
    warmup_frac: float = 0.1
    epochs: int = 15
    batch_size: int = 16
    # runtime
    seed: int = 0
    workers: int = 1
    precision: int = 64
    # ablations
    disable_lfc_language: bool = False
    disable_lfc_vision: bool = False
    disable_lfc: bool = False
    disable_prophet: bool = False
    disable_prophet_history: bool = False

    def __post_init__(self):
        for k in ("d", "frame_dim", "word_dim", "M_p", "M_h", "n", "K", "L_dec",
                  "heads", "epochs", "batch_size", "workers"):
            if getattr(self, k) < 1:
                raise ConfigError(k, f"must be ≥ 1, got {getattr(self, k)}")
        if self.M_p >= self.M_h:
            raise ConfigError("M_p", f"must be < M_h ({self.M_h}), got {self.M_p}")
        if self.n >= self.M_h:
            raise ConfigError("n", f"must be < M_h ({self.M_h}), got {self.n}")
        if self.d % self.heads:
            raise ConfigError("heads", f"d={self.d} not divisible by {self.heads}")
        if self.d < 2:
            raise ConfigError("d", "router bottleneck needs d ≥ 2")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam", f"must lie in [0, 1], got {self.lam}")
        for k in ("alpha_s", "alpha_m", "alpha_e", "sigma_floor", "lr"):
            if getattr(self, k) <= 0:
                raise ConfigError(k, f"must be > 0, got {getattr(self, k)}")
        for k in ("gamma", "weight_decay"):
            if getattr(self, k) < 0:
                raise ConfigError(k, f"must be ≥ 0, got {getattr(self, k)}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac", f"must lie in [0, 1), got {self.warmup_frac}")
        if self.gate_activation not in ("gelu", "sigmoid"):
            raise ConfigError("gate_activation", f"gelu or sigmoid, got {self.gate_activation!r}")
        if self.precision not in (32, 64):
            raise ConfigError("precision", f"32 or 64, got {self.precision}")
        if self.disable_lfc_language and self.disable_lfc_vision:
            raise ConfigError("disable_lfc_vision",
                              "both branches disabled; use disable_lfc instead")

    @property
    def span(self) -> int:
        """τ = M_h + M_p frames feed one prediction."""
        return self.M_h + self.M_p

    @property
    def alphas(self):
        return (self.alpha_s, self.alpha_m, self.alpha_e)

    @property
    def uses_prophet(self) -> bool:
        return not self.disable_prophet

    def with_overrides(self, overrides: Dict[str, Any]) -> "ModelConfig":
        return replace(self, **coerce(overrides))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


_FIELDS = {f.name: f for f in fields(ModelConfig)}


def coerce(raw: Dict[str, Any]) -> Dict[str, Any]:
    """String (or loose) values → typed values; unknown keys rejected."""
    out = {}
    for k, v in raw.items():
        f = _FIELDS.get(k)
        if f is None:
            raise ConfigError(k, "unknown configuration key")
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        if kind == "bool":
            out[k] = sb(k, v)
        elif kind == "int":
            out[k] = si(k, v)
        elif kind == "float":
            out[k] = sf(k, v)
        else:
            out[k] = str(v).strip()
    return out


# ── Presets ───────────────────────────────────────────────────────────────────
# desk   = CI-speed default
# tiny   = gradient checks
# bench  = full-size dimensions for the throughput comparison (32-bit)
# M_p and n are 16 in the full-size presets.

PRESETS: Dict[str, Dict[str, Any]] = {
    "desk":        {},
    "tiny":        {"d": 8, "frame_dim": 6, "word_dim": 5, "M_p": 3, "M_h": 6, "n": 2,
                    "K": 2, "L_dec": 2, "heads": 2, "batch_size": 2},
    "activitynet": {"d": 1024, "frame_dim": 500, "word_dim": 768, "M_p": 16, "M_h": 64,
                    "n": 16, "heads": 8, "lr": 1e-4, "batch_size": 512},
    "tacos":       {"d": 1024, "frame_dim": 500, "word_dim": 768, "M_p": 16, "M_h": 64,
                    "n": 16, "heads": 8, "lr": 1e-4, "batch_size": 512},
    "mad":         {"d": 512, "frame_dim": 512, "word_dim": 512, "M_p": 16, "M_h": 32,
                    "n": 16, "heads": 8, "lr": 1e-4, "batch_size": 512},
    "bench":       {"d": 512, "frame_dim": 512, "word_dim": 512, "M_p": 32, "M_h": 512,
                    "n": 16, "K": 2, "L_dec": 2, "heads": 8, "precision": 32},
}


def preset(name: str = "desk", **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**coerce({**PRESETS[name], **overrides}))


# ── key=value Files ───────────────────────────────────────────────────────────

def read_config_file(path) -> Dict[str, Any]:
    """Parse a flat key=value file into typed overrides (comments with #)."""
    raw: Dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        raw[k] = v
    return coerce(raw)


def load_config(path, base: Optional[ModelConfig] = None) -> ModelConfig:
    cfg = (base or ModelConfig()).with_overrides(read_config_file(path))
    log.info(f"Loaded config from {path}")
    return cfg


def save_config(cfg: ModelConfig, path):
    lines = [f"{k}={str(v).lower() if isinstance(v, bool) else v}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def resolve_config(preset_name: str = "desk", config_path=None,
                   flags: Optional[Dict[str, Any]] = None) -> ModelConfig:
    """Preset < config file < flags."""
    cfg = preset(preset_name)
    if config_path:
        cfg = load_config(config_path, base=cfg)
    if flags:
        cfg = cfg.with_overrides(flags)
    return cfg
