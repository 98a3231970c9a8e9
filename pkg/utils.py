"""
Utilities: error hierarchy, safe conversions, formatting.
"""
import logging
from typing import Any, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)


# ── Errors ────────────────────────────────────────────────────────────────────

class GroundingError(Exception):
    """Root of every error raised by this package."""


class DimensionError(GroundingError):
    """Shapes do not conform to an operation's rule."""


class NumericError(GroundingError):
    """NaN or Inf produced or consumed."""


class ContractError(GroundingError):
    """A documented precondition was violated."""


class FormatError(GroundingError):
    """Feature file is malformed. `offset` is the byte where reading failed."""

    def __init__(self, msg: str, offset: int = 0):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class ValidationError(GroundingError):
    """Manifest entry, annotation or path failed validation."""


class ConfigError(GroundingError):
    """Bad or unknown configuration key."""

    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


# ── Safe Type Conversion ─────────────────────────────────────────────────────
#
# Unlike a lenient UI parser these raise: a silently zeroed hyperparameter
# is worse than a failed run.

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def si(key: str, v: Any) -> int:
    """Strict int."""
    try:
        f = float(str(v).strip())
    except (ValueError, TypeError):
        raise ConfigError(key, f"expected an integer, got {v!r}")
    if not f.is_integer():
        raise ConfigError(key, f"expected an integer, got {v!r}")
    return int(f)


def sf(key: str, v: Any) -> float:
    """Strict finite float."""
    try:
        f = float(str(v).strip())
    except (ValueError, TypeError):
        raise ConfigError(key, f"expected a number, got {v!r}")
    if not np.isfinite(f):
        raise ConfigError(key, f"expected a finite number, got {v!r}")
    return f


def sb(key: str, v: Any) -> bool:
    """Strict bool: true/false, yes/no, on/off, 1/0."""
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in _TRUE:
        return True
    if s in _FALSE:
        return False
    raise ConfigError(key, f"expected a boolean, got {v!r}")


def parse_list(raw: str, cast=float) -> list:
    """'1,5,10' → [1, 5, 10]. Empty items are skipped."""
    return [cast(x.strip()) for x in str(raw).split(",") if x.strip()]


# ── Numeric Guards ────────────────────────────────────────────────────────────

def require_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        bad = int(np.argmax(~np.isfinite(np.asarray(a)).ravel()))
        raise NumericError(f"{what}: non-finite value at flat index {bad}")
    return a


def seeded_rng(seed: Optional[int]) -> np.random.Generator:
    return np.random.default_rng(seed)


# ── Formatting ────────────────────────────────────────────────────────────────

def fmt_rate(steps_per_s: float) -> str:
    if steps_per_s >= 1e3: return f"{steps_per_s/1e3:.2f}K steps/s"
    return f"{steps_per_s:.2f} steps/s"


def fmt_secs(s: float) -> str:
    if s >= 3600: return f"{s/3600:.1f}h"
    if s >= 60: return f"{s/60:.1f}m"
    if s >= 1: return f"{s:.1f}s"
    return f"{s*1e3:.1f}ms"


def fmt_shape(shape: Sequence[int]) -> str:
    return "×".join(str(x) for x in shape) if len(shape) else "scalar"
