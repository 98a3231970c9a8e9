"""
Numerics: dense tensors with reverse-mode differentiation, the primitive
set the grounding model is written in, parameter storage and AdamW.

A Tensor is an immutable numpy array. Primitives never write into their
inputs, so saved activations can be shared between the forward value, the
tape and the backward pass.

    with Tape() as tape:
        loss = f(x)
    grads = backward(tape, loss, params)
"""
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from utils import ContractError, DimensionError, NumericError, fmt_shape

log = logging.getLogger(__name__)


# ── Precision ─────────────────────────────────────────────────────────────────
# 64-bit is the default (gradient checks need it); 32-bit is for throughput.

_DTYPE = np.float64


def set_precision(bits: int):
    global _DTYPE
    if bits not in (32, 64):
        raise ContractError(f"precision must be 32 or 64, got {bits}")
    _DTYPE = np.float32 if bits == 32 else np.float64
    log.debug(f"Tensor precision set to {bits}-bit")


def get_dtype():
    return _DTYPE


# ── Tensor ────────────────────────────────────────────────────────────────────

class Tensor:
    """Immutable dense array; the unit every primitive consumes and produces."""

    __slots__ = ("data",)
    __array_priority__ = 100

    def __init__(self, data, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DTYPE)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor({fmt_shape(self.shape)}, {self.data.dtype})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __neg__(self): return scale(self, -1.0)
    def __getitem__(self, index): return take(self, index)

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            raise ContractError("division by a tensor is not a primitive")
        return scale(self, 1.0 / float(c))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ── Primitive Registry ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Primitive:
    """forward(*arrays, **attrs) -> array; backward(g, out, *arrays, **attrs) -> grads."""
    name: str
    forward: Callable[..., np.ndarray]
    backward: Callable[..., Tuple[Optional[np.ndarray], ...]]


PRIMITIVES: Dict[str, Primitive] = {}


def register_primitive(name: str, forward, backward, replace: bool = False) -> Primitive:
    if name in PRIMITIVES and not replace:
        raise ContractError(f"primitive {name!r} already registered")
    PRIMITIVES[name] = Primitive(name, forward, backward)
    return PRIMITIVES[name]


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(kind: str, a: np.ndarray, b: np.ndarray):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast")


# matmul ─────────────────────────────────

def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    try:
        return np.matmul(a, b)
    except ValueError:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} differ")


def _matmul_bwd(g, out, a, b):
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


# layout ─────────────────────────────────

def _transpose_fwd(a, axes=None):
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose: need rank ≥ 2, got {a.shape}")
        return np.swapaxes(a, -1, -2)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for {a.shape}")
    return np.transpose(a, axes)


def _transpose_bwd(g, out, a, axes=None):
    if axes is None:
        return (np.swapaxes(g, -1, -2),)
    return (np.transpose(g, np.argsort(axes)),)


def _reshape_fwd(a, shape):
    try:
        return a.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: {a.shape} → {shape}")


def _reshape_bwd(g, out, a, shape):
    return (g.reshape(a.shape),)


def _concat_fwd(*xs, axis=-1):
    try:
        return np.concatenate(xs, axis=axis)
    except ValueError:
        raise DimensionError(f"concat: shapes {[x.shape for x in xs]} along axis {axis}")


def _concat_bwd(g, out, *xs, axis=-1):
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _slice_fwd(a, index):
    try:
        return a[index]
    except IndexError:
        raise DimensionError(f"slice: index {index} out of range for {a.shape}")


def _slice_bwd(g, out, a, index):
    z = np.zeros_like(a)
    if any(isinstance(i, (list, np.ndarray)) for i in index):
        np.add.at(z, index, g)   # fancy indices may repeat
    else:
        z[index] = g
    return (z,)


# elementwise ────────────────────────────

def _add_fwd(a, b):
    _broadcast_check("add", a, b)
    return a + b


def _add_bwd(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(a, b):
    _broadcast_check("sub", a, b)
    return a - b


def _sub_bwd(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _mul_fwd(a, b):
    _broadcast_check("mul", a, b)
    return a * b


def _mul_bwd(g, out, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _scale_fwd(a, c):
    return a * c


def _scale_bwd(g, out, a, c):
    return (g * c,)


def _exp_bwd(g, out, a):
    return (g * out,)


def _log_fwd(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(a)


def _log_bwd(g, out, a):
    return (g / a,)


def _tanh_bwd(g, out, a):
    return (g * (1.0 - out * out),)


def _sigmoid_fwd(a):
    # tanh form never overflows and gives sigmoid(0) = 0.5 exactly
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _sigmoid_bwd(g, out, a):
    return (g * out * (1.0 - out),)


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_K = 0.044715


def _gelu_fwd(a):
    return 0.5 * a * (1.0 + np.tanh(_GELU_C * (a + _GELU_K * a * a * a)))


def _gelu_bwd(g, out, a):
    t = np.tanh(_GELU_C * (a + _GELU_K * a * a * a))
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * a * a)
    return (g * (0.5 * (1.0 + t) + 0.5 * a * dt),)


def _rsqrt_fwd(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        return 1.0 / np.sqrt(a)


def _rsqrt_bwd(g, out, a):
    return (g * -0.5 * out * out * out,)


def _clip_fwd(a, lo, hi):
    return np.clip(a, lo, hi)


def _clip_bwd(g, out, a, lo, hi):
    return (g * ((a >= lo) & (a <= hi)),)


def _masked_fill_fwd(a, mask, value):
    try:
        mask = np.broadcast_to(mask, a.shape)
    except ValueError:
        raise DimensionError(f"masked_fill: mask {np.shape(mask)} vs {a.shape}")
    return np.where(mask, value, a)


def _masked_fill_bwd(g, out, a, mask, value):
    return (g * ~np.broadcast_to(mask, a.shape),)


# reductions ─────────────────────────────

def _expand_like(g, a, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, a.shape)


def _mean_fwd(a, axis=None, keepdims=False):
    return np.mean(a, axis=axis, keepdims=keepdims)


def _mean_bwd(g, out, a, axis=None, keepdims=False):
    count = a.size // max(out.size, 1) if a.size else 1
    return (_expand_like(g, a, axis, keepdims) / count,)


def _sum_fwd(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims)


def _sum_bwd(g, out, a, axis=None, keepdims=False):
    return (np.array(_expand_like(g, a, axis, keepdims)),)


def _softmax_fwd(a, axis=-1, mask=None):
    if mask is not None:
        try:
            mask = np.broadcast_to(mask, a.shape)
        except ValueError:
            raise DimensionError(f"softmax: mask {np.shape(mask)} vs logits {a.shape}")
        if np.any(np.all(mask, axis=axis)):
            raise ContractError("softmax: a row is fully masked")
        a = np.where(mask, -np.inf, a)
    e = np.exp(a - np.max(a, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def _softmax_bwd(g, out, a, axis=-1, mask=None):
    return ((g - np.sum(g * out, axis=axis, keepdims=True)) * out,)


for _name, _fwd, _bwd in [
    ("matmul", _matmul_fwd, _matmul_bwd),
    ("transpose", _transpose_fwd, _transpose_bwd),
    ("reshape", _reshape_fwd, _reshape_bwd),
    ("concat", _concat_fwd, _concat_bwd),
    ("slice", _slice_fwd, _slice_bwd),
    ("add", _add_fwd, _add_bwd),
    ("sub", _sub_fwd, _sub_bwd),
    ("mul", _mul_fwd, _mul_bwd),
    ("scale", _scale_fwd, _scale_bwd),
    ("exp", np.exp, _exp_bwd),
    ("log", _log_fwd, _log_bwd),
    ("tanh", np.tanh, _tanh_bwd),
    ("sigmoid", _sigmoid_fwd, _sigmoid_bwd),
    ("gelu", _gelu_fwd, _gelu_bwd),
    ("rsqrt", _rsqrt_fwd, _rsqrt_bwd),
    ("clip", _clip_fwd, _clip_bwd),
    ("masked_fill", _masked_fill_fwd, _masked_fill_bwd),
    ("mean", _mean_fwd, _mean_bwd),
    ("sum", _sum_fwd, _sum_bwd),
    ("softmax", _softmax_fwd, _softmax_bwd),
]:
    register_primitive(_name, _fwd, _bwd)


# ── Tape ──────────────────────────────────────────────────────────────────────

@dataclass
class Record:
    kind: str
    inputs: Tuple[int, ...]
    output: int
    attrs: dict
    args: Tuple[np.ndarray, ...]
    out: np.ndarray


_local = threading.local()


def _stack() -> List[Optional["Tape"]]:
    s = getattr(_local, "tapes", None)
    if s is None:
        s = _local.tapes = []
    return s


def active_tape() -> Optional["Tape"]:
    s = _stack()
    return s[-1] if s else None


class no_grad:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        _stack().append(None)

    def __exit__(self, *exc):
        _stack().pop()


class Tape:
    """
    Ordered record of primitive applications. Tapes are per-thread; nest
    `no_grad()` inside one to run untracked work.
    """

    def __init__(self):
        self.records: List[Record] = []
        self.output: Optional[int] = None
        self._node: Dict[int, int] = {}
        self._keep: List[Tensor] = []
        self._leaves: Dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()

    def __len__(self):
        return len(self.records)

    def node(self, t: Tensor) -> Optional[int]:
        return self._node.get(id(t))

    def _register(self, t: Tensor, leaf: bool) -> int:
        nid = self._node.get(id(t))
        if nid is None:
            nid = len(self._keep)
            self._node[id(t)] = nid
            self._keep.append(t)   # pins id(t) for the tape's lifetime
            if leaf:
                self._leaves[nid] = t.data
        return nid

    def record(self, kind: str, inputs: Sequence[Tensor], out: Tensor, attrs: dict):
        ids = tuple(self._register(t, leaf=True) for t in inputs)
        oid = self._register(out, leaf=False)
        self.records.append(Record(kind, ids, oid, attrs,
                                   tuple(t.data for t in inputs), out.data))

    def gradients(self, loss: Tensor, wrt: Sequence[Tensor]) -> List[np.ndarray]:
        """d loss / d t for each t in `wrt`; zeros where t is unreached."""
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        lid = self._node.get(id(loss))
        if lid is None or lid in self._leaves:
            raise ContractError("loss was not produced under this tape")
        self.output = lid
        acc: Dict[int, np.ndarray] = {lid: np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = acc.get(rec.output)
            if g is None:
                continue
            grads = PRIMITIVES[rec.kind].backward(g, rec.out, *rec.args, **rec.attrs)
            for nid, gi in zip(rec.inputs, grads):
                if gi is None:
                    continue
                acc[nid] = acc[nid] + gi if nid in acc else gi
        result = []
        for t in wrt:
            g = acc.get(self._node.get(id(t), -1))
            result.append(np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.data.dtype))
        return result

    def replay(self, leaves: Optional[Dict[int, np.ndarray]] = None) -> np.ndarray:
        """Recompute the forward pass from the stored leaves (optionally replaced)."""
        if not self.records:
            raise ContractError("empty tape")
        vals = dict(self._leaves)
        if leaves:
            vals.update(leaves)
        for rec in self.records:
            vals[rec.output] = PRIMITIVES[rec.kind].forward(
                *[vals[i] for i in rec.inputs], **rec.attrs)
        return vals[self.output if self.output is not None else self.records[-1].output]


def apply_primitive(kind: str, inputs: Sequence, **attrs) -> Tensor:
    prim = PRIMITIVES.get(kind)
    if prim is None:
        raise ContractError(f"unknown primitive {kind!r}")
    ts = [as_tensor(x) for x in inputs]
    raw = np.asarray(prim.forward(*[t.data for t in ts], **attrs))
    out = Tensor(raw, dtype=raw.dtype if raw.dtype.kind == "f" else None)
    if not np.all(np.isfinite(out.data)):
        raise NumericError(f"{kind} produced non-finite values "
                           f"(inputs {[fmt_shape(t.shape) for t in ts]})")
    tape = active_tape()
    if tape is not None:
        tape.record(kind, ts, out, attrs)
    return out


# ── Functional API ────────────────────────────────────────────────────────────

def matmul(a, b): return apply_primitive("matmul", [a, b])
def transpose(a, axes=None): return apply_primitive("transpose", [a], axes=None if axes is None else tuple(axes))
def reshape(a, shape): return apply_primitive("reshape", [a], shape=tuple(shape))
def concat(xs, axis=-1): return apply_primitive("concat", list(xs), axis=axis)
def add(a, b): return apply_primitive("add", [a, b])
def sub(a, b): return apply_primitive("sub", [a, b])
def mul(a, b): return apply_primitive("mul", [a, b])
def scale(a, c: float): return apply_primitive("scale", [a], c=float(c))
def exp(a): return apply_primitive("exp", [a])
def log_(a): return apply_primitive("log", [a])
def tanh(a): return apply_primitive("tanh", [a])
def sigmoid(a): return apply_primitive("sigmoid", [a])
def gelu(a): return apply_primitive("gelu", [a])
def rsqrt(a): return apply_primitive("rsqrt", [a])
def clip(a, lo: float, hi: float): return apply_primitive("clip", [a], lo=float(lo), hi=float(hi))
def mean(a, axis=None, keepdims=False): return apply_primitive("mean", [a], axis=axis, keepdims=keepdims)
def total(a, axis=None, keepdims=False): return apply_primitive("sum", [a], axis=axis, keepdims=keepdims)


def take(a, index):
    if not isinstance(index, tuple):
        index = (index,)
    return apply_primitive("slice", [a], index=index)


def softmax(a, axis: int = -1, mask: Optional[np.ndarray] = None):
    """Mask entries that are True get exactly zero weight."""
    return apply_primitive("softmax", [a], axis=axis,
                           mask=None if mask is None else np.asarray(mask, dtype=bool))


def masked_fill(a, mask: np.ndarray, value: float):
    return apply_primitive("masked_fill", [a], mask=np.asarray(mask, dtype=bool), value=float(value))


def linear(x, weight, bias=None) -> Tensor:
    """Row-wise affine map with weight stored (out, in): x Wᵀ + b."""
    y = matmul(x, transpose(weight))
    return y if bias is None else add(y, bias)


# ── Attention ────────────────────────────────────────────────────────────────

def causal_mask(m: int) -> np.ndarray:
    """True above the diagonal: position i may not see positions > i."""
    return np.triu(np.ones((m, m), dtype=bool), k=1)


def scaled_dot_attention(queries, keys, values, mask: Optional[np.ndarray] = None,
                         heads: int = 1) -> Tensor:
    """
    Multi-head scaled dot-product attention without projections.
    queries [..., m, d], keys/values [..., p, d], mask [m, p] (True = blocked).
    """
    queries, keys, values = as_tensor(queries), as_tensor(keys), as_tensor(values)
    *batch, m, d = queries.shape
    p = keys.shape[-2]
    if keys.shape[-1] != d or values.shape[-1] != d or values.shape[-2] != p:
        raise DimensionError(f"attention: q {queries.shape}, k {keys.shape}, v {values.shape}")
    if d % heads:
        raise DimensionError(f"attention: d={d} not divisible by heads={heads}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != (m, p):
            raise DimensionError(f"attention: mask {mask.shape} vs scores {(m, p)}")
        if np.any(np.all(mask, axis=-1)):
            raise ContractError("attention: a query row is fully masked")

    dh = d // heads
    nb = len(batch)
    perm = tuple(range(nb)) + (nb + 1, nb, nb + 2)

    def split(t, length):
        return transpose(reshape(t, (*batch, length, heads, dh)), perm)

    qh, kh, vh = split(queries, m), split(keys, p), split(values, p)
    scores = scale(matmul(qh, transpose(kh)), 1.0 / np.sqrt(dh))
    weights = softmax(scores, axis=-1, mask=mask)
    out = matmul(weights, vh)
    return reshape(transpose(out, perm), (*batch, m, d))


# ── Parameters ────────────────────────────────────────────────────────────────

@dataclass(eq=False)
class Parameter:
    name: str
    value: Tensor
    grad: np.ndarray = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value.data)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value.data)


def glorot(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    """Uniform in ±sqrt(6/(fan_in+fan_out)); weight layout is (out, in)."""
    fan_out, fan_in = (shape[0], shape[-1]) if len(shape) > 1 else (shape[0], shape[0])
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ParamStore:
    """Flat, ordered name-path → Parameter map."""

    def __init__(self):
        self._params: Dict[str, Parameter] = {}

    def add(self, name: str, value) -> Parameter:
        if name in self._params:
            raise ContractError(f"parameter {name!r} registered twice")
        p = Parameter(name, Tensor(value))
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        try:
            return self._params[name]
        except KeyError:
            raise ContractError(f"no parameter named {name!r}")

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def under(self, prefix: str) -> List[Parameter]:
        return [p for n, p in self._params.items() if n.startswith(prefix)]

    def scope(self, prefix: str) -> "ParamScope":
        return ParamScope(self, prefix)

    def count(self) -> int:
        return int(sum(p.value.data.size for p in self))

    def state(self) -> Dict[str, np.ndarray]:
        return {n: p.value.data for n, p in self._params.items()}

    def load_state(self, state: Dict[str, np.ndarray]):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ContractError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, arr in state.items():
            p = self._params[n]
            if tuple(arr.shape) != p.shape:
                raise DimensionError(f"{n}: stored {arr.shape} vs expected {p.shape}")
            p.value = Tensor(arr)
            p.zero_grad()


class ParamScope:
    """A prefix view onto a ParamStore: scope("w1") reads "<prefix>.w1"."""

    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def _full(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def __call__(self, name: str) -> Tensor:
        return self.store[self._full(name)].value

    def add(self, name: str, value) -> Parameter:
        return self.store.add(self._full(name), value)

    def scope(self, name: str) -> "ParamScope":
        return ParamScope(self.store, self._full(name))

    def has(self, name: str) -> bool:
        return self._full(name) in self.store


# ── Backward & Gradient Check ─────────────────────────────────────────────────

def backward(tape: Tape, loss: Tensor, params: Sequence[Parameter]) -> Dict[Parameter, np.ndarray]:
    """Gradients of `loss` for every parameter, accumulated into `.grad` as well."""
    grads = tape.gradients(loss, [p.value for p in params])
    out = {}
    for p, g in zip(params, grads):
        p.grad = p.grad + g
        out[p] = g
    return out


def grad_check(f: Callable[[Tensor], Tensor], point, epsilon: float = 1e-5) -> float:
    """
    Max over coordinates of |analytic − central difference| / max(1, |analytic|).
    Always evaluated in 64-bit.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ContractError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with Tape() as tape:
        x = Tensor(x0, dtype=np.float64)
        (g,) = tape.gradients(f(x), [x])
    numeric = np.zeros_like(x0)
    with no_grad():
        for idx in np.ndindex(x0.shape):
            xp, xm = x0.copy(), x0.copy()
            xp[idx] += epsilon
            xm[idx] -= epsilon
            fp = float(f(Tensor(xp, dtype=np.float64)).data)
            fm = float(f(Tensor(xm, dtype=np.float64)).data)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"finite difference non-finite at {idx}")
            numeric[idx] = (fp - fm) / (2.0 * epsilon)
    if not x0.size:
        return 0.0
    return float(np.max(np.abs(g - numeric) / np.maximum(1.0, np.abs(g))))


# ── AdamW ─────────────────────────────────────────────────────────────────────

@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Sequence[Parameter], grads: Dict[Parameter, np.ndarray],
               state: AdamWState, lr: Optional[float] = None) -> AdamWState:
    """One AdamW update with bias correction; decay is decoupled from the moments."""
    lr = state.lr if lr is None else lr
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in params:
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.value.data)
        if g.shape != p.shape:
            raise DimensionError(f"{p.name}: grad {g.shape} vs value {p.shape}")
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        w = p.value.data
        w = w - lr * state.weight_decay * w - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.value = Tensor(w, dtype=p.value.data.dtype)
        p.zero_grad()
    return state
