"""Data-oblivious kernels and the access-trace harness that checks them.

Every kernel here does the same sequence of array operations, over the same
shapes, whatever values it is given: selection is done by bit-masking, never
by branching or by indexing with a data-derived integer.  Kernels report each
operation to an :class:`AccessTrace` when run under :func:`with_trace`; two
runs on equally-shaped inputs must produce equal traces.

The default scrub perturbation is ``1e-10``.
"""
from __future__ import annotations

import contextvars
import enum
import functools
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class OpKind(str, enum.Enum):
    KERNEL = "kernel"
    COMPARE = "compare"
    EQUAL = "equal"
    SELECT = "select"
    ADD = "add"
    FLUSH = "flush"


@dataclass(frozen=True)
class TraceEvent:
    op_kind: OpKind
    operand_shape: tuple
    step_index: int


@dataclass
class AccessTrace:
    events: list = field(default_factory=list)

    def record(self, op_kind: OpKind, shape) -> None:
        self.events.append(TraceEvent(op_kind, tuple(int(s) for s in shape), len(self.events)))

    def __len__(self):
        return len(self.events)

    def __eq__(self, other):
        return isinstance(other, AccessTrace) and self.events == other.events


class UntraceableKernelError(TypeError):
    pass


_recorder: contextvars.ContextVar = contextvars.ContextVar("privtrain_trace", default=None)


def _emit(op_kind: OpKind, shape) -> None:
    rec = _recorder.get()
    if rec is not None:
        rec.record(op_kind, shape)


def traceable(fn):
    """Mark ``fn`` as a kernel :func:`with_trace` may run, and log its entry."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        first = np.shape(args[0]) if args else ()
        _emit(OpKind.KERNEL, first)
        return fn(*args, **kwargs)

    wrapper.traceable = True
    return wrapper


def with_trace(kernel, *args, **kwargs):
    """Run ``kernel(*args, **kwargs)`` and return ``(result, AccessTrace)``."""
    if not getattr(kernel, "traceable", False):
        raise UntraceableKernelError(f"{getattr(kernel, '__name__', kernel)!r} is not a traceable kernel")
    trace = AccessTrace()
    token = _recorder.set(trace)
    try:
        result = kernel(*args, **kwargs)
    finally:
        _recorder.reset(token)
    return result, trace


# --------------------------------------------------------------------------
# primitives


def _uint_for(dtype) -> np.dtype:
    return np.dtype(f"u{np.dtype(dtype).itemsize}")


def _as_bits(pred) -> np.ndarray:
    pred = np.asarray(pred)
    if pred.dtype != np.bool_:
        if np.any((pred != 0) & (pred != 1)):
            raise ValueError("select predicate must be 0 or 1")
    return pred.astype(np.uint8)


@traceable
def oselect(pred, a, b):
    """``a`` where ``pred`` is 1, else ``b``; bitwise masking, elementwise over arrays."""
    bits = _as_bits(pred)
    a = np.asarray(a)
    b = np.asarray(b)
    dt = np.result_type(a, b)
    bits, a, b = np.broadcast_arrays(bits, a.astype(dt), b.astype(dt))
    _emit(OpKind.SELECT, a.shape)
    ut = _uint_for(dt)
    av = np.ascontiguousarray(a).view(ut)
    bv = np.ascontiguousarray(b).view(ut)
    # 1 -> all ones, 0 -> all zeros
    mask = np.negative(np.atleast_1d(bits.astype(ut))).reshape(bits.shape)
    out = ((av & mask) | (bv & ~mask)).view(dt).reshape(a.shape)
    return out[()] if out.ndim == 0 else out


@traceable
def omax(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    _emit(OpKind.COMPARE, np.broadcast_shapes(a.shape, b.shape))
    return oselect(np.greater(a, b), a, b)


def _oargmax(v: np.ndarray):
    """Running max and one-hot of its position along the last axis; ties keep the lower index."""
    n = v.shape[-1]
    lead = v.shape[:-1]
    best = v[..., 0]
    hot = np.zeros(v.shape, dtype=v.dtype)
    hot[..., 0] = 1
    eye = np.eye(n, dtype=v.dtype)
    for j in range(1, n):
        cand = v[..., j]
        _emit(OpKind.COMPARE, lead)
        gt = np.greater(cand, best)
        best = oselect(gt, cand, best)
        hot = oselect(gt[..., None], np.broadcast_to(eye[j], v.shape), hot)
    return np.asarray(best), np.asarray(hot)


@traceable
def oargmax(v):
    """One-hot mask of the maximum along the last axis (lowest index wins ties)."""
    v = np.asarray(v)
    if v.ndim == 0 or v.shape[-1] == 0:
        raise ValueError("oargmax needs a non-empty last axis")
    return _oargmax(v)[1]


@traceable
def omaxpool2d(x, window: int, stride: int | None = None):
    """Max-pool over the last two axes.

    Returns ``(out, mask)``; ``mask`` has shape ``out.shape + (window, window)``
    and is one-hot within each window, so the backward pass is
    ``mask * upstream`` with no stored indices.
    """
    x = np.asarray(x)
    stride = window if stride is None else stride
    if x.ndim < 2:
        raise ValueError("omaxpool2d needs at least two (spatial) axes")
    h, w = x.shape[-2:]
    if window < 1 or stride < 1 or h < window or w < window or (h - window) % stride or (w - window) % stride:
        raise ValueError(f"window {window} / stride {stride} does not tile spatial shape {(h, w)}")
    win = sliding_window_view(x, (window, window), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    flat = win.reshape(*win.shape[:-2], window * window)
    best, hot = _oargmax(flat)
    return best, hot.reshape(win.shape)


@traceable
def oonehot(index_value, classes: int):
    """One-hot encode class indices with ``classes`` equality tests (scalar or 1-D input)."""
    idx = np.asarray(index_value)
    if classes < 1:
        raise ValueError("classes must be positive")
    if idx.size and (np.any(idx < 0) or np.any(idx >= classes) or np.any(idx != np.floor(idx))):
        raise ValueError(f"class index out of range [0, {classes})")
    idx = idx.astype(np.int64)
    out = np.empty(idx.shape + (classes,), dtype=np.float64)
    for j in range(classes):
        _emit(OpKind.EQUAL, idx.shape)
        out[..., j] = np.equal(idx, j)
    return out


# --------------------------------------------------------------------------
# subnormal scrubbing


@dataclass(frozen=True)
class ScrubConfig:
    """Perturbation added to every element before it reaches timing-sensitive code.

    ``magnitude`` defaults to 1e-10, far below any weight or input scale
    that matters, yet well above the largest subnormal.
    """

    magnitude: float = 1e-10
    seed: int = 0

    def check(self, dtype) -> None:
        tiny = np.finfo(dtype).tiny
        if not (np.isfinite(self.magnitude) and self.magnitude > tiny):
            raise ValueError(f"scrub magnitude {self.magnitude} must exceed smallest normal {tiny} for {np.dtype(dtype)}")


def subnormal_mask(t) -> np.ndarray:
    """True where the exponent field is zero and the mantissa is not."""
    t = np.asarray(t)
    shape = t.shape
    t = np.ascontiguousarray(t)
    fi = np.finfo(t.dtype)
    ut = _uint_for(t.dtype)
    bits = t.view(ut)
    mant_bits = fi.nmant
    exp_mask = ut.type(((1 << fi.nexp) - 1) << mant_bits)
    mant_mask = ut.type((1 << mant_bits) - 1)
    return (((bits & exp_mask) == 0) & ((bits & mant_mask) != 0)).reshape(shape)


@traceable
def scrub_subnormals(t, cfg: ScrubConfig = ScrubConfig(), rng: np.random.Generator | None = None):
    """Add ``u ~ U[m, 2m]`` to every element, then lift anything below the smallest normal.

    The output contains no subnormals and no exact zeros, and each element
    moves by at most ``2*m + tiny``.
    """
    t = np.asarray(t)
    if not np.issubdtype(t.dtype, np.floating):
        t = t.astype(np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("scrub_subnormals needs finite input")
    cfg.check(t.dtype)
    if rng is None:
        rng = np.random.Generator(np.random.Philox(cfg.seed))
    dt = t.dtype
    u = rng.uniform(cfg.magnitude, 2 * cfg.magnitude, size=t.shape).astype(dt)
    _emit(OpKind.ADD, t.shape)
    out = np.asarray(t + u, dtype=dt)
    tiny = np.finfo(dt).tiny
    _emit(OpKind.COMPARE, t.shape)
    low = np.less(np.abs(out), tiny)
    _emit(OpKind.FLUSH, t.shape)
    return np.asarray(oselect(low, np.copysign(dt.type(tiny), out), out), dtype=dt)
