"""Reverse-mode autodiff over dense float64 numpy arrays.

A thread-local tape records every primitive applied to tensors that require
gradients; ``backward`` replays it in reverse (recording order is already
topological). Covers exactly what the rest of the package needs: MLPs,
forward kinematics (fused Rodrigues), perspective projection, robust losses,
and the diffusion-guidance chain.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

# When True every primitive asserts its output is finite (debug mode).
DEBUG_CHECK_FINITE = False


class Tape:
    """Ordered record of primitive ops: (output, inputs, vjp)."""

    def __init__(self):
        self.records = []

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.enabled = True


_state = _State()


def active_tape() -> Tape:
    return _state.tape


class no_grad:
    """Context manager: ops inside are not recorded on the tape."""

    def __enter__(self):
        self._prev = _state.enabled
        _state.enabled = False
        return self

    def __exit__(self, *exc):
        _state.enabled = self._prev
        return False


class Tensor:
    """Dense float64 array with an optional accumulated gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def _record(out: Tensor, inputs, vjp):
    """vjp(g) -> tuple of gradient arrays aligned with inputs (None allowed)."""
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced on tape")
    if _state.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _state.tape.records.append((out, tuple(inputs), vjp))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient g down to the given (broadcast-source) shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return _record(out, (a, b), lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)
    ad, bd = a.data, b.data
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)),
    )


def matmul(a, b):
    """Matrix product with broadcasting over leading batch dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul expects >=2-d operands, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(out, (a, b), vjp)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.size / out.size
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / n,)

    return _record(out, (a,), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    old = a.shape
    return _record(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    a = as_tensor(a)
    out = Tensor(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx):
    a = as_tensor(a)
    out = Tensor(a.data[idx])
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _record(out, (a,), vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record(out, tuple(tensors), vjp)


def sin(a):
    a = as_tensor(a)
    out = Tensor(np.sin(a.data))
    ad = a.data
    return _record(out, (a,), lambda g: (g * np.cos(ad),))


def cos(a):
    a = as_tensor(a)
    out = Tensor(np.cos(a.data))
    ad = a.data
    return _record(out, (a,), lambda g: (-g * np.sin(ad),))


def exp(a):
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    od = out.data
    return _record(out, (a,), lambda g: (g * od,))


def log(a):
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    ad = a.data
    return _record(out, (a,), lambda g: (g / ad,))


def sqrt(a):
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data))
    od = out.data
    return _record(out, (a,), lambda g: (g / (2.0 * od),))


def tanh(a):
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data))
    od = out.data
    return _record(out, (a,), lambda g: (g * (1.0 - od * od),))


def softplus(a):
    a = as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.data))
    sig = _expit(a.data)
    return _record(out, (a,), lambda g: (g * sig,))


def _expit(x):
    # numerically stable logistic
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = as_tensor(a)
    out = Tensor(_expit(np.asarray(a.data, dtype=np.float64)))
    od = out.data
    return _record(out, (a,), lambda g: (g * od * (1.0 - od),))


def atan2(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.arctan2(a.data, b.data))
    ad, bd = a.data, b.data
    den = ad * ad + bd * bd

    def vjp(g):
        return _unbroadcast(g * bd / den, a.shape), _unbroadcast(-g * ad / den, b.shape)

    return _record(out, (a, b), vjp)


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient passes through strictly inside the bounds."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    mask = ((a.data > lo) & (a.data < hi)).astype(np.float64)
    return _record(out, (a,), lambda g: (g * mask,))


def norm(a, axis=-1, keepdims=False, eps=1e-12):
    """Euclidean norm along an axis; eps keeps the gradient finite at zero."""
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True) + eps)
    out = Tensor(n if keepdims else np.squeeze(n, axis=axis))
    ad = a.data

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * ad / n,)

    return _record(out, (a,), vjp)


def cross(a, b):
    """Cross product over the last axis (length 3)."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.cross(a.data, b.data))
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(np.cross(bd, g), a.shape), _unbroadcast(np.cross(g, ad), b.shape)

    return _record(out, (a, b), vjp)


# Rodrigues coefficients a(s) = sin(t)/t and b(s) = (1-cos t)/t^2 as functions
# of s = t^2, with series branches below t = 1e-4 to dodge the 0/0 at t = 0.
_SMALL_ANGLE_SQ = 1e-8

_GEN = np.zeros((3, 3, 3))
_GEN[0, 1, 2], _GEN[0, 2, 1] = -1.0, 1.0
_GEN[1, 0, 2], _GEN[1, 2, 0] = 1.0, -1.0
_GEN[2, 0, 1], _GEN[2, 1, 0] = -1.0, 1.0


def _rodrigues_coeffs(s):
    small = s < _SMALL_ANGLE_SQ
    t = np.sqrt(np.where(small, 1.0, s))
    a = np.where(small, 1.0 - s / 6.0 + s * s / 120.0, np.sin(t) / t)
    b = np.where(small, 0.5 - s / 24.0 + s * s / 720.0, (1.0 - np.cos(t)) / np.where(small, 1.0, s))
    return a, b, t, small


def _skew(w):
    K = np.zeros(w.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -w[..., 2], w[..., 1]
    K[..., 1, 0], K[..., 1, 2] = w[..., 2], -w[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -w[..., 1], w[..., 0]
    return K


def rodrigues(w):
    """Axis-angle vectors (..., 3) -> rotation matrices (..., 3, 3).

    Fused primitive with an analytic backward; series expansion below
    angle 1e-4 keeps both directions smooth at the identity.
    """
    w = as_tensor(w)
    wd = w.data
    s = np.sum(wd * wd, axis=-1)
    a, b, t, small = _rodrigues_coeffs(s)
    K = _skew(wd)
    KK = K @ K
    R = np.broadcast_to(np.eye(3), K.shape).copy()
    R += a[..., None, None] * K + b[..., None, None] * KK
    out = Tensor(R)

    def vjp(g):
        da_ds = np.where(
            small,
            -1.0 / 6.0 + s / 60.0 - s * s / 1680.0,
            (t * np.cos(t) - np.sin(t)) / np.where(small, 1.0, 2.0 * s * t),
        )
        db_ds = np.where(
            small,
            -1.0 / 24.0 + s / 360.0 - s * s / 13440.0,
            (t * np.sin(t) - 2.0 * (1.0 - np.cos(t))) / np.where(small, 1.0, 2.0 * s * s),
        )
        t1 = np.sum(g * K, axis=(-2, -1))
        t2 = np.sum(g * KK, axis=(-2, -1))
        gw = 2.0 * wd * (da_ds * t1 + db_ds * t2)[..., None]
        gw += a[..., None] * _vee_like(g)
        KT = np.swapaxes(K, -1, -2)
        gw += b[..., None] * _vee_like(g @ KT + KT @ g)
        return (gw,)

    return _record(out, (w,), vjp)


def _vee_like(A):
    """<G_k, A> for the three skew generators, stacked on the last axis."""
    return np.stack(
        (
            A[..., 2, 1] - A[..., 1, 2],
            A[..., 0, 2] - A[..., 2, 0],
            A[..., 1, 0] - A[..., 0, 1],
        ),
        axis=-1,
    )


# ---------------------------------------------------------------------------
# backward pass and optimizer step
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape | None = None):
    """Populate .grad on every requires_grad leaf reachable from loss.

    Repeated calls without zeroing accumulate additively into leaf grads.
    """
    if loss.size != 1:
        raise ValueError("backward requires a scalar loss")
    tape = tape if tape is not None else _state.tape
    # id -> (tensor, pending gradient); entries left after the sweep are leaves
    pending: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}
    for out, inputs, vjp in reversed(tape.records):
        entry = pending.pop(id(out), None)
        if entry is None:
            continue
        grads = vjp(entry[1])
        for inp, gin in zip(inputs, grads):
            if gin is None or not inp.requires_grad:
                continue
            slot = pending.get(id(inp))
            if slot is None:
                pending[id(inp)] = [inp, gin]
            else:
                slot[1] = slot[1] + gin
    for tensor, g in pending.values():
        tensor.grad = g if tensor.grad is None else tensor.grad + g


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adam_init(params) -> list[AdamState]:
    return [AdamState(np.zeros_like(p.data), np.zeros_like(p.data)) for p in params]


def sgd_adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update, in place on params' data buffers."""
    b1, b2 = betas
    for p, g, st in zip(params, grads, state):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.data.shape}")
        st.step += 1
        st.m = b1 * st.m + (1.0 - b1) * g
        st.v = b2 * st.v + (1.0 - b2) * g * g
        mhat = st.m / (1.0 - b1 ** st.step)
        vhat = st.v / (1.0 - b2 ** st.step)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
    return params, state
