"""Dense tensors with reverse-mode automatic differentiation.

A thread-local tape records every operation whose inputs require gradients;
``backward`` on a scalar loss replays it in exact reverse execution order.
Gradients never accumulate across calls: ``backward`` clears all grads first,
so calling it twice recomputes the same values (documented contract).

Dtypes: float32 is the training default, float64 is used for gradient
checking. Operands of one op must share a dtype; python scalars are cast.

Broadcasting in add/mul is deliberately narrow: scalars, equal shapes, or a
lower-rank operand aligned to the trailing axes of the other (e.g. a (D,)
vector over (L, D) rows). Size-1 axis stretching is rejected.

Tensors are value-like and may move between threads; the tape is
thread-local, so each thread records and differentiates independently.
matmul delegates to the BLAS behind numpy, which is run-to-run
deterministic for a fixed machine and thread count (the determinism tests
assert byte-identical training); reduction order across BLAS builds is
covered by the documented 1e-5 matmul tolerance.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

from mltr import kernels
from mltr.errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32

# When true, every op output is scanned for NaN/Inf (enabled by the tests).
CHECK_FINITE = False

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense n-dimensional value, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # convenience arithmetic; all routed through the traced ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add(self, -float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    """One executed op: output, inputs, and the gradient rule."""

    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple, backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_tls = threading.local()


def _state():
    if not hasattr(_tls, "tape"):
        _tls.tape = []
        _tls.recording = True
    return _tls


def tape_len() -> int:
    return len(_state().tape)


def reset_tape() -> None:
    """Drop all recorded operations (call between training steps)."""
    _state().tape.clear()


def is_recording() -> bool:
    return _state().recording


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    st = _state()
    prev = st.recording
    st.recording = False
    try:
        yield
    finally:
        st.recording = prev


def _finish(out_data: np.ndarray, inputs: Sequence, backward: Callable) -> Tensor:
    """Wrap an op result, recording it on the tape when gradients are needed."""
    if CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise ContractError("non-finite value produced by a forward op")
    st = _state()
    tensor_inputs = tuple(t for t in inputs if isinstance(t, Tensor))
    needs = st.recording and any(t.requires_grad for t in tensor_inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        st.tape.append(_Record(out, tensor_inputs, backward))
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad for every requires_grad tensor reachable from loss.

    All grads on the tape are cleared first; there is no accumulation
    across calls. Unreachable leaves end with grad None.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    st = _state()
    if not st.tape:
        raise ContractError("backward called with an empty tape")
    for rec in st.tape:
        rec.out.grad = None
        for t in rec.inputs:
            t.grad = None
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for rec in reversed(st.tape):
        g = rec.out.grad
        if g is None:
            continue
        grads = rec.backward(g)
        for t, gt in zip(rec.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = gt
            else:
                t.grad = t.grad + gt


def _as_tensor_pair(a, b):
    """Coerce the non-Tensor side of a binary op to the other's dtype."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.data.dtype != b.data.dtype:
            raise ContractError(
                f"dtype mismatch: {a.data.dtype.name} vs {b.data.dtype.name}")
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    raise ContractError("at least one operand must be a Tensor")


def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    if sa == sb or sa == () or sb == ():
        return True
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) == len(big):
        return False
    return big[len(big) - len(small):] == small


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over the leading axes added by broadcasting back to shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra))).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor_pair(a, b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish(out, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor_pair(a, b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data * b.data

    def back(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _finish(out, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * a.data.dtype.type(c)

    def back(g):
        return (g * a.data.dtype.type(c),)

    return _finish(out, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-D x 2-D, batched 3-D x 3-D, or 3-D x 2-D."""
    a, b = _as_tensor_pair(a, b)
    sa, sb = a.shape, b.shape
    ok = (len(sa) == 2 and len(sb) == 2 and sa[1] == sb[0]) \
        or (len(sa) == 3 and len(sb) == 3 and sa[0] == sb[0] and sa[2] == sb[1]) \
        or (len(sa) == 3 and len(sb) == 2 and sa[2] == sb[0])
    if not ok:
        raise ShapeError(f"matmul: incompatible shapes {sa} x {sb}")
    out = a.data @ b.data

    def back(g):
        if len(sa) == 2:
            return g @ b.data.T, a.data.T @ g
        if len(sb) == 3:
            return (g @ b.data.transpose(0, 2, 1),
                    a.data.transpose(0, 2, 1) @ g)
        ga = g @ b.data.T
        gb = a.data.reshape(-1, sa[2]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _finish(out, (a, b), back)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def back(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _finish(out, (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if np.prod(a.shape, dtype=int) != np.prod(shape, dtype=int):
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = a.data.reshape(shape)

    def back(g):
        return (g.reshape(a.shape),)

    return _finish(out, (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for i in range(len(sizes)):
            idx[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(grads)

    return _finish(out, tuple(tensors), back)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if axis >= a.data.ndim or start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}:{start + length}) on axis {axis} of shape {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    out = np.ascontiguousarray(a.data[tuple(idx)])

    def back(g):
        full = np.zeros_like(a.data)
        full[tuple(idx)] = g
        return (full,)

    return _finish(out, (a,), back)


def index_select(a: Tensor, idx) -> Tensor:
    """Gather rows: out[i] = a[idx[i]]. Gradient scatter-adds back."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"index_select: index must be 1-D, got {idx.shape}")
    n = a.shape[0] if a.data.ndim else 0
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise IndexError(f"index_select: index {bad} out of range [0, {n})")
    out = np.ascontiguousarray(a.data[idx])

    def back(g):
        ga = np.zeros_like(a.data)
        cols = int(np.prod(a.shape[1:], dtype=int)) if a.data.ndim > 1 else 1
        kernels.scatter_add_rows(ga.reshape(n, cols),
                                 idx, g.reshape(len(idx), cols))
        return (ga,)

    return _finish(out, (a,), back)


def row_select(mask, a: Tensor, b: Tensor) -> Tensor:
    """Per-row choice: out[i] = a[i] where mask[i] else b[i], copied bit-exactly."""
    a, b = _as_tensor_pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"row_select: shapes differ {a.shape} vs {b.shape}")
    mask = np.asarray(mask).astype(bool)
    if mask.shape != (a.shape[0],):
        raise ShapeError(
            f"row_select: mask length {mask.shape} does not match rows {a.shape}")
    sel = mask.reshape((-1,) + (1,) * (a.data.ndim - 1))
    out = np.where(sel, a.data, b.data)

    def back(g):
        zero = np.zeros_like(g)
        return np.where(sel, g, zero), np.where(sel, zero, g)

    return _finish(out, (a, b), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along axis (max-subtraction)."""
    if axis >= x.data.ndim or axis < -x.data.ndim:
        raise IndexError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        gs = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - gs),)

    return _finish(out, (x,), back)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row zero mean / unit variance over the last axis; no affine."""
    if x.data.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"layer_norm: needs a non-empty last axis, got {x.shape}")
    dt = x.data.dtype
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + dt.type(eps))
    out = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gy),)

    return _finish(out, (x,), back)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU 0.5*x*(1+erf(x/sqrt(2)))."""
    dt = x.data.dtype
    phi_cdf = 0.5 * (1.0 + _erf(x.data * dt.type(_INV_SQRT2)))
    out = (x.data * phi_cdf).astype(dt, copy=False)

    def back(g):
        pdf = np.exp(-0.5 * x.data * x.data) * dt.type(_INV_SQRT2PI)
        return ((g * (phi_cdf + x.data * pdf)).astype(dt, copy=False),)

    return _finish(out, (x,), back)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate (Cin,H,W) with (Cout,Cin,k,k) via im2col + matmul."""
    x, w = _as_tensor_pair(x, w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need (C,H,W) and (Cout,Cin,k,k), got {x.shape}, {w.shape}")
    cin, h, wid = x.shape
    cout, cin_w, k, k2 = w.shape
    if k != k2 or cin != cin_w:
        raise ShapeError(f"conv2d: weight {w.shape} does not match input {x.shape}")
    if k > h + 2 * padding or k > wid + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {k} larger than padded input {(h + 2 * padding, wid + 2 * padding)}")
    hp, wp = h + 2 * padding, wid + 2 * padding
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    if padding:
        x_pad = np.zeros((cin, hp, wp), dtype=x.data.dtype)
        x_pad[:, padding:padding + h, padding:padding + wid] = x.data
    else:
        x_pad = np.ascontiguousarray(x.data)
    cols = kernels.im2col(x_pad, k, stride)  # (Cin*k*k, L)
    w_mat = w.data.reshape(cout, -1)
    out = (w_mat @ cols).reshape(cout, ho, wo)

    def back(g):
        g_mat = g.reshape(cout, -1)
        gw = (g_mat @ cols.T).reshape(w.shape)
        g_cols = np.ascontiguousarray(w_mat.T @ g_mat)
        gx_pad = kernels.col2im(g_cols, cin, hp, wp, k, stride)
        if padding:
            gx = gx_pad[:, padding:padding + h, padding:padding + wid]
        else:
            gx = gx_pad
        return np.ascontiguousarray(gx), gw

    return _finish(out, (x, w), back)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """x (C,H,W) plus a per-channel bias (C,)."""
    if x.data.ndim != 3 or b.shape != (x.shape[0],):
        raise ShapeError(f"add_channel_bias: got {x.shape} and {b.shape}")
    out = x.data + b.data[:, None, None]

    def back(g):
        return g, g.sum(axis=(1, 2))

    return _finish(out, (x, b), back)


def adaptive_avg_pool(x: Tensor) -> Tensor:
    """Global average pool (C,H,W) -> (C,1,1)."""
    if x.data.ndim != 3:
        raise ShapeError(f"adaptive_avg_pool: need (C,H,W), got {x.shape}")
    c, h, w = x.shape
    out = x.data.mean(axis=(1, 2), keepdims=True)

    def back(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(x.data.dtype, copy=True),)

    return _finish(out, (x,), back)


def sum_all(x: Tensor) -> Tensor:
    out = x.data.sum()

    def back(g):
        return (np.full(x.shape, g, dtype=x.data.dtype),)

    return _finish(out, (x,), back)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = x.data.mean()

    def back(g):
        return (np.full(x.shape, g / n, dtype=x.data.dtype),)

    return _finish(out, (x,), back)


def mse_reduce(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over all elements."""
    a, b = _as_tensor_pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse_reduce: shapes differ {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.mean(diff * diff)

    def back(g):
        ga = (2.0 * g / n) * diff
        return ga.astype(a.data.dtype, copy=False), (-ga).astype(a.data.dtype, copy=False)

    return _finish(out, (a, b), back)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood from raw logits.

    logits is (K,) with an int target, or (B,K) with B int targets.
    """
    if logits.data.ndim == 1:
        t = np.asarray([int(target)])
        lg = logits.data[None, :]
    elif logits.data.ndim == 2:
        t = np.asarray(target, dtype=np.int64).reshape(-1)
        lg = logits.data
        if t.shape[0] != lg.shape[0]:
            raise ShapeError(
                f"cross_entropy: {t.shape[0]} targets for {lg.shape[0]} rows")
    else:
        raise ShapeError(f"cross_entropy: logits must be 1-D or 2-D, got {logits.shape}")
    k = lg.shape[1]
    if t.min() < 0 or t.max() >= k:
        raise IndexError(f"cross_entropy: class index out of range [0, {k})")
    b = lg.shape[0]
    z = lg - lg.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    out = -logp[np.arange(b), t].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(b), t] -= 1.0
        gl = (g / b) * p
        return (gl.reshape(logits.shape).astype(logits.data.dtype, copy=False),)

    return _finish(out, (logits,), back)


# ---------------------------------------------------------------------------
# gradient checking

def numeric_gradient(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5,
                     coords: Iterable[tuple] | None = None) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. selected coords of x."""
    flat = x.data.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    g = np.zeros(flat.size, dtype=np.float64)
    for i in coords:
        keep = flat[i]
        flat[i] = keep + h
        f_plus = f().item()
        flat[i] = keep - h
        f_minus = f().item()
        flat[i] = keep
        g[i] = (f_plus - f_minus) / (2.0 * h)
    return g.reshape(x.shape)


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor],
                    h: float = 1e-5, max_coords: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Compare analytic grads of scalar f() against central differences.

    Returns the max relative error |a - n| / max(1, |a|, |n|) over the
    checked coordinates. Parameters should be float64 for tight tolerances.
    """
    start = tape_len()
    loss = f()
    backward(loss)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]
    del _state().tape[start:]

    worst = 0.0
    for p, a in zip(params, analytic):
        n_el = p.size
        if max_coords is not None and n_el > max_coords:
            gen = rng or np.random.default_rng(0)
            coords = gen.choice(n_el, size=max_coords, replace=False)
        else:
            coords = range(n_el)
        coords = list(coords)

        def eval_loss():
            s = tape_len()
            with no_grad():
                val = f()
            del _state().tape[s:]
            return val

        num = numeric_gradient(eval_loss, p, h=h, coords=coords).reshape(-1)
        ana = (np.zeros(p.shape, dtype=np.float64) if a is None else a).reshape(-1)
        for i in coords:
            denom = max(1.0, abs(float(ana[i])), abs(float(num[i])))
            worst = max(worst, abs(float(ana[i]) - float(num[i])) / denom)
    return worst
