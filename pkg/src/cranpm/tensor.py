"""Minimal dense tensor with reverse-mode automatic differentiation.

Storage is a contiguous numpy array (f32 or f64). Gradients are computed by
replaying a tape of executed ops in reverse. The op set is exactly what the
forecaster needs; there is no broadcasting contract beyond trailing-dim affine
cases, no views, no GPU.

Convolution uses the cross-correlation convention (no kernel flip).
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class NumericError(ArithmeticError):
    """Raised when an op produces NaN/Inf from finite inputs."""


class TapeError(RuntimeError):
    pass


DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

# Finite-output guard. Cheap relative to the matmuls it follows; can be
# switched off for throughput once a config is known to be stable.
_guard = True


def set_guard(enabled: bool) -> None:
    global _guard
    _guard = bool(enabled)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Dense n-d array, optionally participating in the active gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def dtype_name(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype_name}, grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed ops; backward replays adjoints in reverse.

    One tape is strictly single-threaded. ``clear`` drops recorded nodes and
    their gradient buffers; running ``backward`` twice without a fresh forward
    is an error.
    """

    _local = threading.local()

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._done = False

    # active-tape stack (per thread)
    @classmethod
    def _stack(cls) -> list["Tape"]:
        st = getattr(cls._local, "stack", None)
        if st is None:
            st = []
            cls._local.stack = st
        return st

    @classmethod
    def active(cls) -> "Tape | None":
        st = cls._stack()
        return st[-1] if st else None

    def __enter__(self) -> "Tape":
        Tape._stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        st = Tape._stack()
        if not st or st[-1] is not self:
            raise TapeError("tape exited out of order")
        st.pop()

    def record(self, node: Tensor) -> None:
        self._nodes.append(node)

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._done:
            raise TapeError("backward already ran on this tape; re-run the forward")
        self._done = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)

    def clear(self) -> None:
        for node in self._nodes:
            node.grad = None
            node._backward = None
            node._parents = ()
        self._nodes.clear()
        self._done = False


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through the active tape."""
    tape = Tape.active()
    if tape is None:
        raise TapeError("no active tape")
    tape.backward(loss)


# -- op plumbing ---------------------------------------------------------------


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def constant(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    if _guard and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    tape = Tape.active()
    rg = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg)
    if rg:
        out._parents = tuple(parents)
        out._backward = backward_fn
        tape.record(out)
    return out


def _accum(p: Tensor, g: np.ndarray) -> None:
    if not p.requires_grad:
        return
    g = _unbroadcast(g, p.data.shape).astype(p.data.dtype, copy=False)
    if p.grad is None:
        p.grad = np.zeros_like(p.data)
    p.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_same_dtype(op: str, *ts: Tensor) -> None:
    d0 = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d0:
            raise ShapeError(f"{op}: mixed dtypes {d0} and {t.data.dtype}")


# -- elementwise ----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("add", a, b)
    out = a.data + b.data

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _make("add", out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("sub", a, b)
    out = a.data - b.data

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _make("sub", out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("mul", a, b)
    out = a.data * b.data

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make("mul", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, -g)

    return _make("neg", -a.data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def bw(g):
        _accum(a, g * (a.data > 0))

    return _make("relu", out, (a,), bw)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    out = 0.5 * x * (1.0 + erf(x * _INV_SQRT2))

    def bw(g):
        phi = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        _accum(a, g * (cdf + x * phi))

    return _make("gelu", out, (a,), bw)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    out = np.maximum(a.data, lo)

    def bw(g):
        _accum(a, g * (a.data > lo))

    return _make("clamp_min", out, (a,), bw)


# -- shape ops -------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _make("reshape", out, (a,), bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def bw(g):
        _accum(a, g.transpose(inv))

    return _make("transpose", out, (a,), bw)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    _check_same_dtype("concat", *ts)
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make("concat", out, tuple(ts), bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(a.data[idx])

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            _accum(a, full)

    return _make("narrow", out, (a,), bw)


def zero_pad(a: Tensor, pads: Sequence[tuple[int, int]]) -> Tensor:
    pads = tuple((int(lo), int(hi)) for lo, hi in pads)
    out = np.pad(a.data, pads)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, a.data.shape))

    def bw(g):
        _accum(a, g[crop])

    return _make("zero_pad", out, (a,), bw)


def roll(a: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts = tuple(shifts)
    axes = tuple(axes)
    out = np.roll(a.data, shifts, axis=axes)

    def bw(g):
        _accum(a, np.roll(g, tuple(-s for s in shifts), axis=axes))

    return _make("roll", out, (a,), bw)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[k] = a[idx[k]] along the first axis; adjoint scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _accum(a, full)

    return _make("gather_rows", out, (a,), bw)


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[..., k] = a[..., idx[k]]; used for relative-position tables."""
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[..., idx]

    def bw(g):
        if a.requires_grad:
            last = a.data.shape[-1]
            full = np.zeros((int(np.prod(a.data.shape[:-1], dtype=np.int64)), last),
                            dtype=a.data.dtype)
            gf = g.reshape(full.shape[0], -1)
            np.add.at(full, (np.arange(full.shape[0])[:, None], idx[None, :]), gf)
            _accum(a, full.reshape(a.data.shape))

    return _make("gather_last", out, (a,), bw)


# -- reductions -------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape))

    return _make("sum", np.asarray(out), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis] if isinstance(axis, int) else int(
            np.prod([a.data.shape[ax] for ax in axis]))
    return mul(tsum(a, axis=axis, keepdims=keepdims),
               Tensor(np.asarray(1.0 / n, dtype=a.data.dtype)))


# -- linear algebra ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires ndim >= 2")
    if a.ndim != b.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul leading dims differ: {a.shape} vs {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make("matmul", out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on the trailing dim: y[..., j] = sum_i x[..., i] w[i, j] + b[j]."""
    _check_same_dtype("linear", x, w)
    din = x.data.shape[-1]
    if w.ndim != 2 or w.data.shape[0] != din:
        raise ShapeError(f"linear: x trailing dim {din} vs W {w.shape}")
    if b is not None and b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} vs dout {w.data.shape[1]}")
    x2 = x.data.reshape(-1, din)
    y2 = x2 @ w.data
    if b is not None:
        y2 = y2 + b.data
    out = y2.reshape(x.data.shape[:-1] + (w.data.shape[1],))
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        _accum(x, (g2 @ w.data.T).reshape(x.data.shape))
        _accum(w, x2.T @ g2)
        if b is not None:
            _accum(b, g2.sum(axis=0))

    return _make("linear", out, parents, bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last dim, stabilized by max subtraction."""
    if x.data.shape[-1] < 1:
        raise ShapeError("softmax_rows: empty last dim")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accum(x, out * (g - dot))

    return _make("softmax_rows", out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last dim to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    n = x.data.shape[-1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError("layer_norm: gain/bias must match trailing dim")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (dxhat - m1 - xhat * m2))
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead))
        _accum(bias, g.sum(axis=lead))

    return _make("layer_norm", out, (x, gain, bias), bw)


# -- convolution and pixel shuffle --------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, ho, wo), dtype=xp.dtype)
    for di in range(kh):
        for dj in range(kw):
            cols[:, di, dj] = xp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
    return cols.reshape(c * kh * kw, ho * wo)


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad="same") -> Tensor:
    """2-D cross-correlation: x [C,H,W] * k [Cout,C,kh,kw] -> [Cout,Ho,Wo]."""
    _check_same_dtype("conv2d", x, k)
    if x.ndim != 3 or k.ndim != 4:
        raise ShapeError(f"conv2d: x {x.shape}, k {k.shape}")
    c, h, w = x.data.shape
    cout, cin, kh, kw = k.data.shape
    if cin != c:
        raise ShapeError(f"conv2d: input channels {c} vs kernel {cin}")
    if pad == "same":
        if stride != 1 or kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("conv2d: same-pad needs stride 1 and odd kernel")
        ph, pw = kh // 2, kw // 2
    else:
        ph = pw = int(pad)
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output extent {ho}x{wo} < 1")
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    k2 = k.data.reshape(cout, -1)
    out = (k2 @ cols).reshape(cout, ho, wo)

    def bw(g):
        g2 = g.reshape(cout, -1)
        _accum(k, (g2 @ cols.T).reshape(k.data.shape))
        if x.requires_grad:
            gcols = (k2.T @ g2).reshape(c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += gcols[:, di, dj]
            _accum(x, gxp[:, ph:ph + h, pw:pw + w])

    return _make("conv2d", out, (x, k), bw)


def _shuffle_fwd(d: np.ndarray, r: int) -> np.ndarray:
    c2, h, w = d.shape
    c = c2 // (r * r)
    return np.ascontiguousarray(
        d.reshape(c, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(c, h * r, w * r))


def _shuffle_inv(d: np.ndarray, r: int) -> np.ndarray:
    c, hr, wr = d.shape
    h, w = hr // r, wr // r
    return np.ascontiguousarray(
        d.reshape(c, h, r, w, r).transpose(0, 2, 4, 1, 3).reshape(c * r * r, h, w))


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """[C*r^2, H, W] -> [C, rH, rW]; channel-major sub-pixel order.

    Output channel c takes input channels c*r^2 .. c*r^2 + r^2 - 1, scanned
    row-major within each r x r cell.
    """
    if x.ndim != 3 or x.data.shape[0] % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle: channels {x.shape} not divisible by r^2={r * r}")
    out = _shuffle_fwd(x.data, r)

    def bw(g):
        _accum(x, _shuffle_inv(g, r))

    return _make("pixel_shuffle", out, (x,), bw)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    if x.ndim != 3 or x.data.shape[1] % r != 0 or x.data.shape[2] % r != 0:
        raise ShapeError(f"pixel_unshuffle: spatial dims {x.shape} not divisible by r={r}")
    out = _shuffle_inv(x.data, r)

    def bw(g):
        _accum(x, _shuffle_fwd(g, r))

    return _make("pixel_unshuffle", out, (x,), bw)


# -- frequency domain ----------------------------------------------------------------


def dft2(x: Tensor) -> Tensor:
    """Unnormalized 2-D DFT of a real field [H,W] -> [2,H,W] (real, imag).

    Satisfies Parseval: sum|X|^2 == H*W * sum|x|^2.
    """
    if x.ndim != 2:
        raise ShapeError(f"dft2 expects [H,W], got {x.shape}")
    h, w = x.data.shape
    spec = np.fft.fft2(x.data)
    out = np.stack([spec.real, spec.imag]).astype(x.data.dtype)

    def bw(g):
        gc = g[0] + 1j * g[1]
        _accum(x, np.real(np.fft.ifft2(gc)) * (h * w))

    return _make("dft2", out, (x,), bw)


def dft2_complex(x: np.ndarray) -> np.ndarray:
    """Plain complex spectrum of a raw array (no tape participation)."""
    return np.fft.fft2(np.asarray(x))


# -- stochastic gates (train-mode only, seeded) -----------------------------------------


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        raise ParameterError("dropout p must be < 1")
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype)
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.data.dtype)
    return mul(x, Tensor(keep * scale))


def drop_path(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Stochastic depth: zero the entire branch with probability p."""
    if not training or p <= 0.0:
        return x
    gate = 0.0 if rng.random() < p else 1.0 / (1.0 - p)
    return mul(x, Tensor(np.asarray(gate, dtype=x.data.dtype)))


# -- initialization helpers ---------------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std; matches common ViT init."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)
