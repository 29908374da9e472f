"""Small dense-array autodiff on top of numpy.

Every op returns a :class:`Tensor`. When gradients are enabled and any input
requires them, the result keeps references to its parents plus a closure that
pushes the upstream gradient back. ``backward`` walks that graph once and then
releases it; calling it a second time on the same loss raises.
"""

from __future__ import annotations

import contextlib
import logging
import math
import threading
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

_logger = logging.getLogger(__name__)

MASKED = -1e9  # additive attention mask value for hidden slots
NEG_SENTINEL = -1e30  # log(0) stand-in used by the CTC recursions

_state = threading.local()


class ShapeError(ValueError):
    """Operands whose shapes do not conform for the requested primitive."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, reused graph)."""


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    _state.dtype = np.dtype(dtype)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float type (64-bit for gradient checks)."""
    old = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    old = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_spent")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype.kind == "f":
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._spent = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=default_dtype()))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar ``loss``; grads add up across fan-out."""
    if loss.data.size != 1:
        raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._spent:
        raise TapeError("backward() already ran on this graph; run a fresh forward pass")
    if not np.all(np.isfinite(loss.data)):
        raise TapeError(f"non-finite loss {loss.item()!r}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None and node.requires_grad:
                _accumulate(node, g.reshape(node.shape))
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                _accumulate(parent, pg)
            else:
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    for node in order:
        node._parents = ()
        node._backward = None
    loss._spent = True


# ---------------------------------------------------------------------------
# elementwise / broadcasting


def _check_broadcast(op: str, a: tuple, b: tuple) -> None:
    if a == b:
        return
    if int(np.prod(a)) == 1 and len(a) <= len(b) or int(np.prod(b)) == 1 and len(b) <= len(a):
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: shapes {a} and {b} do not conform (only leading-batch or scalar broadcast)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    return _make(xd * sig, (x,), lambda g: (g * (sig * (1.0 + xd * (1.0 - sig))),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * xd * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions and normalizers


def sum_(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis), 1.0 / float(n))


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return _make(p, (x,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw)


def logsumexp(x: Tensor) -> Tensor:
    """log-sum-exp over the last axis (axis dropped)."""
    m = x.data.max(axis=-1, keepdims=True)
    s = np.exp(x.data - m).sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]

    def bw(g):
        w = np.exp(x.data - out[..., None])
        return (g[..., None] * w,)

    return _make(out, (x,), bw)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} vs weight {weight.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    wd = weight.data
    out = xhat * wd + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gw = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gx_hat = g * wd
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb

    return _make(out, (x, weight, bias), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a[..., n, k]`` and ``b[k, m]`` or ``b[..., k, m]`` (same leading dims)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (b.ndim > 2 and b.shape[:-2] != a.shape[:-2]):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    v = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise ShapeError(f"embedding: ids out of range for table {weight.shape}")
    wshape = weight.shape

    def bw(g):
        gw = np.zeros(wshape, dtype=g.dtype)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, wshape[-1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), bw)


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """softmax(q k^T / sqrt(d) + mask) v over the last two axes.

    ``mask`` is an additive array broadcastable to the score shape: 0 keeps a
    slot visible, ``MASKED`` hides it.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2] or k.shape[:-2] != v.shape[:-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} do not conform")
    scale = 1.0 / math.sqrt(q.shape[-1])
    qd, kd, vd = q.data, k.data, v.data
    s = (qd @ np.swapaxes(kd, -1, -2)) * scale
    if mask is not None:
        m = np.asarray(mask)
        try:
            np.broadcast_shapes(m.shape, s.shape)
        except ValueError:
            raise ShapeError(f"attention: mask {m.shape} vs scores {s.shape}") from None
        s = s + m
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ vd

    def bw(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        return gs @ kd, np.swapaxes(gs, -1, -2) @ qd, gv

    return _make(out, (q, k, v), bw)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(src),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit expansion of size-1 or missing leading axes."""
    shape = tuple(shape)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot expand {src} to {shape}") from None
    return _make(out, (x,), lambda g: (_unbroadcast(g, src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, idx, g) if _is_fancy(idx) else gx.__setitem__(idx, g)
        return (gx,)

    return _make(x.data[idx], (x,), bw)


def _is_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(s != t for i, (s, t) in enumerate(zip(x.shape, xs[0].shape)) if i != ax):
            raise ShapeError(f"concat: shapes {xs[0].shape} and {x.shape} differ off axis {axis}")
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=ax), xs, lambda g: tuple(np.split(g, bounds, axis=ax)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise ShapeError(f"stack: shapes {xs[0].shape} and {x.shape} differ")
    out = np.stack([x.data for x in xs], axis=axis)
    ax = axis % out.ndim
    return _make(out, xs, lambda g: tuple(np.moveaxis(g, ax, 0)))


def take_along_axis(x: Tensor, idx, axis: int = -1) -> Tensor:
    """Gather ``x`` at integer ``idx`` along ``axis`` (numpy semantics)."""
    idx = np.asarray(idx, dtype=np.int64)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        ax = axis % len(shape)
        # scatter-add: expand to full index tuple for np.add.at
        grids = list(np.indices(idx.shape, sparse=True))
        grids[ax] = idx
        np.add.at(gx, tuple(grids), g)
        return (gx,)

    return _make(np.take_along_axis(x.data, idx, axis=axis), (x,), bw)


# ---------------------------------------------------------------------------
# parameters, optimizer, clipping


class ParamStore(OrderedDict):
    """Ordered ``name -> Tensor`` map holding every learnable array.

    ``freeze()`` makes the arrays read-only so the store can be shared across
    threads for evaluation; ``unfreeze()`` restores single-writer mutation.
    """

    frozen = False

    def __setitem__(self, name, value):
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        if not isinstance(value, Tensor):
            value = Tensor(value, requires_grad=True, name=name)
        value.name = name
        super().__setitem__(name, value)

    def freeze(self) -> "ParamStore":
        for t in self.values():
            t.data.flags.writeable = False
        self.frozen = True
        return self

    def unfreeze(self) -> "ParamStore":
        for t in self.values():
            if not t.data.flags.owndata and not t.data.flags.writeable:
                t.data = t.data.copy()
            t.data.flags.writeable = True
        self.frozen = False
        return self

    def subset(self, prefix: str) -> "ParamStore":
        out = ParamStore()
        for k, v in self.items():
            if k.startswith(prefix):
                OrderedDict.__setitem__(out, k, v)
        return out

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def numel(self) -> int:
        return sum(t.data.size for t in self.values())


def clip_gradients(params: Iterable[Tensor] | ParamStore, threshold: float) -> float:
    """Scale all grads so their global L2 norm is at most ``threshold``; return the pre-clip norm."""
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    tensors = list(params.values()) if isinstance(params, dict) else list(params)
    sq = 0.0
    for t in tensors:
        if t.grad is not None:
            sq += float(np.sum(t.grad.astype(np.float64) ** 2))
    norm = math.sqrt(sq)
    if norm > threshold:
        f = threshold / norm
        for t in tensors:
            if t.grad is not None:
                t.grad = t.grad * f
    return norm


class Adam:
    """Adam with bias correction. Steps with a non-finite gradient are skipped."""

    def __init__(self, params: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.skipped = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def _trainable(self):
        return [(k, p) for k, p in self.params.items() if p.requires_grad]

    def step(self) -> bool:
        live = self._trainable()
        if self.params.frozen:
            raise RuntimeError("cannot step a frozen ParamStore")
        for name, p in live:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                self.skipped += 1
                _logger.warning("non-finite gradient in %s; skipping optimizer step (%d skipped)", name, self.skipped)
                self.params.zero_grad()
                return False
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in live:
            g = p.grad
            if g is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
        self.params.zero_grad()
        return True


def adam_step(opt: Adam) -> bool:
    return opt.step()


# ---------------------------------------------------------------------------
# finite-difference checking


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-4) -> float:
    """Max relative error between autodiff and central differences for ``sum(w * fn(*inputs))``.

    A fixed random projection ``w`` turns any output into a scalar. Runs in float64.
    """
    with precision(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        probe_shape = fn(*[Tensor(a) for a in arrays]).shape
        w = np.random.default_rng(1234).standard_normal(probe_shape)

        def scalar() -> float:
            with no_grad():
                return float(np.sum(w * fn(*[Tensor(a) for a in arrays]).data))

        ts = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*ts)
        backward(sum_(mul(out, Tensor(w))))
        worst = 0.0
        for t, a in zip(ts, arrays):
            num = numeric_grad(scalar, a, h)
            ana = t.grad if t.grad is not None else np.zeros_like(a)
            denom = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
            worst = max(worst, float(np.abs(num - ana).max() / denom))
        return worst
