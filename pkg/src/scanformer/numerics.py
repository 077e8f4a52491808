"""Dense float tensors with reverse-mode automatic differentiation.

Every op validates shapes eagerly. Broadcasting between two tensors is limited
to a trailing-suffix operand (e.g. a ``(d,)`` bias added to ``(B, n, d)``);
anything else needs an explicit :func:`broadcast_to`. Constant numpy operands
(masks, noise, offsets) may broadcast freely as long as the tensor's own shape
is preserved.

Gradient tracking, the default dtype and the multiply-accumulate meter are
thread-local so separate graphs can be evaluated on separate threads.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

__all__ = [
    "Tensor", "tensor", "parameter", "no_grad", "is_grad_enabled", "precision",
    "default_dtype", "count_macs", "MacMeter", "record_macs", "mac_tag", "backward", "zero_grad",
    "matmul", "linear", "add", "sub", "mul", "div", "neg", "exp", "log",
    "sigmoid", "tanh", "gelu", "abs_", "maximum", "minimum", "clip", "sqrt",
    "power", "sum_", "mean", "reshape", "transpose", "getitem", "concat",
    "broadcast_to", "softmax", "layer_norm", "detach", "straight_through",
    "check_gradients", "GradCheck", "dump",
]


class _State(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.dtype = np.dtype(np.float32)
        self.meters: list[MacMeter] = []


_state = _State()


def default_dtype() -> np.dtype:
    return _state.dtype


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@dataclass
class MacMeter:
    """Counts multiply-accumulates performed by :func:`matmul`."""

    macs: int = 0
    by_tag: dict = field(default_factory=dict)
    tag: str = ""

    def add(self, n: int) -> None:
        self.macs += n
        if self.tag:
            self.by_tag[self.tag] = self.by_tag.get(self.tag, 0) + n


@contextlib.contextmanager
def count_macs(meter: MacMeter | None = None):
    meter = meter if meter is not None else MacMeter()
    _state.meters.append(meter)
    try:
        yield meter
    finally:
        _state.meters.remove(meter)


def _count(n: int) -> None:
    for m in _state.meters:
        m.add(n)


def record_macs(n: int) -> None:
    """Report multiply-accumulates done outside :func:`matmul` (e.g. in a fused kernel)."""
    if _state.meters:
        _count(int(n))


@contextlib.contextmanager
def mac_tag(tag: str):
    """Attribute MACs counted inside the block to ``tag`` on every active meter."""
    prev = [m.tag for m in _state.meters]
    for m in _state.meters:
        m.tag = tag
    try:
        yield
    finally:
        for m, t in zip(_state.meters, prev):
            m.tag = t


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "__weakref__")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_state.dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)
    def detach(self): return detach(self)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def sigmoid(self): return sigmoid(self)
    def tanh(self): return tanh(self)

    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = None


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=_state.dtype), requires_grad, name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=_state.dtype), True, name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_state.dtype))


def _result(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor(data)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"{op} produced a non-finite value")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_shapes(a, b, op: str) -> None:
    """Enforce the restricted broadcasting rule for tensor-tensor ops."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        sa, sb = a.shape, b.shape
        if sa == sb or a.ndim == 0 or b.ndim == 0:
            return
        short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
        if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
            return
        raise DimensionError(f"{op}: cannot combine shapes {sa} and {sb}")
    t, c = (a, b) if isinstance(a, Tensor) else (b, a)
    cshape = np.shape(c)
    try:
        full = np.broadcast_shapes(t.shape, cshape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot combine shapes {t.shape} and {cshape}") from exc
    if full != t.shape:
        raise DimensionError(f"{op}: constant of shape {cshape} would expand tensor {t.shape}")


def _operands(a, b, op):
    _binary_shapes(a, b, op)
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    if ta is None:
        dt = tb.dtype
        ta = Tensor(np.asarray(a, dtype=dt))
    if tb is None:
        tb = Tensor(np.asarray(b, dtype=ta.dtype))
    return ta, tb


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _operands(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _operands(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _operands(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _operands(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    _check_finite(out, "div")

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))
    return _result(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    with np.errstate(all="ignore"):
        out = a.data ** p
    _check_finite(out, "power")
    return _result(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def sqrt(a: Tensor) -> Tensor:
    if (a.data < 0).any():
        raise NumericalError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore"):
            gx = g * 0.5 / out
        _check_finite(gx, "sqrt backward")
        return (gx,)
    return _result(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _check_finite(out, "exp")
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NumericalError("log of a non-positive value")
    out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    out = (0.5 * (1.0 + np.tanh(0.5 * a.data))).astype(a.dtype, copy=False)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)
    return _result(out, (a,), bw)


def abs_(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def maximum(a, b) -> Tensor:
    a, b = _operands(a, b, "maximum")
    pick_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)
    return _result(np.maximum(a.data, b.data), (a, b), bw)


def minimum(a, b) -> Tensor:
    a, b = _operands(a, b, "minimum")
    pick_a = a.data <= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)
    return _result(np.minimum(a.data, b.data), (a, b), bw)


def clip(a: Tensor, lo: float | None, hi: float | None) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero on and beyond either bound."""
    x = a.data
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x > lo
    if hi is not None:
        inside &= x < hi
    out = np.clip(x, lo, hi)
    return _result(out, (a,), lambda g: (g * inside,))


# -- reductions and shape ops ------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _result(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        raise ContractError("index with an integer array, not a Tensor")
    basic = _is_basic_index(idx)
    out = np.array(a.data[idx]) if basic else a.data[idx]

    def bw(g):
        gx = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)
    return _result(out, (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))
    return _result(out, tuple(ts), bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: {a.shape} -> {shape}") from exc
    return _result(np.ascontiguousarray(out), (a,), lambda g: (_unbroadcast(g, a.shape),))


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


def straight_through(soft: Tensor, forward_value) -> Tensor:
    """Forward ``forward_value``; backward routes the gradient to ``soft`` unchanged."""
    fv = np.asarray(forward_value, dtype=soft.dtype)
    if fv.shape != soft.shape:
        raise DimensionError(f"straight_through: {fv.shape} vs {soft.shape}")
    return _result(fv.copy(), (soft,), lambda g: (g,))


# -- linear algebra ----------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., m, k) @ (..., k, n)`` with equal leading extents, or a shared 2-D right operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: leading extents differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    if _state.meters:
        _count(int(np.prod(a.shape[:-1])) * a.shape[-1] * b.shape[-1])

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if shared:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb
    return _result(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _result(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs last extent {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return _result(out.astype(x.dtype, copy=False), (x, gain, bias), bw)


# -- backward ------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads = {id(root): np.ones(root.shape, dtype=root.dtype)}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = gp


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- gradient checking ---------------------------------------------------

@dataclass
class GradCheck:
    """Outcome of :func:`check_gradients`.

    ``max_rel_error`` covers differentiable coordinates only. A coordinate
    that misses the tolerance at step ``h`` is re-differenced at ``h / 10``:
    if it then agrees it was curvature (listed in ``refined``, refined error
    counted); if its one-sided differences still disagree it straddles a kink
    such as a clamp boundary (listed in ``kinks``, left out of the maximum).
    ``n_active`` counts checked coordinates whose gradient is not negligible.
    """

    max_rel_error: float
    n_checked: int
    kinks: list = field(default_factory=list)
    worst: tuple | None = None
    refined: list = field(default_factory=list)
    n_active: int = 0

    def __float__(self) -> float:
        return self.max_rel_error


def _rel(a: float, d: float) -> float:
    return abs(a - d) / max(abs(a), abs(d), 1e-8)


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor], n_samples: int | None = None,
                    h: float = 1e-3, seed: int = 0, kink_rtol: float = 1e-2, tol: float = 1e-3) -> GradCheck:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` is re-evaluated with each sampled parameter coordinate nudged by
    ``+-h``; the relative error is ``|a - d| / max(|a|, |d|, 1e-8)``.
    """
    zero_grad(params)
    loss = f()
    backward(loss)
    base = float(loss.data)
    analytic = [np.zeros(p.shape, dtype=np.float64) if p.grad is None else p.grad.astype(np.float64)
                for p in params]
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[k] for k in pick]
    worst, worst_at, kinks, refined, active = 0.0, None, [], [], 0

    def evaluate(flat, j, orig, step):
        flat[j] = orig + step
        fp = float(f().data)
        flat[j] = orig - step
        fm = float(f().data)
        flat[j] = orig
        return fp, fm

    with no_grad():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            orig = flat[j]
            a = float(analytic[i].reshape(-1)[j])
            fp, fm = evaluate(flat, j, orig, h)
            d = (fp - fm) / (2 * h)
            err = _rel(a, d)
            if err > tol:
                small = h / 10
                fp, fm = evaluate(flat, j, orig, small)
                d_small = (fp - fm) / (2 * small)
                fwd, bwd = (fp - base) / small, (base - fm) / small
                if _rel(a, d_small) <= tol:
                    refined.append((i, j, a, d, err))
                    d, err = d_small, _rel(a, d_small)
                elif abs(fwd - bwd) > kink_rtol * max(abs(fwd), abs(bwd), 1e-8):
                    kinks.append((i, j, a, d, err))
                    continue
            active += max(abs(a), abs(d)) > 1e-6
            if err > worst:
                worst, worst_at = err, (i, j, a, d)
    return GradCheck(worst, len(coords), kinks, worst_at, refined, active)


def dump(t, precision_digits: int = 4) -> str:
    """Plain-text grid of a tensor (last axis across, everything else down)."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim == 0:
        return f"{float(arr):.{precision_digits}f}"
    rows = arr.reshape(-1, arr.shape[-1])
    header = f"# shape={arr.shape} dtype={arr.dtype}"
    body = "\n".join(" ".join(f"{v: .{precision_digits}f}" for v in row) for row in rows)
    return header + "\n" + body
