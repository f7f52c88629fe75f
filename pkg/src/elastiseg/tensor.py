"""Dense float32 tensors with reverse-mode differentiation on a linear tape.

Every operation appends one TapeNode to a module-level tape in execution
order, so iterating the tape backwards is already a reverse topological
order. The engine is single-threaded by contract; tensors are plain value
wrappers around numpy arrays and can be copied freely.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """A dense float32 array plus gradient slot.

    `grad` is populated by `backward` and accumulated additively when a
    tensor feeds several downstream operations.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor data must be finite")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))


class TapeNode:
    """One recorded operation: op name, input tensors, and a backward closure.

    The closure captures whatever forward context it needs and returns one
    gradient array (or None) per input. The output's gradient accumulator
    lives on the output tensor itself.
    """

    __slots__ = ("op", "inputs", "out", "backward_fn")

    def __init__(self, op: str, inputs: Sequence[Tensor], out: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.out = out
        self.backward_fn = backward_fn


_TAPE: list[TapeNode] = []


def tape_size() -> int:
    return len(_TAPE)


def reset_tape() -> None:
    _TAPE.clear()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor],
          backward_builder: Callable) -> Tensor:
    """Wrap `data`, recording a tape node only when a gradient can flow."""
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float32)
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad:
        _TAPE.append(TapeNode(op, inputs, out, backward_builder()))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.astype(np.float32, copy=False)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data, "add")

    def bwd():
        ash, bsh = a.data.shape, b.data.shape
        return lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh))

    return _make("add", a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data, "sub")

    def bwd():
        ash, bsh = a.data.shape, b.data.shape
        return lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh))

    return _make("sub", a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data, "mul")

    def bwd():
        ad, bd = a.data, b.data
        return lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return _make("mul", a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data, "div")

    def bwd():
        ad, bd = a.data, b.data
        return lambda g: (_unbroadcast(g / bd, ad.shape),
                          _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _make("div", a.data / b.data, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    def bwd():
        mask = (x.data > 0).astype(np.float32)
        return lambda g: (g * mask,)

    return _make("relu", np.maximum(x.data, 0.0), (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))

    def bwd():
        return lambda g: (g * s * (1.0 - s),)

    return _make("sigmoid", s, (x,), bwd)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated stably for large |x|."""
    out = np.logaddexp(np.float32(0.0), x.data)

    def bwd():
        s = 1.0 / (1.0 + np.exp(-x.data))
        return lambda g: (g * s,)

    return _make("softplus", out, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd  # chained multiplies; float power is far slower in numpy
    t = np.tanh(_GELU_C * (xd + 0.044715 * (x2 * xd)))
    out = 0.5 * xd * (1.0 + t)

    def bwd():
        # d/dx [0.5 x (1 + tanh(u))] with u = c (x + 0.044715 x^3)
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        local = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du
        return lambda g: (g * local,)

    return _make("gelu", out, (x,), bwd)


# ---------------------------------------------------------------------------
# matmul / linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; the left operand may carry leading batch dimensions."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError("matmul requires at least 2-D operands")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(
            f"matmul: inner dimensions {ad.shape} x {bd.shape} do not match")
    if bd.ndim == 2 and ad.ndim > 2:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        if ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2]:
            if bd.ndim != 2:
                raise DimensionError(
                    f"matmul: batch dimensions {ad.shape} x {bd.shape} do not match")
        out = ad @ bd

    def bwd():
        def back(g):
            if bd.ndim == 2:
                g2 = g.reshape(-1, g.shape[-1])
                a2 = ad.reshape(-1, ad.shape[-1])
                da = (g2 @ bd.T).reshape(ad.shape)
                db = a2.T @ g2
            else:
                da = g @ np.swapaxes(bd, -1, -2)
                db = np.swapaxes(ad, -1, -2) @ g
            return (_unbroadcast(da, ad.shape), _unbroadcast(db, bd.shape))
        return back

    return _make("matmul", out, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w.T + b with w stored (out_features, in_features)."""
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[1]:
        raise DimensionError(f"linear: {xd.shape} x {wd.shape} do not match")
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    if b is not None:
        if b.data.shape != (wd.shape[0],):
            raise DimensionError("linear: bias shape mismatch")
        out = out + b.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[0],))

    def bwd():
        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            dx = (g2 @ wd).reshape(xd.shape)
            dw = g2.T @ x2
            dbias = g2.sum(axis=0) if b is not None else None
            return (dx, dw, dbias)
        return back

    inputs = (x, w) if b is None else (x, w, b)
    return _make("linear", out, inputs, bwd)


# ---------------------------------------------------------------------------
# normalization / softmax


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ContractError("layernorm: eps must be positive")
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(f"layernorm: affine shape must be ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def bwd():
        def back(g):
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            dx = inv * (dxhat - m1 - xhat * m2)
            red = tuple(range(g.ndim - 1))
            dgamma = (g * xhat).sum(axis=red)
            dbeta = g.sum(axis=red)
            return (dx.astype(np.float32), dgamma, dbeta)
        return back

    return _make("layernorm", out, (x, gamma, beta), bwd)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last dimension, stabilized by max subtraction."""
    if x.data.shape == () or x.data.shape[-1] == 0:
        raise DimensionError("softmax requires a non-empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd():
        def back(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            return ((y * (g - dot)).astype(np.float32),)
        return back

    return _make("softmax", y, (x,), bwd)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: tuple) -> Tensor:
    def bwd():
        orig = x.data.shape
        return lambda g: (g.reshape(orig),)

    return _make("reshape", x.data.reshape(shape), (x,), bwd)


def transpose(x: Tensor, axes: tuple) -> Tensor:
    def bwd():
        inv = tuple(np.argsort(axes))
        return lambda g: (np.ascontiguousarray(g.transpose(inv)),)

    return _make("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    datas = [t.data for t in tensors]

    def bwd():
        sizes = [d.shape[axis] for d in datas]
        bounds = np.cumsum(sizes)[:-1]

        def back(g):
            return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))
        return back

    return _make("concat", np.concatenate(datas, axis=axis), tuple(tensors), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries from `start` along `axis`."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd():
        shape = x.data.shape

        def back(g):
            full = np.zeros(shape, dtype=np.float32)
            full[idx] = g
            return (full,)
        return back

    return _make("narrow", np.ascontiguousarray(x.data[idx]), (x,), bwd)


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    def bwd():
        orig = x.data.shape
        return lambda g: (_unbroadcast(g, orig),)

    return _make("broadcast", np.ascontiguousarray(np.broadcast_to(x.data, shape)), (x,), bwd)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32)

    def bwd():
        shape = x.data.shape

        def back(g):
            if axis is None:
                return (np.full(shape, g, dtype=np.float32) if g.ndim == 0
                        else np.broadcast_to(g, shape).astype(np.float32),)
            ax = axis if isinstance(axis, tuple) else (axis,)
            if not keepdims:
                for a in sorted(a % len(shape) for a in ax):
                    g = np.expand_dims(g, a)
            return (np.broadcast_to(g, shape).astype(np.float32),)
        return back

    return _make("sum", out, (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.data.shape[a] for a in ax]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), _as_tensor(1.0 / n))


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss; consumes (clears) the tape."""
    if loss.data.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones((), dtype=np.float32)
    for node in reversed(_TAPE):
        g = node.out.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=np.float32)
            if t.grad is None:
                t.grad = gi
            else:
                t.grad = t.grad + gi
    _TAPE.clear()


# ---------------------------------------------------------------------------
# Adam


class AdamState:
    """First/second moment buffers keyed by parameter name, plus a shared
    step count. Buffers are created lazily at the full parameter shape."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: int = 0

    def slot(self, name: str, shape: tuple) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.m:
            self.m[name] = np.zeros(shape, dtype=np.float32)
            self.v[name] = np.zeros(shape, dtype=np.float32)
        return self.m[name], self.v[name]


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              betas: tuple = (0.9, 0.999), eps: float = 1e-8,
              active: Optional[dict] = None) -> None:
    """One Adam update, in place, incrementing the shared step counter.

    params maps name -> full-shape float32 array. grads must match the
    active region's shape. active optionally maps name -> tuple of slices
    restricting the update; parameters and moment buffers outside the
    region are untouched.
    """
    state.t += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in params:
        p = params[name]
        g = grads[name]
        m_full, v_full = state.slot(name, p.shape)
        sl = active.get(name) if active is not None else None
        pv = p[sl] if sl is not None else p
        mv = m_full[sl] if sl is not None else m_full
        vv = v_full[sl] if sl is not None else v_full
        if g.shape != pv.shape:
            raise DimensionError(
                f"adam_step: grad shape {g.shape} != active param shape {pv.shape} for {name}")
        mv *= b1
        mv += (1.0 - b1) * g
        vv *= b2
        vv += (1.0 - b2) * (g * g)
        pv -= (lr / c1) * mv / (np.sqrt(vv / c2) + eps)
