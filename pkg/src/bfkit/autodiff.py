"""Minimal reverse-mode tensor kernels.

Just enough differentiable operations to express a small transformer:
matmul, elementwise arithmetic, softmax, layer norm, GELU, sigmoid,
shape manipulation, and a fused scaled dot-product attention. Every
backward rule is checked against central finite differences in the test
suite. Forward values follow the standard definitions; no control-flow
autodiff, no higher-order gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling graph construction (inference path)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    """Raised when gradients contain NaN/inf (training divergence)."""


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, parents=(), backward=None):
        self.values = np.asarray(values)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        if self.values.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
        order = []
        seen = set()

        def visit(t):
            if id(t) in seen or not t.requires_grad:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            order.append(t)

        visit(self)
        grads = {id(self): np.ones_like(self.values)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._backward is not None:
                for parent, pg in zip(t._parents, t._backward(g)):
                    if not parent.requires_grad or pg is None:
                        continue
                    acc = grads.get(id(parent))
                    grads[id(parent)] = pg if acc is None else acc + pg
            else:
                # leaf: accumulate into .grad
                t.grad = g if t.grad is None else t.grad + g


def _node(values, parents, backward):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, parents=parents, backward=backward)
    return Tensor(values)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.values + b.values

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.values - b.values

    def bwd(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _node(out, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.values * b.values

    def bwd(g):
        return (_unbroadcast(g * b.values, a.shape),
                _unbroadcast(g * a.values, b.shape))

    return _node(out, (a, b), bwd)


def scale(a, s):
    a = as_tensor(a)
    s = float(s)
    return _node(a.values * s, (a,), lambda g: (g * s,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.values, b.values)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), bwd)


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _node(a.values.transpose(axes), (a,),
                 lambda g: (g.transpose(inv),))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _node(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    out = np.broadcast_to(a.values, shape)
    return _node(out.copy(), (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), bwd)


def slice_(a, slices):
    """Slice with a tuple of `slice` objects; backward scatters zeros."""
    a = as_tensor(a)
    out = a.values[slices]

    def bwd(g):
        full = np.zeros_like(a.values)
        full[slices] = g
        return (full,)

    return _node(out, (a,), bwd)


def sum_(a, axis=None):
    a = as_tensor(a)
    out = a.values.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(out, (a,), bwd)


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.values.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), bwd)


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.values))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


# python floats so float32 inputs stay float32 under numpy 2 promotion
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    a = as_tensor(a)
    x = a.values
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = x * cdf

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _node(out, (a,), bwd)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then apply the affine (gamma, beta)."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    x = a.values
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    out = gamma.values * xhat + beta.values

    def bwd(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes).reshape(gamma.shape)
        dbeta = g.sum(axis=reduce_axes).reshape(beta.shape)
        dxhat = g * gamma.values
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv_std * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _node(out, (a, gamma, beta), bwd)


def linear(x, w, b):
    """x @ w + b with broadcasting over leading axes."""
    return add(matmul(x, w), b)


# attention score tensors dominate memory; above this many entries the
# no-grad path computes the output in query-row chunks
_ATTN_CHUNK_ENTRIES = 2 ** 26

# free-list of score-sized work buffers; large allocations pay a
# page-fault cost on first touch, so buffers are recycled within a batch
_BUFFER_POOL = {}
_POOL_MAX_PER_SHAPE = 4


def _take_buffer(shape, dtype):
    lst = _BUFFER_POOL.get((shape, np.dtype(dtype).str))
    if lst:
        return lst.pop()
    return np.empty(shape, dtype=dtype)


def _release_buffer(*arrays):
    for a in arrays:
        lst = _BUFFER_POOL.setdefault((a.shape, a.dtype.str), [])
        if len(lst) < _POOL_MAX_PER_SHAPE:
            lst.append(a)


def clear_buffer_pool():
    _BUFFER_POOL.clear()


def attention(q, k, v):
    """Scaled dot-product attention over shapes (..., N, dh).

    Fused: only the unnormalized softmax numerator and the row sums are
    retained for backward; the scale factor is folded into the query.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    dh = q.shape[-1]
    sc = 1.0 / math.sqrt(dh)
    n = q.shape[-2]
    needs_graph = _GRAD_ENABLED and any(t.requires_grad for t in (q, k, v))
    entries = int(np.prod(q.shape[:-2], dtype=np.int64)) * n * k.shape[-2]
    if not needs_graph and entries > _ATTN_CHUNK_ENTRIES:
        out = np.empty_like(q.values)
        step = max(1, _ATTN_CHUNK_ENTRIES // max(1, entries // n))
        kt = np.swapaxes(k.values, -1, -2)
        for lo in range(0, n, step):
            s = np.matmul(q.values[..., lo:lo + step, :], kt) * sc
            s -= s.max(axis=-1, keepdims=True)
            np.exp(s, out=s)
            s /= s.sum(axis=-1, keepdims=True)
            out[..., lo:lo + step, :] = np.matmul(s, v.values)
        return Tensor(out)

    qs = q.values * sc
    e = _take_buffer(q.shape[:-1] + (k.shape[-2],), q.values.dtype)
    np.matmul(qs, np.swapaxes(k.values, -1, -2), out=e)
    # subtract the row max only when exp could overflow; the bound from
    # the factor maxima is cheap and usually far below the threshold
    bound = float(np.abs(qs).max()) * float(np.abs(k.values).max()) * dh
    if bound > 60.0:
        e -= e.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    r = e.sum(axis=-1)
    out = np.matmul(e, v.values)
    out /= r[..., None]
    if not needs_graph:
        _release_buffer(e)
        return Tensor(out)

    def bwd(g):
        # with E the numerator and r the row sums (A = E / r):
        #   gh = sc * g / r;  da = gh Vᵀ;  c = rowsum(da ⊙ E)
        #   dS = E ⊙ (da - c / r)  (already carries the sc factor)
        gh = (sc * g) / r[..., None]
        da = _take_buffer(e.shape, e.dtype)
        np.matmul(gh, np.swapaxes(v.values, -1, -2), out=da)
        dv = np.matmul(np.swapaxes(e, -1, -2), gh)
        dv *= 1.0 / sc
        _attn_score_bwd(da.reshape(-1, da.shape[-1]),
                        e.reshape(-1, e.shape[-1]), r.reshape(-1))
        dq = np.matmul(da, k.values)
        dk = np.matmul(np.swapaxes(da, -1, -2), q.values)
        _release_buffer(e, da)
        return dq, dk, dv

    return _node(out, (q, k, v), bwd)


def _attn_score_bwd_numpy(da, e, r):
    """In-place: da <- e * (da - rowsum(da * e) / r)."""
    c = np.einsum("ij,ij->i", da, e)
    da -= (c / r)[:, None]
    da *= e


try:
    from numba import njit as _njit

    @_njit(cache=True, fastmath=True)
    def _attn_score_bwd(da, e, r):
        m, n = da.shape
        for i in range(m):
            c = 0.0
            for j in range(n):
                c += da[i, j] * e[i, j]
            cn = c / r[i]
            for j in range(n):
                da[i, j] = e[i, j] * (da[i, j] - cn)
except ImportError:  # pragma: no cover
    _attn_score_bwd = _attn_score_bwd_numpy


def multi_head_attention(x, heads, wq, wk, wv, wo, bq, bk, bv, bo):
    """Standard multi-head self-attention on (B, N, D) or (N, D) input."""
    x = as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    b, n, d = x.shape
    if d % heads != 0:
        raise ShapeError(f"embed dim {d} not divisible by {heads} heads")
    dh = d // heads

    def split_heads(t):
        return transpose(reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split_heads(linear(x, wq, bq))
    k = split_heads(linear(x, wk, bk))
    v = split_heads(linear(x, wv, bv))
    out = attention(q, k, v)
    out = reshape(transpose(out, (0, 2, 1, 3)), (b, n, d))
    out = linear(out, wo, bo)
    if squeeze:
        out = reshape(out, (n, d))
    return out


@dataclass
class OptimizerState:
    """Adam accumulators keyed like the parameter dict."""

    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One Adam update in place. `params` maps name -> Tensor."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter '{name}'")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape} for '{name}'")
        m = state.m.setdefault(name, np.zeros_like(p.values))
        v = state.v.setdefault(name, np.zeros_like(p.values))
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p.values -= state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.eps)


def zero_grads(params):
    for p in params.values():
        p.grad = None
