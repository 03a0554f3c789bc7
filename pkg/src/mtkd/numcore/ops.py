"""Differentiable operations over :class:`~mtkd.numcore.tensor.Tensor`.

Every function evaluates eagerly with numpy. If a tape is active and any
operand requires a gradient, the result is recorded together with a closure
returning the vector-Jacobian product for each operand.

Python scalars mixed with tensors adopt the tensor's dtype, so float32
training stays float32.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from ..errors import DimensionError, NumericError, ParameterError
from .tensor import Tensor, active_tape

PROB_FLOOR = 1e-12
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def _lastmax(x: np.ndarray) -> np.ndarray:
    """Max over the last axis, keepdims; numpy reduces short trailing axes slowly."""
    return np.ascontiguousarray(np.moveaxis(x, -1, 0)).max(axis=0)[..., None]


def _lastsum(x: np.ndarray) -> np.ndarray:
    """Sum over the last axis, keepdims, as a matrix-vector product."""
    return (x @ np.ones(x.shape[-1], dtype=x.dtype))[..., None]


def _emit(data: np.ndarray, parents, backward, name: str) -> Tensor:
    out = Tensor.wrap(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward, name)
    return out


def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor.wrap(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        c = a.data.dtype.type(b)
        return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")
    if not isinstance(a, Tensor) and np.isscalar(a):
        return mul(b, a)
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _emit(ad * bd, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _emit(np.log(x), (a,), lambda g: (g / x,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _emit(np.maximum(x, 0), (a,), lambda g: (g * (x > 0),), "relu")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    inner = c * (x + x.dtype.type(0.044715) * x * x * x)
    th = np.tanh(inner)
    out = 0.5 * x * (1 + th)

    def bw(g):
        d_inner = c * (1 + x.dtype.type(3 * 0.044715) * x * x)
        return (g * (0.5 * (1 + th) + 0.5 * x * (1 - th * th) * d_inner),)

    return _emit(out, (a,), bw, "gelu")


def dropout(a: Tensor, keep: np.ndarray, rate: float) -> Tensor:
    """Inverted dropout with a precomputed boolean ``keep`` mask."""
    if not 0 <= rate < 1:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    scale = (keep / (1.0 - rate)).astype(a.dtype)
    return _emit(a.data * scale, (a,), lambda g: (g * scale,), "dropout")


# ---------------------------------------------------------------- reductions / shape


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(np.ascontiguousarray(a.data[idx]), (a,), bw, "getitem")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``table[ids]``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids)
    v, d = table.shape

    def bw(g):
        flat = g.reshape(-1, d)
        full = np.zeros((v, d), dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), flat)
        return (full,)

    return _emit(table.data[ids], (table,), bw, "embedding")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) axes must be identical; 2-d operands are the plain
    matrix product.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _emit(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` applied over the last axis of ``x`` (any leading shape)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (w.shape[1],))
    wd = w.data

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _emit(out, parents, bw, "linear")


# ---------------------------------------------------------------- normalisation / probabilities


def _check_temperature(t: float) -> None:
    if not t > 0:
        raise ParameterError(f"temperature must be > 0, got {t}")


def softmax(z: Tensor, t: float = 1.0, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Numerically stable softmax of ``z / t`` along ``axis``.

    ``mask`` (broadcastable boolean) marks admissible entries; the rest get
    probability exactly 0. Every slice must keep at least one admissible entry.
    """
    _check_temperature(t)
    x = z.data
    if np.isnan(x).any():
        raise NumericError("softmax: NaN in input")
    if t != 1.0:
        x = x / x.dtype.type(t)
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    last = axis in (-1, x.ndim - 1)
    rmax = _lastmax(x) if last else x.max(axis=axis, keepdims=True)
    e = np.exp(x - rmax)
    p = e / (_lastsum(e) if last else e.sum(axis=axis, keepdims=True))
    inv_t = p.dtype.type(1.0 / t)

    def bw(g):
        inner = _lastsum(g * p) if last else (g * p).sum(axis=axis, keepdims=True)
        gz = p * (g - inner)
        if t != 1.0:
            gz = gz * inv_t
        return (gz,)

    return _emit(p, (z,), bw, "softmax")


def softmax_rows(z: Tensor, t: float = 1.0) -> Tensor:
    """Row-wise tempered softmax of a 2-d tensor."""
    if z.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {z.shape}")
    return softmax(z, t, axis=-1)


def log_softmax(z: Tensor, t: float = 1.0, axis: int = -1) -> Tensor:
    _check_temperature(t)
    x = z.data
    if np.isnan(x).any():
        raise NumericError("log_softmax: NaN in input")
    if t != 1.0:
        x = x / x.dtype.type(t)
    last = axis in (-1, x.ndim - 1)
    shifted = x - (_lastmax(x) if last else x.max(axis=axis, keepdims=True))
    e = np.exp(shifted)
    lse = np.log(_lastsum(e) if last else e.sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    inv_t = p.dtype.type(1.0 / t)

    def bw(g):
        gz = g - p * (_lastsum(g) if last else g.sum(axis=axis, keepdims=True))
        if t != 1.0:
            gz = gz * inv_t
        return (gz,)

    return _emit(out, (z,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}")
    xd = x.data
    inv_d = xd.dtype.type(1.0 / d)
    mu = _lastsum(xd) * inv_d
    xc = xd - mu
    var = _lastsum(xc * xc) * inv_d
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gxhat = g * gd
        gx = None
        if x.requires_grad:
            gx = inv * (gxhat - _lastsum(gxhat) * inv_d
                        - xhat * (_lastsum(gxhat * xhat) * inv_d))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(out, (x, gain, bias), bw, "layer_norm")


# ---------------------------------------------------------------- losses


def cross_entropy(target, pred: Tensor) -> Tensor:
    """``-sum_c target_c * log(pred_c)`` over the last axis.

    ``pred`` holds probabilities; entries below :data:`PROB_FLOOR` are clamped
    (and pass no gradient). Returns one value per row (a scalar for vectors).
    """
    target = _lift(target, pred)
    if target.shape != pred.shape:
        raise DimensionError(f"cross_entropy: target {target.shape} vs pred {pred.shape}")
    pd = pred.data
    clamped = np.maximum(pd, pd.dtype.type(PROB_FLOOR))
    logp = np.log(clamped)
    td = target.data
    out = -(td * logp).sum(axis=-1)

    def bw(g):
        g = np.expand_dims(g, -1)
        gt = -g * logp if target.requires_grad else None
        gp = None
        if pred.requires_grad:
            gp = np.where(pd > PROB_FLOOR, -g * td / clamped, 0).astype(pd.dtype)
        return gt, gp

    return _emit(np.asarray(out), (target, pred), bw, "cross_entropy")


def softmax_cross_entropy(target, logits: Tensor, t: float = 1.0) -> Tensor:
    """``cross_entropy(target, softmax(logits / t))`` evaluated via log-softmax.

    Identical in value to the probability route whenever no probability falls
    below the floor, with a gradient that stays informative for confident
    mistakes. Returns one value per row.
    """
    target = _lift(target, logits)
    if target.shape != logits.shape:
        raise DimensionError(f"softmax_cross_entropy: target {target.shape} vs logits {logits.shape}")
    return neg(sum(mul(target, log_softmax(logits, t)), axis=-1))


def mse(a: Tensor, b) -> Tensor:
    """Mean of squared differences over all elements."""
    b = _lift(b, a)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = a.dtype.type(diff.size)

    def bw(g):
        ga = g * 2 * diff / n
        return (ga if a.requires_grad else None, -ga if b.requires_grad else None)

    return _emit(np.asarray((diff * diff).sum() / n), (a, b), bw, "mse")


def masked_mse(a: Tensor, b: Tensor, mask: np.ndarray) -> Tensor:
    """Squared error averaged over rows where ``mask`` is true and all features.

    ``a``/``b`` are (..., d); ``mask`` has the leading shape (...).
    """
    if a.shape != b.shape:
        raise DimensionError(f"masked_mse: shapes {a.shape} and {b.shape} differ")
    if mask.shape != a.shape[:-1]:
        raise DimensionError(f"masked_mse: mask {mask.shape} does not match rows of {a.shape}")
    w = mask[..., None].astype(a.dtype)
    diff = (a.data - b.data) * w
    n = a.dtype.type(w.sum() * a.shape[-1])

    def bw(g):
        ga = g * 2 * diff / n
        return (ga if a.requires_grad else None, -ga if b.requires_grad else None)

    return _emit(np.asarray((diff * diff).sum() / n), (a, b), bw, "masked_mse")


# ---------------------------------------------------------------- fused transformer blocks


def self_attention(x: Tensor, wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor,
                   wv: Tensor, bv: Tensor, wo: Tensor, bo: Tensor,
                   key_mask: np.ndarray, num_heads: int, probs_out: Optional[list] = None) -> Tensor:
    """Multi-head scaled dot-product self-attention over ``x`` (B, L, d).

    Keys where ``key_mask`` (B, L) is false receive weight exactly 0. The
    attention probabilities (B, h, L, L) are appended to ``probs_out`` if given.
    """
    bsz, seq, d = x.shape
    if d % num_heads:
        raise DimensionError(f"width {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    scale = x.dtype.type(1.0 / math.sqrt(dh))
    x2 = x.data.reshape(-1, d)
    w_qkv = np.concatenate([wq.data, wk.data, wv.data], axis=1)
    qkv = x2 @ w_qkv + np.concatenate([bq.data, bk.data, bv.data])
    qkv = qkv.reshape(bsz, seq, 3, num_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    s = (q @ k.transpose(0, 1, 3, 2)) * scale
    s = np.where(key_mask[:, None, None, :], s, -np.inf)
    e = np.exp(s - _lastmax(s))
    p = e / _lastsum(e)
    if probs_out is not None:
        probs_out.append(p)
    ctx = (p @ v).transpose(0, 2, 1, 3).reshape(-1, d)
    out = (ctx @ wo.data + bo.data).reshape(bsz, seq, d)

    def bw(g):
        g2 = g.reshape(-1, d)
        g_wo = ctx.T @ g2
        g_bo = g2.sum(axis=0)
        g_ctx = (g2 @ wo.data.T).reshape(bsz, seq, num_heads, dh).transpose(0, 2, 1, 3)
        g_p = g_ctx @ v.transpose(0, 1, 3, 2)
        g_v = p.transpose(0, 1, 3, 2) @ g_ctx
        g_s = p * (g_p - _lastsum(g_p * p)) * scale
        g_q = g_s @ k
        g_k = g_s.transpose(0, 1, 3, 2) @ q
        g_qkv = np.stack([g_q, g_k, g_v]).transpose(1, 3, 0, 2, 4).reshape(-1, 3 * d)
        g_w = x2.T @ g_qkv
        g_b = g_qkv.sum(axis=0)
        g_x = (g_qkv @ w_qkv.T).reshape(bsz, seq, d) if x.requires_grad else None
        return (g_x, g_w[:, :d], g_b[:d], g_w[:, d:2 * d], g_b[d:2 * d],
                g_w[:, 2 * d:], g_b[2 * d:], g_wo, g_bo)

    return _emit(out, (x, wq, bq, wk, bk, wv, bv, wo, bo), bw, "self_attention")


def feed_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                 activation: str = "gelu") -> Tensor:
    """Position-wise ``act(x W1 + b1) W2 + b2``."""
    shape = x.shape
    d = shape[-1]
    x2 = x.data.reshape(-1, d)
    pre = x2 @ w1.data + b1.data
    if activation == "gelu":
        c = pre.dtype.type(_GELU_C)
        th = np.tanh(c * (pre + pre.dtype.type(0.044715) * pre * pre * pre))
        act = 0.5 * pre * (1 + th)
    elif activation == "relu":
        act = np.maximum(pre, 0)
    else:
        raise ParameterError(f"unknown activation {activation!r}")
    out = (act @ w2.data + b2.data).reshape(shape[:-1] + (w2.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, w2.shape[1])
        g_w2 = act.T @ g2
        g_b2 = g2.sum(axis=0)
        g_act = g2 @ w2.data.T
        if activation == "gelu":
            d_inner = c * (1 + pre.dtype.type(3 * 0.044715) * pre * pre)
            g_pre = g_act * (0.5 * (1 + th) + 0.5 * pre * (1 - th * th) * d_inner)
        else:
            g_pre = g_act * (pre > 0)
        g_w1 = x2.T @ g_pre
        g_b1 = g_pre.sum(axis=0)
        g_x = (g_pre @ w1.data.T).reshape(shape) if x.requires_grad else None
        return g_x, g_w1, g_b1, g_w2, g_b2

    return _emit(out, (x, w1, b1, w2, b2), bw, "feed_forward")
