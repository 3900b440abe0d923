"""Tape-based reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every operation eagerly, in execution order, so the
node list is already topologically sorted.  :meth:`Tape.backward` walks it
in reverse and accumulates cotangents into the ``grad`` of trainable
:class:`Param` leaves.

Op kinds: ``matmul add sub mul scale gelu layer-norm softmax-rows attention
reshape transpose slice diag mean l1-loss svd-topk``.
"""
from __future__ import annotations

import math

import numpy as np

from . import linalg


class AutodiffError(ValueError):
    pass


class Param:
    """A named array with a gradient buffer.  Frozen params never receive grads."""

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, value, trainable: bool = True, name: str = ""):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self):
        flag = "" if self.trainable else ", frozen"
        return f"Param({self.name!r}, {self.value.shape}{flag})"


class Node:
    __slots__ = ("kind", "value", "grad", "inputs", "attrs", "ctx", "requires_grad", "param")

    def __init__(self, kind, value, inputs=(), attrs=None, ctx=None, requires_grad=False, param=None):
        self.kind = kind
        self.value = value
        self.grad = None
        self.inputs = inputs
        self.attrs = attrs or {}
        self.ctx = ctx
        self.requires_grad = requires_grad
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        shape = getattr(self.value, "shape", None)
        return f"Node({self.kind}, shape={shape})"


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _swap(a):
    return np.swapaxes(a, -1, -2)


# --------------------------------------------------------------------------
# op table: forward(*values, **attrs) -> (value, ctx)
#           backward(ctx, g, values, needs, **attrs) -> input cotangents
# ``needs[i]`` is False when input i is constant or frozen; its cotangent
# may then be skipped (returned as None).
# --------------------------------------------------------------------------


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise AutodiffError(f"matmul: shape mismatch {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise AutodiffError(f"matmul: batch mismatch {a.shape} x {b.shape}")
    return a @ b, None


def _matmul_bwd(ctx, g, vals, needs):
    a, b = vals
    ga = gb = None
    if needs[0]:
        ga = g @ _swap(b)
    if needs[1]:
        if b.ndim == 2 and a.ndim > 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _swap(a) @ g
    return ga, gb


def _binary(kind, fn):
    def fwd(a, b):
        try:
            return fn(a, b), None
        except ValueError:
            raise AutodiffError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from None

    return fwd


def _add_bwd(ctx, g, vals, needs):
    a, b = vals
    return (_unbroadcast(g, a.shape) if needs[0] else None, _unbroadcast(g, b.shape) if needs[1] else None)


def _sub_bwd(ctx, g, vals, needs):
    a, b = vals
    return (_unbroadcast(g, a.shape) if needs[0] else None, -_unbroadcast(g, b.shape) if needs[1] else None)


def _mul_bwd(ctx, g, vals, needs):
    a, b = vals
    return (_unbroadcast(g * b, a.shape) if needs[0] else None, _unbroadcast(g * a, b.shape) if needs[1] else None)


def _scale_fwd(a, c=1.0):
    c = np.asarray(c, dtype=np.float64)
    try:
        out = a * c
    except ValueError:
        raise AutodiffError(f"scale: cannot broadcast {a.shape} with constant {c.shape}") from None
    if out.shape != a.shape:
        raise AutodiffError(f"scale: constant {c.shape} would change shape {a.shape}")
    return out, None


def _scale_bwd(ctx, g, vals, needs, c=1.0):
    return (g * np.asarray(c, dtype=np.float64),)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def _gelu_fwd(a):
    # tanh approximation
    a2 = a * a
    t = np.tanh(_GELU_C * a * (1.0 + _GELU_K * a2))
    out = 1.0 + t
    out *= 0.5 * a
    return out, (t, a2)


def _gelu_bwd(ctx, g, vals, needs):
    (a,) = vals
    t, a2 = ctx
    d = 1.0 - t * t
    d *= a
    d *= (0.5 * _GELU_C) * (1.0 + (3 * _GELU_K) * a2)
    d += 0.5 * (1.0 + t)
    d *= g
    return (d,)


def _layer_norm_fwd(a, scale=None, offset=None, eps=1e-5):
    d = a.shape[-1]
    for prm in (scale, offset):
        if prm is not None and prm.shape[-1] != d:
            raise AutodiffError(f"layer-norm: affine shape {prm.shape} does not match features {d}")
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    inv = 1.0 / np.sqrt(np.einsum("...i,...i->...", xc, xc)[..., None] / d + eps)
    xhat = xc
    xhat *= inv
    out = xhat
    if scale is not None:
        out = xhat * scale
    if offset is not None:
        out = out + offset
    return out, (xhat, inv)


def _layer_norm_bwd(ctx, g, vals, needs, eps=1e-5):
    xhat, inv = ctx
    a = vals[0]
    scale = vals[1] if len(vals) > 1 else None
    gs = go = gx = None
    if len(vals) > 1 and needs[1]:
        gs = _unbroadcast(g * xhat, scale.shape)
    if len(vals) > 2 and needs[2]:
        go = _unbroadcast(g, vals[2].shape)
    if needs[0]:
        gh = g * scale if scale is not None else g
        d = a.shape[-1]
        gm = gh.mean(axis=-1, keepdims=True)
        gx = np.einsum("...i,...i->...", gh, xhat)[..., None] / d
        gx = gh - gm - xhat * gx
        gx *= inv
    return (gx, gs, go)[: len(vals)]


def _row_sums(a2):
    # BLAS gemv beats a keepdims reduction over short rows
    return a2 @ np.ones(a2.shape[1])


def _softmax(a):
    a2 = a.reshape(-1, a.shape[-1])
    e = a2 - a2.max(axis=1)[:, None]
    np.exp(e, out=e)
    e /= _row_sums(e)[:, None]
    return e.reshape(a.shape)


def _softmax_grad(y, g):
    y2 = y.reshape(-1, y.shape[-1])
    gy = g.reshape(y2.shape) * y2
    gy -= y2 * _row_sums(gy)[:, None]
    return gy.reshape(y.shape)


def _softmax_fwd(a):
    y = _softmax(a)
    return y, y


def _softmax_bwd(y, g, vals, needs):
    return (_softmax_grad(y, g),)


def _attention_fwd(qkv, heads=1):
    """Multi-head scaled dot-product self-attention on packed ``[q | k | v]`` features."""
    if qkv.ndim != 3 or qkv.shape[-1] % (3 * heads):
        raise AutodiffError(f"attention: packed qkv of shape {qkv.shape} does not split into 3 x {heads} heads")
    b, t, d3 = qkv.shape
    d = d3 // 3
    hd = d // heads
    x = qkv.reshape(b, t, 3, heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = x[0], x[1], x[2]
    sc = 1.0 / math.sqrt(hd)
    att = _softmax((q * sc) @ _swap(k))
    o = att @ v
    return o.transpose(0, 2, 1, 3).reshape(b, t, d), (q, k, v, att, sc)


def _attention_bwd(ctx, g, vals, needs, heads=1):
    q, k, v, att, sc = ctx
    b, h, t, hd = q.shape
    go = g.reshape(b, t, h, hd).transpose(0, 2, 1, 3)
    gv = _swap(att) @ go
    gs = _softmax_grad(att, go @ _swap(v))
    gs *= sc
    gq = gs @ k
    gk = _swap(gs) @ q
    out = np.stack((gq, gk, gv)).transpose(1, 3, 0, 2, 4).reshape(b, t, 3 * h * hd)
    return (out,)


def _reshape_fwd(a, shape=None):
    try:
        return a.reshape(shape), None
    except ValueError:
        raise AutodiffError(f"reshape: cannot reshape {a.shape} to {shape}") from None


def _reshape_bwd(ctx, g, vals, needs, shape=None):
    return (g.reshape(vals[0].shape),)


def _transpose_fwd(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise AutodiffError(f"transpose: bad axes {axes} for shape {a.shape}")
    return np.transpose(a, axes), None


def _transpose_bwd(ctx, g, vals, needs, axes=None):
    if axes is None:
        axes = tuple(reversed(range(vals[0].ndim)))
    return (np.transpose(g, np.argsort(axes)),)


def _slice_fwd(a, index=None):
    try:
        return a[index], None
    except IndexError as exc:
        raise AutodiffError(f"slice: {exc} for shape {a.shape}") from None


def _slice_bwd(ctx, g, vals, needs, index=None):
    out = np.zeros_like(vals[0])
    out[index] = g
    return (out,)


def _diag_fwd(a):
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise AutodiffError(f"diag: needs a square matrix, got {a.shape}")
    return np.diagonal(a).copy().reshape(1, -1), None


def _diag_bwd(ctx, g, vals, needs):
    return (np.diag(g.ravel()),)


def _mean_fwd(a):
    return np.array([[a.mean()]]), None


def _mean_bwd(ctx, g, vals, needs):
    a = vals[0]
    return (np.full(a.shape, g.item() / a.size),)


def _l1_fwd(a, b):
    if a.shape != b.shape:
        raise AutodiffError(f"l1-loss: shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return np.array([[np.abs(d).mean()]]), np.sign(d)


def _l1_bwd(sgn, g, vals, needs):
    ga = sgn * (g.item() / sgn.size)
    return (ga if needs[0] else None, -ga if needs[1] else None)


_OPS = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "add": (_binary("add", np.add), _add_bwd),
    "sub": (_binary("sub", np.subtract), _sub_bwd),
    "mul": (_binary("mul", np.multiply), _mul_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "gelu": (_gelu_fwd, _gelu_bwd),
    "layer-norm": (_layer_norm_fwd, _layer_norm_bwd),
    "softmax-rows": (_softmax_fwd, _softmax_bwd),
    "attention": (_attention_fwd, _attention_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
    "transpose": (_transpose_fwd, _transpose_bwd),
    "slice": (_slice_fwd, _slice_bwd),
    "diag": (_diag_fwd, _diag_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "l1-loss": (_l1_fwd, _l1_bwd),
}
OP_KINDS = tuple(_OPS) + ("svd-topk",)


# --------------------------------------------------------------------------
# SVD differential
# --------------------------------------------------------------------------


def svd_backward(U, s, V, gU=None, gV=None):
    """Cotangent of ``w`` given cotangents of its economy singular vectors.

    ``gU`` / ``gV`` are ``m x p`` / ``n x p`` (zero columns for unselected
    vectors).  Near-degenerate gaps are floored at ``1e-10 * sigma_1**2``;
    singular values below ``1e-12 * sigma_1`` are treated as zero.
    """
    m, p = U.shape
    n = V.shape[0]
    if gU is None:
        gU = np.zeros_like(U)
    if gV is None:
        gV = np.zeros_like(V)
    s1 = s[0] if p else 0.0
    s2 = s * s
    d = s2[None, :] - s2[:, None]
    eps_gap = max(1e-10 * s1 * s1, np.finfo(np.float64).tiny)
    dreg = np.where(d >= 0.0, 1.0, -1.0) * np.maximum(np.abs(d), eps_gap)
    F = 1.0 / dreg
    np.fill_diagonal(F, 0.0)
    sinv = np.zeros_like(s)
    keep = s > 1e-12 * s1
    sinv[keep] = 1.0 / s[keep]

    UtgU = U.T @ gU
    VtgV = V.T @ gV
    J = F * UtgU
    K = F * VtgV
    inner = (J + J.T) * s[None, :] + s[:, None] * (K + K.T)
    dW = U @ inner @ V.T
    if m > p:
        dW += ((gU - U @ UtgU) * sinv[None, :]) @ V.T
    if n > p:
        dW += (U * sinv[None, :]) @ (gV.T - VtgV.T @ V.T)
    return dW


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------


def _accumulate(node, g):
    if isinstance(node.value, tuple):
        if node.grad is None:
            node.grad = [None] * len(node.value)
        for i, gi in enumerate(g):
            if gi is None:
                continue
            node.grad[i] = gi if node.grad[i] is None else node.grad[i] + gi
        return
    node.grad = g if node.grad is None else node.grad + g


class Tape:
    """Records operations in execution order; one tape per forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[int, Node] = {}

    def __len__(self):
        return len(self.nodes)

    def param(self, p: Param) -> Node:
        node = self._leaves.get(id(p))
        if node is None:
            node = Node("param", p.value, requires_grad=p.trainable, param=p)
            self._leaves[id(p)] = node
            self.nodes.append(node)
        return node

    def const(self, value) -> Node:
        node = Node("const", np.asarray(value, dtype=np.float64))
        self.nodes.append(node)
        return node

    def _wrap(self, x) -> Node:
        if isinstance(x, Node):
            return x
        if isinstance(x, Param):
            return self.param(x)
        return self.const(x)

    def record(self, kind: str, *inputs, **attrs) -> Node:
        if kind == "svd-topk":
            raise AutodiffError("use Tape.svd_topk for the two-output svd node")
        try:
            fwd, _ = _OPS[kind]
        except KeyError:
            raise AutodiffError(f"unknown op kind {kind!r}") from None
        nodes = tuple(self._wrap(x) for x in inputs)
        value, ctx = fwd(*(n.value for n in nodes), **attrs)
        req = any(n.requires_grad for n in nodes)
        node = Node(kind, value, nodes, attrs, ctx, requires_grad=req)
        self.nodes.append(node)
        return node

    def svd_topk(self, w, k: int, guess: linalg.SvdResult | None = None):
        """Differentiable leading ``k`` singular vectors ``(Uk, Vk)`` of ``w``.

        ``guess`` (SVD of a nearby matrix) only speeds up the forward solve.
        """
        w = self._wrap(w)
        res = linalg.svd(w.value, guess=guess)
        t = linalg.top_k(res, k)
        base = Node("svd-topk", (res.U, res.sigma, res.V), (w,), {"k": t.k_eff}, requires_grad=w.requires_grad)
        self.nodes.append(base)
        uk = Node("svd-u", t.Uk, (base,), {"k": t.k_eff}, requires_grad=w.requires_grad)
        vk = Node("svd-v", t.Vk, (base,), {"k": t.k_eff}, requires_grad=w.requires_grad)
        self.nodes.extend((uk, vk))
        return uk, vk

    # thin conveniences
    def matmul(self, a, b):
        return self.record("matmul", a, b)

    def add(self, a, b):
        return self.record("add", a, b)

    def sub(self, a, b):
        return self.record("sub", a, b)

    def mul(self, a, b):
        return self.record("mul", a, b)

    def scale(self, a, c):
        return self.record("scale", a, c=c)

    def mean(self, a):
        return self.record("mean", a)

    def l1_loss(self, a, b):
        return self.record("l1-loss", a, b)

    def backward(self, loss: Node) -> None:
        """Accumulate ``d loss / d p`` into ``p.grad`` for every trainable param."""
        if not isinstance(loss.value, np.ndarray) or loss.value.size != 1:
            raise AutodiffError(f"backward needs a scalar loss, got shape {np.shape(loss.value)}")
        for n in self.nodes:
            n.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None or not node.requires_grad:
                continue
            if node.kind == "param":
                node.param.grad += g
                continue
            if node.kind == "const":
                continue
            if node.kind in ("svd-u", "svd-v"):
                base = node.inputs[0]
                full = np.zeros_like(base.value[0] if node.kind == "svd-u" else base.value[2])
                full[:, : g.shape[1]] = g
                _accumulate(base, (full, None) if node.kind == "svd-u" else (None, full))
                continue
            if node.kind == "svd-topk":
                U, s, V = node.value
                _accumulate(node.inputs[0], svd_backward(U, s, V, g[0], g[1]))
                continue
            _, bwd = _OPS[node.kind]
            vals = [n.value for n in node.inputs]
            needs = [n.requires_grad for n in node.inputs]
            grads = bwd(node.ctx, g, vals, needs, **node.attrs)
            for inp, gi, need in zip(node.inputs, grads, needs):
                if gi is not None and need:
                    _accumulate(inp, gi)
        for n in self.nodes:
            if n.kind != "param":
                n.grad = None


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()
