"""Minimal reverse-mode differentiation over numpy arrays.

Only the primitives needed by the verifier are provided: affine maps,
GELU (tanh form), layer normalization, multi-head attention, concatenation,
slicing, and unit normalization, plus elementwise arithmetic and reductions.
Each primitive records a closure that maps the upstream gradient to the
gradients of its inputs; :func:`backward` walks the tape in reverse
topological order.

All arithmetic is float64.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

EPS_NORM = 1e-12
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

_grad_enabled = True


@contextmanager
def no_grad():
    """Evaluate without recording the tape (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Var:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, parents: Sequence["Var"] = (), backward_fn: Callable | None = None,
                 requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"<Var{tag} shape={self.shape} grad={self.requires_grad}>"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)


def param(data, name: str | None = None) -> Var:
    return Var(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def const(data) -> Var:
    return data if isinstance(data, Var) else Var(data)


def _node(data, parents, backward_fn) -> Var:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Var(data, parents, backward_fn, requires_grad=True)
    return Var(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(out: Var, grad: np.ndarray | None = None) -> None:
    """Accumulate d(out)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if not out.requires_grad:
        return
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data) if grad is None else np.asarray(grad, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            # leaf
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Var:
    a, b = const(a), const(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    a, b = const(a), const(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Var:
    a, b = const(a), const(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Var, c: float) -> Var:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def gelu(x: Var) -> Var:
    xd = x.data
    x2 = xd * xd
    t = np.tanh(GELU_C * xd * (1.0 + GELU_A * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x2)
        return (g * d,)

    return _node(out, (x,), bw)


def log_sigmoid(x: Var) -> Var:
    """``log(sigmoid(x))`` without overflow for large ``|x|``."""
    xd = x.data
    out = -np.logaddexp(0.0, -xd)
    return _node(out, (x,), lambda g: (g * expit(-xd),))


# ---------------------------------------------------------------- reductions / shapes

def sum_(a: Var, axis=None, keepdims: bool = False) -> Var:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), bw)


def mean(a: Var, axis=None) -> Var:
    """Mean with a shift by the first element, so constant inputs average exactly."""
    n = a.data.size if axis is None else a.shape[axis]
    if a.data.size == 0:
        raise ValueError("mean of an empty tensor")
    shift = a.data.reshape(-1)[0]
    out = shift + (a.data - shift).mean(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _node(np.asarray(out, dtype=np.float64), (a,), bw)


def reshape(a: Var, shape) -> Var:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Var, axes) -> Var:
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Var, shape) -> Var:
    return _node(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, a.shape),))


def getitem(a: Var, idx) -> Var:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), bw)


def take_rows(table: Var, idx) -> Var:
    """Embedding lookup ``table[idx]``."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        if idx.ndim != 1:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            return (full,)
        # scatter-add as a one-hot product: much faster than ufunc.at
        onehot = np.zeros((table.shape[0], idx.size))
        onehot[idx, np.arange(idx.size)] = 1.0
        return ((onehot @ g.reshape(idx.size, -1)).reshape(table.shape),)

    return _node(table.data[idx], (table,), bw)


def concat(vs: Sequence[Var], axis: int = 0) -> Var:
    vs = [const(v) for v in vs]
    out = np.concatenate([v.data for v in vs], axis=axis)
    sizes = np.cumsum([v.shape[axis] for v in vs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(out, vs, bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Var, b: Var) -> Var:
    a, b = const(a), const(b)
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), bw)


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is ``[in, out]``."""
    xd = x.data
    out = xd @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = g @ w.data.T
        x2 = xd.reshape(-1, xd.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _node(out, parents, bw)


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(out, (x, gamma, beta), bw)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attention(q: Var, k_ctx: Var | None, v_ctx: Var | None, k_own: Var | None, v_own: Var | None,
              n_heads: int) -> Var:
    """Multi-head scaled dot-product attention with a shared and a private key set.

    Shapes: ``q`` is ``[B, A, Q, H]``; ``k_ctx``/``v_ctx`` are ``[B, T, H]`` and
    shared by every ``(b, a)`` group; ``k_own``/``v_own`` are ``[B, A, S, H]``
    and visible only to the queries of their own group.  Either key set may
    be ``None``.  Returns ``[B, A, Q, H]``.
    """
    B, A, Q, H = q.shape
    h = n_heads
    if H % h:
        raise ValueError(f"hidden size {H} not divisible by {h} heads")
    d = H // h
    sc = 1.0 / math.sqrt(d)
    has_ctx = k_ctx is not None
    has_own = k_own is not None
    if not (has_ctx or has_own):
        raise ValueError("attention needs at least one key set")

    qh = q.data.reshape(B, A, Q, h, d).transpose(0, 3, 1, 2, 4)  # B h A Q d
    parts = []
    if has_ctx:
        T = k_ctx.shape[1]
        kch = k_ctx.data.reshape(B, T, h, d).transpose(0, 2, 1, 3)  # B h T d
        vch = v_ctx.data.reshape(B, T, h, d).transpose(0, 2, 1, 3)
        lc = (qh.reshape(B, h, A * Q, d) @ kch.transpose(0, 1, 3, 2)).reshape(B, h, A, Q, T)
        parts.append(lc)
    else:
        T = 0
    if has_own:
        S = k_own.shape[2]
        koh = k_own.data.reshape(B, A, S, h, d).transpose(0, 3, 1, 2, 4)  # B h A S d
        voh = v_own.data.reshape(B, A, S, h, d).transpose(0, 3, 1, 2, 4)
        parts.append(qh @ koh.transpose(0, 1, 2, 4, 3))
    logits = (np.concatenate(parts, axis=-1) if len(parts) > 1 else parts[0]) * sc
    p = _softmax(logits)  # B h A Q (T+S)

    out = np.zeros((B, h, A, Q, d))
    if has_ctx:
        pc = p[..., :T]
        out += (pc.reshape(B, h, A * Q, T) @ vch).reshape(B, h, A, Q, d)
    if has_own:
        po = p[..., T:]
        out += po @ voh
    result = out.transpose(0, 2, 3, 1, 4).reshape(B, A, Q, H)

    parents = [q]
    if has_ctx:
        parents += [k_ctx, v_ctx]
    if has_own:
        parents += [k_own, v_own]

    def bw(g):
        go = g.reshape(B, A, Q, h, d).transpose(0, 3, 1, 2, 4)  # B h A Q d
        gp_parts = []
        grads = []
        if has_ctx:
            go_flat = go.reshape(B, h, A * Q, d)
            gpc = (go_flat @ vch.transpose(0, 1, 3, 2)).reshape(B, h, A, Q, T)
            gvch = pc.reshape(B, h, A * Q, T).transpose(0, 1, 3, 2) @ go_flat  # B h T d
            gp_parts.append(gpc)
        if has_own:
            gpo = go @ voh.transpose(0, 1, 2, 4, 3)
            gvoh = po.transpose(0, 1, 2, 4, 3) @ go  # B h A S d
            gp_parts.append(gpo)
        gp = np.concatenate(gp_parts, axis=-1) if len(gp_parts) > 1 else gp_parts[0]
        gl = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * sc
        gq = np.zeros_like(qh)
        if has_ctx:
            glc = gl[..., :T]
            gq += (glc.reshape(B, h, A * Q, T) @ kch).reshape(B, h, A, Q, d)
            gkch = glc.reshape(B, h, A * Q, T).transpose(0, 1, 3, 2) @ qh.reshape(B, h, A * Q, d)
        if has_own:
            glo = gl[..., T:]
            gq += glo @ koh
            gkoh = glo.transpose(0, 1, 2, 4, 3) @ qh
        grads.append(gq.transpose(0, 2, 3, 1, 4).reshape(B, A, Q, H))
        if has_ctx:
            grads.append(gkch.transpose(0, 2, 1, 3).reshape(B, T, H))
            grads.append(gvch.transpose(0, 2, 1, 3).reshape(B, T, H))
        if has_own:
            grads.append(gkoh.transpose(0, 2, 3, 1, 4).reshape(B, A, S, H))
            grads.append(gvoh.transpose(0, 2, 3, 1, 4).reshape(B, A, S, H))
        return tuple(grads)

    return _node(result, parents, bw)


def normalize(x: Var, eps: float = EPS_NORM) -> tuple[Var, np.ndarray]:
    """Unit-normalize along the last axis.

    Rows with norm ``<= eps`` are replaced by the first basis vector and
    receive zero gradient; the boolean degenerate mask is returned alongside.
    """
    xd = x.data
    n = np.linalg.norm(xd, axis=-1, keepdims=True)
    degenerate = (n <= eps)[..., 0]
    safe = np.where(n > eps, n, 1.0)
    y = xd / safe
    if degenerate.any():
        fallback = np.zeros(xd.shape[-1])
        fallback[0] = 1.0
        y[degenerate] = fallback

    def bw(g):
        gx = (g - y * (g * y).sum(axis=-1, keepdims=True)) / safe
        gx[degenerate] = 0.0
        return (gx,)

    return _node(y, (x,), bw), degenerate


# ---------------------------------------------------------------- plain-array helpers

def unit_normalize(v, eps: float = EPS_NORM) -> tuple[np.ndarray, bool]:
    """Return ``(v / ||v||, degenerate)``; degenerate input maps to the first axis."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if not n > eps:
        out = np.zeros_like(v)
        if out.size:
            out[0] = 1.0
        return out, True
    return v / n, False


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-4,
                   indices=None) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (mutated in place and restored)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom
