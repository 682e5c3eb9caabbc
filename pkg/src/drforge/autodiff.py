"""Reverse-mode automatic differentiation over dense float64 tensors.

A small tape-based engine: every op records its parents and a closure that
pushes the output gradient back. numpy supplies the dense array math; all
derivative logic lives here and is validated against central finite
differences in the test suite.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense float tensor; dtype follows the data (float64 by default, a
    model may run float32 end to end by casting its parameters)."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad and _grad_enabled
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    # ---- graph construction helpers -------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def _make(self, data, parents, backward) -> "Tensor":
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        return Tensor(data, requires_grad=needs,
                      parents=tuple(p for p in parents if p.requires_grad),
                      backward=backward if needs else None)

    # ---- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = self._lift(other)
        out_data = self.data + other.data

        def backward(g, a=self, b=other):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.shape))

        return self._make(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g, a=self):
            a._accum(-g)
        return self._make(-self.data, (self,), backward)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)
        out_data = self.data * other.data

        def backward(g, a=self, b=other):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))

        return self._make(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self * self._lift(other) ** -1.0

    def __rtruediv__(self, other):
        return self._lift(other) * self ** -1.0

    @staticmethod
    def _fast_pow(x: np.ndarray, p: float) -> np.ndarray:
        # np.power is slow for the handful of exponents the model uses
        if p == 2.0:
            return x * x
        if p == 3.0:
            return x * x * x
        if p == -1.0:
            return 1.0 / x
        if p == 0.5:
            return np.sqrt(x)
        if p == -0.5:
            return 1.0 / np.sqrt(x)
        if p == -1.5:
            return 1.0 / (x * np.sqrt(x))
        if p == 1.0:
            return x.copy()
        return x ** p

    def __pow__(self, p: float):
        out_data = self._fast_pow(self.data, p)

        def backward(g, a=self, p=p):
            a._accum(g * p * Tensor._fast_pow(a.data, p - 1.0))

        return self._make(out_data, (self,), backward)

    def __matmul__(self, other):
        other = self._lift(other)
        out_data = self.data @ other.data

        def backward(g, a=self, b=other):
            if a.requires_grad:
                a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

        return self._make(out_data, (self, other), backward)

    # ---- elementwise functions --------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g, a=self, y=out_data):
            a._accum(g * y)

        return self._make(out_data, (self,), backward)

    def log(self):
        def backward(g, a=self):
            a._accum(g / a.data)
        return self._make(np.log(self.data), (self,), backward)

    def tanh(self):
        out_data = np.tanh(self.data)

        def backward(g, a=self, y=out_data):
            a._accum(g * (1.0 - y * y))

        return self._make(out_data, (self,), backward)

    def gelu(self):
        # tanh approximation; smooth everywhere so finite differences agree
        c = math.sqrt(2.0 / math.pi)
        x = self.data
        u = c * (x + 0.044715 * (x * x * x))
        t = np.tanh(u)
        out_data = 0.5 * x * (1.0 + t)

        def backward(g, a=self, t=t, x=x, c=c):
            du = c * (1.0 + 3 * 0.044715 * (x * x))
            a._accum(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

        return self._make(out_data, (self,), backward)

    # ---- shape ops ---------------------------------------------------------

    def reshape(self, *shape):
        old = self.shape

        def backward(g, a=self, old=old):
            a._accum(g.reshape(old))

        return self._make(self.data.reshape(*shape), (self,), backward)

    def swapaxes(self, a1: int, a2: int):
        def backward(g, a=self, a1=a1, a2=a2):
            a._accum(np.swapaxes(g, a1, a2))
        return self._make(np.swapaxes(self.data, a1, a2), (self,), backward)

    def __getitem__(self, idx):
        out_data = self.data[idx]

        def backward(g, a=self, idx=idx):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accum(full)

        return self._make(out_data, (self,), backward)

    # ---- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g, a=self, axis=axis, keepdims=keepdims):
            if axis is None:
                a._accum(np.broadcast_to(g, a.shape).copy())
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                a._accum(np.broadcast_to(g, a.shape).copy())

        return self._make(out_data, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def layer_norm(self, gamma: "Tensor", beta: "Tensor", eps: float = 1e-5):
        """Normalize over the last axis, then scale and shift."""
        x = self.data
        mu = x.mean(-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out_data = xhat * gamma.data + beta.data

        def backward(g, a=self, gamma=gamma, beta=beta, xhat=xhat, inv=inv):
            if gamma.requires_grad:
                gamma._accum((g * xhat).sum(axis=tuple(range(g.ndim - 1))))
            if beta.requires_grad:
                beta._accum(g.sum(axis=tuple(range(g.ndim - 1))))
            if a.requires_grad:
                ghat = g * gamma.data
                m1 = ghat.mean(-1, keepdims=True)
                m2 = (ghat * xhat).mean(-1, keepdims=True)
                a._accum(inv * (ghat - m1 - xhat * m2))

        return self._make(out_data, (self, gamma, beta), backward)

    # ---- stable softmax family ---------------------------------------------

    def softmax(self, axis: int = -1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def backward(g, a=self, s=out_data, axis=axis):
            dot = (g * s).sum(axis=axis, keepdims=True)
            a._accum(s * (g - dot))

        return self._make(out_data, (self,), backward)

    def log_softmax(self, axis: int = -1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out_data = shifted - lse

        def backward(g, a=self, y=out_data, axis=axis):
            a._accum(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

        return self._make(out_data, (self,), backward)

    # ---- autodiff driver ------------------------------------------------------

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self, seed=None):
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed needs a scalar output")
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accum(np.asarray(seed, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused x @ w + b with a single backward closure."""
    out_data = x.data @ w.data
    if b is not None:
        out_data = out_data + b.data

    def backward(g, x=x, w=w, b=b):
        if x.requires_grad:
            x._accum(g @ w.data.T)
        if w.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.data.reshape(-1, x.data.shape[-1])
            w._accum(x2.T @ g2)
        if b is not None and b.requires_grad:
            b._accum(g.reshape(-1, g.shape[-1]).sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(out_data, requires_grad=needs,
                  parents=tuple(p for p in parents if p.requires_grad),
                  backward=backward if needs else None)


def attention(x_q: Tensor, x_kv: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
              wo: Tensor, n_heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Fused multi-head attention: projections, scaled dot-product softmax
    (optional additive mask) and the output projection, with one hand-derived
    backward closure. Self-attention passes the same tensor for x_q/x_kv;
    gradient accumulation handles the shared parent."""
    bsz, tq, d = x_q.data.shape
    tk = x_kv.data.shape[1]
    h, dh = n_heads, d // n_heads
    scale = dh ** -0.5

    def split(m):
        return m.reshape(bsz, -1, h, dh).transpose(0, 2, 1, 3)

    q = split(x_q.data @ wq.data)
    k = split(x_kv.data @ wk.data)
    v = split(x_kv.data @ wv.data)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    if mask is not None:
        scores = scores + mask
    scores -= scores.max(-1, keepdims=True)
    att = np.exp(scores)
    att /= att.sum(-1, keepdims=True)
    ctx = (att @ v).transpose(0, 2, 1, 3).reshape(bsz, tq, d)
    out_data = ctx @ wo.data

    def backward(g, x_q=x_q, x_kv=x_kv, wq=wq, wk=wk, wv=wv, wo=wo,
                 q=q, k=k, v=v, att=att, ctx=ctx):
        g2 = g.reshape(-1, d)
        if wo.requires_grad:
            wo._accum(ctx.reshape(-1, d).T @ g2)
        d_ctx = (g @ wo.data.T).reshape(bsz, tq, h, dh).transpose(0, 2, 1, 3)
        d_att = d_ctx @ v.transpose(0, 1, 3, 2)
        d_v = att.transpose(0, 1, 3, 2) @ d_ctx
        d_scores = att * (d_att - (d_att * att).sum(-1, keepdims=True))
        d_scores *= scale
        d_q = d_scores @ k
        d_k = d_scores.transpose(0, 1, 3, 2) @ q

        def merge(m, t):
            return m.transpose(0, 2, 1, 3).reshape(bsz, t, d)

        d_q, d_k, d_v = merge(d_q, tq), merge(d_k, tk), merge(d_v, tk)
        if wq.requires_grad:
            wq._accum(x_q.data.reshape(-1, d).T @ d_q.reshape(-1, d))
        if wk.requires_grad:
            wk._accum(x_kv.data.reshape(-1, d).T @ d_k.reshape(-1, d))
        if wv.requires_grad:
            wv._accum(x_kv.data.reshape(-1, d).T @ d_v.reshape(-1, d))
        if x_q.requires_grad:
            x_q._accum(d_q @ wq.data.T)
        if x_kv.requires_grad:
            x_kv._accum(d_k @ wk.data.T + d_v @ wv.data.T)

    parents = (x_q, x_kv, wq, wk, wv, wo)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(out_data, requires_grad=needs,
                  parents=tuple(dict.fromkeys(p for p in parents if p.requires_grad)),
                  backward=backward if needs else None)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g, parts=tensors, sizes=sizes, axis=axis):
        offset = 0
        for part, size in zip(parts, sizes):
            if part.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + size)
                part._accum(g[tuple(sl)])
            offset += size

    needs = _grad_enabled and any(t.requires_grad for t in tensors)
    return Tensor(out_data, requires_grad=needs,
                  parents=tuple(t for t in tensors if t.requires_grad),
                  backward=backward if needs else None)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    mask = ((rng.random(x.shape) >= p) / (1.0 - p)).astype(x.data.dtype)
    return x * Tensor(mask)


class Adam:
    """Plain Adam over a list of named parameter tensors."""

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self):
        self.t += 1
        for key, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[key] = self.b1 * self.m[key] + (1 - self.b1) * g
            self.v[key] = self.b2 * self.v[key] + (1 - self.b2) * g * g
            m_hat = self.m[key] / (1 - self.b1 ** self.t)
            v_hat = self.v[key] / (1 - self.b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
