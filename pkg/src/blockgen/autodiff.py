"""Minimal reverse-mode automatic differentiation over numpy arrays.

Everything in this package that needs gradients (the toy denoiser, the
dual encoder, the loss family) is built on this engine. It is small on
purpose: float64 only, no views, no in-place mutation of graph nodes.
Gradient correctness is enforced by finite-difference tests, so keep any
new op's backward closed-form and covered there.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "parameter",
    "constant",
    "concatenate",
    "matmul",
    "softmax",
    "logsumexp",
    "softplus",
    "embedding",
    "conv2d",
    "upsample2x",
    "layernorm",
    "Adam",
    "numeric_gradient",
]


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph: float64 array + gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing --------------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self, grad=None):
        """Accumulate gradients into every reachable `requires_grad` leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def zero_grad(self):
        self.grad = None

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other
        data = a.data + b.data
        return Tensor._make(
            data, (a, b),
            lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._make(-a.data, (a,), lambda g: (-g,))

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other):
        return Tensor(other) + (-self)

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other
        data = a.data * b.data
        return Tensor._make(
            data, (a, b),
            lambda g: (
                _unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return Tensor(other) * self ** -1.0

    def __pow__(self, exponent):
        a = self
        e = float(exponent)
        data = a.data ** e
        return Tensor._make(data, (a,), lambda g: (g * e * a.data ** (e - 1.0),))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- elementwise -----------------------------------------------------------

    def exp(self):
        a = self
        data = np.exp(a.data)
        return Tensor._make(data, (a,), lambda g: (g * data,))

    def log(self):
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sqrt(self):
        a = self
        data = np.sqrt(a.data)
        return Tensor._make(data, (a,), lambda g: (g * 0.5 / data,))

    def tanh(self):
        a = self
        data = np.tanh(a.data)
        return Tensor._make(data, (a,), lambda g: (g * (1.0 - data * data),))

    def sigmoid(self):
        a = self
        data = 1.0 / (1.0 + np.exp(-np.clip(a.data, -60.0, 60.0)))
        return Tensor._make(data, (a,), lambda g: (g * data * (1.0 - data),))

    def relu(self):
        a = self
        mask = a.data > 0
        return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,))

    def gelu(self):
        # tanh approximation; exactness is irrelevant, only self-consistency.
        a = self
        c = np.sqrt(2.0 / np.pi)
        x = a.data
        inner = c * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        data = 0.5 * x * (1.0 + t)

        def backward(g):
            dinner = c * (1.0 + 3 * 0.044715 * x ** 2)
            dt = (1.0 - t * t) * dinner
            return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

        return Tensor._make(data, (a,), backward)

    # -- shape ops ---------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inv = tuple(np.argsort(axes))
        return Tensor._make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))

    def swapaxes(self, ax1, ax2):
        a = self
        return Tensor._make(
            np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),)
        )

    def __getitem__(self, idx):
        a = self

        def backward(g):
            out = np.zeros_like(a.data)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(a.data[idx], (a,), backward)

    def sum(self, axis=None, keepdims=False):
        a = self
        data = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, a.data.shape).copy(),)
            g2 = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g2, a.data.shape).copy(),)

        return Tensor._make(data, (a,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def parameter(data):
    return Tensor(data, requires_grad=True)


def constant(data):
    return Tensor(data, requires_grad=False)


def matmul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    data = a.data @ b.data

    def backward(g):
        if b.data.ndim == 1:
            ga = np.outer(g, b.data) if a.data.ndim == 2 else g[..., None] * b.data
            gb = (a.data * g[..., None]).reshape(-1, a.data.shape[-1]).sum(0) \
                if a.data.ndim > 1 else g * a.data
            return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))
        if a.data.ndim == 1:
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.outer(a.data, g) if b.data.ndim == 2 else a.data[:, None] * g
            return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return Tensor._make(data, (a, b), backward)


def concatenate(tensors, axis=0):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(data, tuple(tensors), backward)


def softmax(x, axis=-1):
    x = x if isinstance(x, Tensor) else Tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return Tensor._make(data, (x,), backward)


def logsumexp(x, axis=-1, keepdims=False):
    x = x if isinstance(x, Tensor) else Tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data = m + np.log(s)
    soft = e / s
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def backward(g):
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (g2 * soft,)

    return Tensor._make(data, (x,), backward)


def softplus(x):
    """log(1 + e^x), stable for large |x|."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    data = np.logaddexp(0.0, x.data)
    sig = 1.0 / (1.0 + np.exp(-np.clip(x.data, -60.0, 60.0)))

    def backward(g):
        return (g * sig,)

    return Tensor._make(data, (x,), backward)


def embedding(table, ids):
    """Row-gather from `table` (V, E) by an integer array `ids`."""
    table = table if isinstance(table, Tensor) else Tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return Tensor._make(data, (table,), backward)


def _im2col(xp, kh, kw, stride):
    B, C, H, W = xp.shape
    oh = (H - kh) // stride + 1
    ow = (W - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    shape = (B, C, kh, kw, oh, ow)
    strides = (s0, s1, s2, s3, s2 * stride, s3 * stride)
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides), oh, ow


def conv2d(x, w, b=None, stride=1, pad=0):
    """2D convolution, NCHW layout; w is (O, C, kh, kw)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    w = w if isinstance(w, Tensor) else Tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects 4D input and weight")
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input {x.data.shape} vs weight {w.data.shape}"
        )
    kh, kw = w.data.shape[2], w.data.shape[3]
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols, oh, ow = _im2col(xp, kh, kw, stride)
    data = np.einsum("ocpq,bcpqij->boij", w.data, cols, optimize=True)
    parents = [x, w]
    if b is not None:
        b = b if isinstance(b, Tensor) else Tensor(b)
        data = data + b.data[None, :, None, None]
        parents.append(b)

    def backward(g):
        gw = np.einsum("boij,bcpqij->ocpq", g, cols, optimize=True)
        t = np.einsum("boij,ocpq->bcpqij", g, w.data, optimize=True)
        gxp = np.zeros_like(xp)
        for p in range(kh):
            for q in range(kw):
                gxp[:, :, p:p + stride * oh:stride, q:q + stride * ow:stride] += t[:, :, p, q]
        gx = gxp[:, :, pad:xp.shape[2] - pad, pad:xp.shape[3] - pad] if pad else gxp
        if b is not None:
            return (gx, gw, g.sum(axis=(0, 2, 3)))
        return (gx, gw)

    return Tensor._make(data, tuple(parents), backward)


def upsample2x(x):
    """Nearest-neighbor 2x spatial upsample, NCHW."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    B, C, H, W = x.data.shape

    def backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return Tensor._make(data, (x,), backward)


def layernorm(x, gamma, beta, eps=1e-5):
    """Layer normalization over the last axis."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    gamma = gamma if isinstance(gamma, Tensor) else Tensor(gamma)
    beta = beta if isinstance(beta, Tensor) else Tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    data = gamma.data * xn + beta.data
    n = x.data.shape[-1]

    def backward(g):
        gg = _unbroadcast(g * xn, gamma.data.shape)
        gb = _unbroadcast(g, beta.data.shape)
        gxn = g * gamma.data
        gx = inv * (gxn - gxn.mean(axis=-1, keepdims=True)
                    - xn * (gxn * xn).mean(axis=-1, keepdims=True))
        return (gx, gg, gb)

    return Tensor._make(data, (x, gamma, beta), backward)


class Adam:
    """Deterministic Adam over a {name: Tensor} parameter dict."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / (1 - self.beta1 ** t)
            vhat = self.v[name] / (1 - self.beta2 ** t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self):
        """Optimizer state as flat named float arrays, for checkpointing."""
        out = {"adam.step": np.array([float(self.step_count)])}
        for k in sorted(self.params):
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays):
        self.step_count = int(arrays["adam.step"][0])
        for k in self.params:
            self.m[k] = np.array(arrays[f"adam.m.{k}"], dtype=np.float64)
            self.v[k] = np.array(arrays[f"adam.v.{k}"], dtype=np.float64)


def numeric_gradient(fn, arrays, index, eps=1e-4):
    """Central-difference gradient of scalar fn(arrays) w.r.t. arrays[index].

    `fn` must accept the list of raw numpy arrays and return a float.
    Used as the independent oracle against analytic/backprop gradients.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = target[idx]
        target[idx] = orig + eps
        hi = fn(arrays)
        target[idx] = orig - eps
        lo = fn(arrays)
        target[idx] = orig
        grad[idx] = (hi - lo) / (2 * eps)
        it.iternext()
    return grad
