"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Just enough ops to build and train small encoder-decoder conv nets on CPU:
elementwise arithmetic with broadcasting, reductions, relu, exp/log,
matrix-vector products, slicing views, channel concat, 2-d convolution and
non-overlapping transposed convolution. Gradients accumulate into `.grad`
arrays; `backward()` runs a topological sweep from a scalar output.

Default dtype is float64 (set_default_dtype switches the whole engine).
"""

import numpy as np

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE


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
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

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

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # ---- graph -----------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t._backward is not None:
                t._backward(t.grad)

    # ---- elementwise -----------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bw(g):
            if self.requires_grad or self._parents:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad or other._parents:
                other._accum(_unbroadcast(g, other.data.shape))

        return Tensor(self.data + other.data, _parents=(self, other), _backward=bw)

    __radd__ = __add__

    def __neg__(self):
        def bw(g):
            self._accum(-g)

        return Tensor(-self.data, _parents=(self,), _backward=bw)

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other):
        return Tensor(other) + (-self)

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bw(g):
            if self.requires_grad or self._parents:
                self._accum(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad or other._parents:
                other._accum(_unbroadcast(g * self.data, other.data.shape))

        return Tensor(self.data * other.data, _parents=(self, other), _backward=bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return Tensor(other) * self ** -1.0

    def __pow__(self, p):
        assert np.isscalar(p)

        def bw(g):
            self._accum(g * p * self.data ** (p - 1))

        return Tensor(self.data ** p, _parents=(self,), _backward=bw)

    def exp(self):
        out_data = np.exp(self.data)

        def bw(g):
            self._accum(g * out_data)

        return Tensor(out_data, _parents=(self,), _backward=bw)

    def log(self):
        def bw(g):
            self._accum(g / self.data)

        return Tensor(np.log(self.data), _parents=(self,), _backward=bw)

    def relu(self):
        mask = self.data > 0

        def bw(g):
            self._accum(g * mask)

        return Tensor(self.data * mask, _parents=(self,), _backward=bw)

    # ---- shape -----------------------------------------------------------

    def reshape(self, *shape):
        old = self.data.shape

        def bw(g):
            self._accum(g.reshape(old))

        return Tensor(self.data.reshape(*shape), _parents=(self,), _backward=bw)

    def __getitem__(self, key):
        def bw(g):
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            self.grad[key] += g

        return Tensor(self.data[key], _parents=(self,), _backward=bw)

    # ---- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        def bw(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.data.shape))
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(g, self.data.shape))

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims),
                      _parents=(self,), _backward=bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def concat(tensors, axis=0):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accum(g[tuple(idx)])

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                  _parents=tuple(tensors), _backward=bw)


def stack(tensors, axis=0):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]

    def bw(g):
        for i, t in enumerate(tensors):
            t._accum(np.take(g, i, axis=axis))

    return Tensor(np.stack([t.data for t in tensors], axis=axis),
                  _parents=tuple(tensors), _backward=bw)


def matvec(m, v):
    """(a, b) tensor times (b,) tensor -> (a,)."""
    m = m if isinstance(m, Tensor) else Tensor(m)
    v = v if isinstance(v, Tensor) else Tensor(v)

    def bw(g):
        if m.requires_grad or m._parents:
            m._accum(np.outer(g, v.data))
        if v.requires_grad or v._parents:
            v._accum(m.data.T @ g)

    return Tensor(m.data @ v.data, _parents=(m, v), _backward=bw)


def softmax(x, axis=-1):
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))  # constant shift
    e = (x - shift).exp()
    return e * e.sum(axis=axis, keepdims=True) ** -1.0


def log_softmax(x, axis=-1):
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    z = x - shift
    return z - z.exp().sum(axis=axis, keepdims=True).log()


def conv2d(x, w, b=None, stride=1, padding=0):
    """x (N,C,H,W) conv w (O,C,k,k) -> (N,O,Ho,Wo), optional bias (O,)."""
    n, c, h, wd = x.data.shape
    o, ci, kh, kw = w.data.shape
    assert ci == c, f"conv2d channel mismatch: input {c}, weight {ci}"
    s, p = stride, padding
    if p:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    else:
        xp = x.data
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    out = np.zeros((n, o, ho, wo), dtype=x.data.dtype)
    for di in range(kh):
        for dj in range(kw):
            xv = xp[:, :, di:di + s * ho:s, dj:dj + s * wo:s]
            out += np.einsum("oc,ncij->noij", w.data[:, :, di, dj], xv,
                             optimize=True)
    if b is not None:
        out += b.data.reshape(1, o, 1, 1)

    def bw(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        for di in range(kh):
            for dj in range(kw):
                xv = xp[:, :, di:di + s * ho:s, dj:dj + s * wo:s]
                dw[:, :, di, dj] = np.einsum("noij,ncij->oc", g, xv,
                                             optimize=True)
                dxp[:, :, di:di + s * ho:s, dj:dj + s * wo:s] += np.einsum(
                    "oc,noij->ncij", w.data[:, :, di, dj], g, optimize=True)
        w._accum(dw)
        if b is not None:
            b._accum(g.sum(axis=(0, 2, 3)))
        if p:
            x._accum(dxp[:, :, p:-p, p:-p])
        else:
            x._accum(dxp)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, _parents=parents, _backward=bw)


def conv_transpose2d(x, w, b=None, stride=2):
    """Non-overlapping transposed conv: kernel size == stride.

    x (N,C,H,W), w (C,O,k,k) -> (N,O,k*H,k*W).
    """
    n, c, h, wd = x.data.shape
    ci, o, kh, kw = w.data.shape
    assert ci == c and kh == kw == stride
    k = stride
    out = np.zeros((n, o, h * k, wd * k), dtype=x.data.dtype)
    for di in range(k):
        for dj in range(k):
            out[:, :, di::k, dj::k] = np.einsum(
                "co,ncij->noij", w.data[:, :, di, dj], x.data, optimize=True)
    if b is not None:
        out += b.data.reshape(1, o, 1, 1)

    def bw(g):
        dx = np.zeros_like(x.data)
        dw = np.zeros_like(w.data)
        for di in range(k):
            for dj in range(k):
                gv = g[:, :, di::k, dj::k]
                dx += np.einsum("co,noij->ncij", w.data[:, :, di, dj], gv,
                                optimize=True)
                dw[:, :, di, dj] = np.einsum("ncij,noij->co", x.data, gv,
                                             optimize=True)
        x._accum(dx)
        w._accum(dw)
        if b is not None:
            b._accum(g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, _parents=parents, _backward=bw)


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr=0.003, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.05):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {id(p): {"m": np.zeros_like(p.data),
                              "v": np.zeros_like(p.data),
                              "t": 0} for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        b1, b2 = self.betas
        for p in self.params:
            if p.grad is None:
                continue
            st = self.state[id(p)]
            st["t"] += 1
            st["m"] = b1 * st["m"] + (1 - b1) * p.grad
            st["v"] = b2 * st["v"] + (1 - b2) * p.grad ** 2
            mh = st["m"] / (1 - b1 ** st["t"])
            vh = st["v"] / (1 - b2 ** st["t"])
            p.data -= self.lr * (mh / (np.sqrt(vh) + self.eps)
                                 + self.weight_decay * p.data)
