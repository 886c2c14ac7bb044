"""Dense float64 arithmetic with a dynamic reverse-mode tape.

Every operation takes ``Tensor`` (or plain array) inputs and returns a
``Tensor``. When gradients are enabled and at least one input requires
them, the result remembers its parents and a closure mapping the output
gradient to input gradients. ``backward`` walks that graph in reverse
topological order and accumulates into ``Parameter.grad``.

Arrays are n-dimensional so a whole mini-batch flows through one graph;
the 2-D "matrix" operations below broadcast over leading batch axes.

Non-differentiable intermediates (routing masks, stop-gradient values)
pass through ``freeze``. Inside ``recording_frozen()`` those values are
captured, and inside ``replaying_frozen(record)`` the captured values are
substituted, so a finite-difference probe evaluates exactly the function
the tape differentiates.
"""

import contextlib
import math

import numpy as np

from .errors import ContractError, DimensionError

DTYPE = np.float64

_grad_enabled = True
_frozen = None


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class FrozenRecord:
    def __init__(self):
        self.values = []
        self.replaying = False
        self.cursor = 0


@contextlib.contextmanager
def recording_frozen():
    global _frozen
    prev = _frozen
    rec = FrozenRecord()
    _frozen = rec
    try:
        yield rec
    finally:
        _frozen = prev


@contextlib.contextmanager
def replaying_frozen(rec):
    global _frozen
    prev = _frozen
    rec.replaying = True
    rec.cursor = 0
    _frozen = rec
    try:
        yield rec
    finally:
        rec.replaying = False
        _frozen = prev


def freeze(value):
    """Pass a non-differentiable array through the record/replay hook."""
    if _frozen is None:
        return value
    if _frozen.replaying:
        out = _frozen.values[_frozen.cursor]
        _frozen.cursor += 1
        return out
    _frozen.values.append(np.array(value, copy=True))
    return value


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "requires_grad")

    # keep numpy from hijacking reflected operators
    __array_priority__ = 100

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


class Parameter(Tensor):
    """Trainable leaf holding its gradient and Adam moments."""

    __slots__ = ("grad", "m", "v", "step", "name", "frozen_rows")

    def __init__(self, data, name=None, frozen_rows=()):
        super().__init__(np.array(data, dtype=DTYPE, copy=True), requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0
        self.name = name
        self.frozen_rows = tuple(frozen_rows)

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, parents, backward_fn, True)
    return Tensor(data)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def stop_gradient(x):
    """Detached copy; routed through ``freeze`` so probes hold it fixed."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)
    return Tensor(freeze(data))


# ----------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _node(out, (x,), lambda g: (g * 0.5 / out,))


def square(x):
    x = as_tensor(x)
    xd = x.data
    return _node(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x):
    x = as_tensor(x)
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ez = np.exp(xd[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh-approximated GELU (smooth, so finite differences stay clean)."""
    x = as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd * xd * xd)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _node(out, (x,), back)


def maximum(x, floor):
    """Elementwise max with a constant; gradient flows where x wins."""
    x = as_tensor(x)
    keep = x.data >= floor
    return _node(np.where(keep, x.data, floor), (x,), lambda g: (g * keep,))


def clip(x, lo, hi):
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ------------------------------------------------------------------ reductions


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), back)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


# --------------------------------------------------------------------- shaping


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x):
    x = as_tensor(x)
    return _node(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def index(x, idx):
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.data[idx], (x,), back)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _node(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), back)


# --------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product over the last two axes, broadcasting batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # stacked rows times one weight matrix: a single 2-D GEMM
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])

        def back2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _node((a2 @ bd).reshape(lead + (bd.shape[1],)), (a, b), back2)

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(ad @ bd, (a, b), back)


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), back)


def softmax_rows(m):
    """Row-wise softmax with per-row max subtraction."""
    return softmax(m, axis=-1)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def back(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), back)


MASKED_LOGIT = -1e30


def scaled_dot_attention(Q, K, V, key_mask=None):
    """softmax(Q Kᵀ / √d) V; ``key_mask`` (True = attend) hides padded keys."""
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise DimensionError(
            f"attention: incompatible Q {Q.shape}, K {K.shape}, V {V.shape}")
    logits = matmul(Q, swap_last(K)) * (1.0 / math.sqrt(Q.shape[-1]))
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, MASKED_LOGIT)
        logits = logits + np.expand_dims(bias, -2)
    return matmul(softmax(logits, axis=-1), V)


def layer_norm(x, gain, bias, eps=1e-5):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = xd.shape[-1]

    def back(g):
        dxhat = g * gain.data
        dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return (dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape))

    return _node(xhat * gain.data + bias.data, (x, gain, bias), back)


# -------------------------------------------------------------------- backward


def backward(loss):
    """Accumulate d(loss)/d(value) into every reachable Parameter's grad."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ContractError(f"backward needs a scalar loss, got {shape}")
    if not loss.requires_grad:
        return

    order = []
    seen = set()
    stack_ = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ------------------------------------------------------------------- modules


class Module:
    """Parameter container; attribute order fixes declaration order."""

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            yield from _walk(val, prefix + name)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def _walk(val, name):
    if isinstance(val, Parameter):
        yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(item, f"{name}.{i}")


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, scale=None):
        scale = math.sqrt(1.0 / n_in) if scale is None else scale
        self.weight = Parameter(rng.normal(0.0, scale, (n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x):
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias)


# ------------------------------------------------------------------ optimizer


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update. Gradients are left for the caller to zero."""
    for p in params:
        g = p.grad
        if p.frozen_rows:
            g = g.copy()
            g[list(p.frozen_rows)] = 0.0
        p.step += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ------------------------------------------------------------------------ RNG


class Rng:
    """Seeded stream: Philox-4x64 counter-based bit generator.

    Keys beyond the seed (purpose tag, example index, ...) are mixed in
    through ``numpy.random.SeedSequence`` so independent sub-streams never
    depend on evaluation order. Normal deviates use numpy's ziggurat.
    """

    def __init__(self, seed, *key):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.key])
        self.gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *key):
        return Rng(self.seed, *self.key, *key)

    def normal(self, loc, scale, size):
        return self.gen.normal(loc, scale, size)

    def standard_normal(self, size):
        return self.gen.standard_normal(size)

    def integers(self, low, high, size=None):
        return self.gen.integers(low, high, size=size)

    def random(self, size=None):
        return self.gen.random(size)

    def permutation(self, n):
        return self.gen.permutation(n)


def gaussian(rng, rows, cols):
    """i.i.d. N(0, 1) matrix from the seeded stream."""
    return Tensor(rng.standard_normal((rows, cols)))
