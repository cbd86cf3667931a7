"""Dense f64 tensors with reverse-mode automatic differentiation.

Tensors wrap numpy arrays. While a Graph is active (``with Graph() as g:``),
every operation involving a tensor that requires grad is recorded on the
tape; ``backward(loss)`` then replays the tape in reverse insertion order
and accumulates gradients into ``.grad`` buffers. With no active graph all
operations are plain numpy (inference mode).

Everything is float64; this is a desk-scale library tuned for tight
gradient checks, not throughput.
"""

import numpy as np

_ACTIVE_GRAPH = None


class GraphError(RuntimeError):
    pass


class _Node:
    __slots__ = ("out", "backward_fn")

    def __init__(self, out, backward_fn):
        self.out = out
        self.backward_fn = backward_fn


class Graph:
    """Append-only tape of recorded operations.

    Topological order equals insertion order: an op's inputs are always
    recorded (or are leaves) before its output. One graph per training
    step; never share a graph across concurrent steps.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _ACTIVE_GRAPH
        if _ACTIVE_GRAPH is not None:
            raise GraphError("nested graphs are not supported")
        _ACTIVE_GRAPH = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_GRAPH
        _ACTIVE_GRAPH = None
        return False


def active_graph():
    return _ACTIVE_GRAPH


def _record(out, backward_fn):
    if _ACTIVE_GRAPH is not None and out.requires_grad:
        _ACTIVE_GRAPH.nodes.append(_Node(out, backward_fn))


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


class Tensor:
    # keep numpy scalars from absorbing us into object arrays
    __array_ufunc__ = None

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __float__(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def detach(self):
        """A view of the same data outside the tape."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- scalar comparisons (values only, no gradient) ----------------------
    def __lt__(self, other):
        return float(self) < float(other)

    def __le__(self, other):
        return float(self) <= float(other)

    def __gt__(self, other):
        return float(self) > float(other)

    def __ge__(self, other):
        return float(self) >= float(other)

    # -- arithmetic ---------------------------------------------------------
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

    def __getitem__(self, key):
        return take(self, key)

    # -- convenience method forms -------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def sin(self):
        return sin(self)

    def cos(self):
        return cos(self)

    def sigmoid(self):
        return sigmoid(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, fwd, da_fn, db_fn):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(fwd(a.data, b.data), a.requires_grad or b.requires_grad)

    def backward():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(da_fn(g, a.data, b.data), a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(db_fn(g, a.data, b.data), b.shape))

    _record(out, backward)
    return out


def add(a, b):
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary(a, b, np.divide,
                   lambda g, x, y: g / y,
                   lambda g, x, y: -g * x / (y * y))


def maximum(a, b):
    """Elementwise max; ties route the gradient to the first operand."""
    return _binary(a, b, np.maximum,
                   lambda g, x, y: g * (x >= y),
                   lambda g, x, y: g * (x < y))


def minimum(a, b):
    return _binary(a, b, np.minimum,
                   lambda g, x, y: g * (x <= y),
                   lambda g, x, y: g * (x > y))


def _unary(a, fwd, grad_fn):
    a = as_tensor(a)
    out = Tensor(fwd(a.data), a.requires_grad)

    def backward():
        if a.requires_grad:
            a.accumulate_grad(grad_fn(out.grad, a.data, out.data))

    _record(out, backward)
    return out


def exp(a):
    return _unary(a, np.exp, lambda g, x, y: g * y)


def log(a):
    return _unary(a, np.log, lambda g, x, y: g / x)


def sqrt(a):
    return _unary(a, np.sqrt, lambda g, x, y: g / (2.0 * y))


def tanh(a):
    return _unary(a, np.tanh, lambda g, x, y: g * (1.0 - y * y))


def sin(a):
    return _unary(a, np.sin, lambda g, x, y: g * np.cos(x))


def cos(a):
    return _unary(a, np.cos, lambda g, x, y: -g * np.sin(x))


def sigmoid(a):
    return _unary(a, lambda x: 1.0 / (1.0 + np.exp(-x)),
                  lambda g, x, y: g * y * (1.0 - y))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a):
    """Exact (erf-based) GELU; the smooth nonlinearity used in feed-forward blocks."""
    from scipy.special import erf  # local import keeps numpy-only paths light

    def fwd(x):
        return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))

    def grad_fn(g, x, y):
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return g * (cdf + x * pdf)

    return _unary(a, fwd, grad_fn)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data), a.requires_grad or b.requires_grad)

    def backward():
        g = out.grad
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    _record(out, backward)
    return out


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), a.requires_grad)

    def backward():
        if a.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(g, a.shape).copy())

    _record(out, backward)
    return out


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), a.requires_grad)

    def backward():
        if a.requires_grad:
            a.accumulate_grad(out.grad.reshape(a.shape))

    _record(out, backward)
    return out


def transpose(a, axes=None):
    a = as_tensor(a)
    out = Tensor(np.transpose(a.data, axes), a.requires_grad)

    def backward():
        if a.requires_grad:
            inv = None if axes is None else np.argsort(axes)
            a.accumulate_grad(np.transpose(out.grad, inv))

    _record(out, backward)
    return out


def take(a, key):
    """Basic or integer-array indexing with gradient scatter-add."""
    a = as_tensor(a)
    if isinstance(key, list):
        key = np.asarray(key, dtype=np.intp)
    out = Tensor(a.data[key], a.requires_grad)

    def backward():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, key, out.grad)
            a.accumulate_grad(g)

    _record(out, backward)
    return out


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 any(t.requires_grad for t in tensors))

    def backward():
        sizes = [t.shape[axis] for t in tensors]
        pieces = np.split(out.grad, np.cumsum(sizes)[:-1], axis=axis)
        for t, p in zip(tensors, pieces):
            if t.requires_grad:
                t.accumulate_grad(p)

    _record(out, backward)
    return out


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis),
                 any(t.requires_grad for t in tensors))

    def backward():
        pieces = np.split(out.grad, len(tensors), axis=axis)
        for t, p in zip(tensors, pieces):
            if t.requires_grad:
                t.accumulate_grad(p.reshape(t.shape))

    _record(out, backward)
    return out


# -- structured ops ---------------------------------------------------------

class MaskError(ValueError):
    """A softmax row with no allowed key: a mask-construction bug upstream."""


def masked_softmax(logits, allow):
    """Row softmax over allowed keys only.

    ``allow`` is a boolean array broadcastable to ``logits``; disallowed
    entries come out bit-exact zero. Row-max stabilization uses allowed
    entries only, so masked positions never pollute the max.
    """
    logits = as_tensor(logits)
    allow = np.broadcast_to(np.asarray(allow, dtype=bool), logits.shape)
    if not allow.any(axis=-1).all():
        raise MaskError("softmax row with every key disallowed")
    neg = np.where(allow, logits.data, -np.inf)
    m = neg.max(axis=-1, keepdims=True)
    e = np.where(allow, np.exp(logits.data - m), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p, logits.requires_grad)

    def backward():
        if logits.requires_grad:
            g = out.grad
            dot = (g * p).sum(axis=-1, keepdims=True)
            logits.accumulate_grad(p * (g - dot))

    _record(out, backward)
    return out


def layer_norm(x, gain, bias, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data,
                 x.requires_grad or gain.requires_grad or bias.requires_grad)

    def backward():
        g = out.grad
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            term = gh - gh.mean(axis=-1, keepdims=True) \
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(term * inv)

    _record(out, backward)
    return out


def conv2d(x, kernels, bias):
    """3x3 same-padding cross-correlation.

    x: [c_in,h,w] or [batch,c_in,h,w]; kernels: [c_out,c_in,3,3].
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    b, c_in, h, w = xd.shape
    c_out, kc, kh, kw = kernels.shape
    if kc != c_in:
        raise ValueError(f"conv2d channel mismatch: input {c_in}, kernels {kc}")
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # cols: [b, h, w, c_in, kh, kw] -> [b*h*w, c_in*kh*kw]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c_in * kh * kw)
    kmat = kernels.data.reshape(c_out, -1)
    y = (cols @ kmat.T + bias.data).reshape(b, h, w, c_out).transpose(0, 3, 1, 2)
    out = Tensor(y[0] if squeeze else y,
                 x.requires_grad or kernels.requires_grad or bias.requires_grad)

    def backward():
        g = out.grad
        gd = g[None] if squeeze else g
        gcols = gd.transpose(0, 2, 3, 1).reshape(b * h * w, c_out)
        if bias.requires_grad:
            bias.accumulate_grad(gcols.sum(axis=0))
        if kernels.requires_grad:
            kernels.accumulate_grad((gcols.T @ cols).reshape(kernels.shape))
        if x.requires_grad:
            dcols = (gcols @ kmat).reshape(b, h, w, c_in, kh, kw)
            dxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    dxp[:, :, di:di + h, dj:dj + w] += \
                        dcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
            dx = dxp[:, :, 1:-1, 1:-1]
            x.accumulate_grad(dx[0] if squeeze else dx)

    _record(out, backward)
    return out


# -- losses -----------------------------------------------------------------

def smooth_l1(pred, target, beta=1.0, weights=None):
    """Mean smooth-L1; optional per-element weights (weighted mean)."""
    pred, target = as_tensor(pred), as_tensor(target)
    d = pred.data - target.data
    ad = np.abs(d)
    per = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    if weights is None:
        w = np.ones_like(per)
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), per.shape)
    wsum = w.sum()
    if wsum == 0.0:
        raise ValueError("smooth_l1 with all-zero weights")
    out = Tensor((per * w).sum() / wsum, pred.requires_grad or target.requires_grad)

    def backward():
        g = out.grad
        dd = np.where(ad < beta, d / beta, np.sign(d)) * w / wsum * g
        if pred.requires_grad:
            pred.accumulate_grad(_unbroadcast(dd, pred.shape))
        if target.requires_grad:
            target.accumulate_grad(_unbroadcast(-dd, target.shape))

    _record(out, backward)
    return out


def cross_entropy(logits, classes):
    """Mean negative log-likelihood from raw logits.

    logits: [N,C] (or [C] for a single item); classes: int array [N].
    """
    logits = as_tensor(logits)
    ld = logits.data if logits.ndim == 2 else logits.data[None]
    idx = np.atleast_1d(np.asarray(classes, dtype=np.intp))
    n, c = ld.shape
    m = ld.max(axis=1, keepdims=True)
    e = np.exp(ld - m)
    p = e / e.sum(axis=1, keepdims=True)
    nll = -(ld[np.arange(n), idx] - m[:, 0] - np.log(e.sum(axis=1)))
    out = Tensor(nll.mean(), logits.requires_grad)

    def backward():
        if logits.requires_grad:
            g = p.copy()
            g[np.arange(n), idx] -= 1.0
            g *= out.grad / n
            logits.accumulate_grad(g if logits.ndim == 2 else g[0])

    _record(out, backward)
    return out


def dice_loss(probs, targets, smooth=1.0):
    """1 - Dice coefficient over per-point foreground probabilities."""
    probs = as_tensor(probs)
    if probs.size == 0:
        raise ValueError("dice_loss over zero points")
    t = np.asarray(targets, dtype=np.float64)
    inter = tsum(mul(probs, t))
    denom = add(tsum(probs), float(t.sum()))
    return sub(1.0, div(add(mul(inter, 2.0), smooth), add(denom, smooth)))


# -- backward ---------------------------------------------------------------

def backward(loss):
    """Populate .grad of everything reachable from a scalar loss."""
    if _ACTIVE_GRAPH is None:
        raise GraphError("backward called with no active graph")
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ValueError("backward expects a scalar Tensor loss")
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(_ACTIVE_GRAPH.nodes):
        if node.out.grad is not None:
            node.backward_fn()
