"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive treats the last axis as "columns" and the second-to-last as
"rows"; leading axes are batch axes and broadcast where noted.  Gradients are
only recorded when at least one operand requires grad and recording is
enabled (see :func:`no_grad`).
"""

from __future__ import annotations

import contextlib
import warnings

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class DegenerateInputWarning(UserWarning):
    pass


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {where}")


class Tensor:
    """A float64 array plus the bookkeeping needed for backward."""

    __slots__ = ("data", "requires_grad", "grad", "_record", "__weakref__")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        _check_finite(arr, "tensor construction")
        if not requires_grad:
            arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._record = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._record is None

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return elementwise_mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Record:
    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind, inputs, output, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Tape of operation records in creation (hence topological) order.

    Use as a context manager to give a training step its own graph::

        with Graph():
            loss = ...
            grads = backward(loss)
    """

    def __init__(self):
        self.records = []

    def __len__(self):
        return len(self.records)

    def clear(self):
        self.records.clear()

    def __enter__(self):
        _state.graphs.append(self)
        return self

    def __exit__(self, *exc):
        _state.graphs.pop()
        self.clear()
        return False


class _State:
    def __init__(self):
        self.graphs = [Graph()]
        self.grad_enabled = True


_state = _State()


def active_graph():
    return _state.graphs[-1]


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _make(kind, out_data, inputs, backward_fn):
    _check_finite(out_data, kind)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._record = None
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        rec = Record(kind, inputs, out, backward_fn)
        out._record = rec
        active_graph().records.append(rec)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind, *shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {[list(s) for s in shapes]} do not broadcast") from None


# ---------------------------------------------------------------- primitives


def matmul(a, b):
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {list(a.shape)} and {list(b.shape)} do not conform")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), back)


def add(a, b):
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def scalar_mul(a, s):
    s = float(s)
    return _make("scalar_mul", a.data * s, (a,), lambda g: (g * s,))


def elementwise_mul(a, b):
    _broadcast_shape("elementwise_mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make("elementwise_mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def concat_rows(*ts):
    """Concatenate along the row axis; leading batch axes broadcast."""
    if not ts:
        raise ShapeError("concat_rows: no operands")
    if any(t.ndim < 2 for t in ts) or len({t.shape[-1] for t in ts}) != 1:
        raise ShapeError(f"concat_rows: incompatible shapes {[list(t.shape) for t in ts]}")
    lead = _broadcast_shape("concat_rows", *(t.shape[:-2] for t in ts))
    parts = [np.broadcast_to(t.data, lead + t.shape[-2:]) for t in ts]
    sizes = [t.shape[-2] for t in ts]
    shapes = [t.shape for t in ts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(_unbroadcast(g[..., bounds[i]:bounds[i + 1], :], shapes[i])
                     for i in range(len(ts)))

    return _make("concat_rows", np.concatenate(parts, axis=-2), tuple(ts), back)


def slice_rows(a, start, stop):
    n = a.shape[-2] if a.ndim >= 2 else 0
    if a.ndim < 2 or not (0 <= start < stop <= n):
        raise ShapeError(f"slice_rows: [{start}:{stop}] invalid for shape {list(a.shape)}")
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[..., start:stop, :] = g
        return (full,)

    return _make("slice_rows", a.data[..., start:stop, :].copy(), (a,), back)


def layer_norm(a, eps=1e-5):
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make("layer_norm", xhat, (a,), back)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    # tanh approximation
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(u)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return _make("gelu", 0.5 * x * (1.0 + th), (a,), back)


def softmax_rows(a):
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)
    return _make("softmax_rows", s, (a,),
                 lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log(a):
    x = a.data
    if np.any(x <= 0):
        raise NonFiniteError("log: non-positive input")
    return _make("log", np.log(x), (a,), lambda g: (g / x,))


def exp(a):
    with np.errstate(over="ignore"):  # overflow is reported as NonFiniteError by _make
        y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * y,))


def abs(a):  # noqa: A001 - mirrors the primitive name
    x = a.data
    return _make("abs", np.abs(x), (a,), lambda g: (g * np.sign(x),))


def clamp_min(a, floor):
    x = a.data
    mask = x > floor
    return _make("clamp_min", np.where(mask, x, floor), (a,), lambda g: (g * mask,))


def sum(a, axis=None, keepdims=False):  # noqa: A001
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.atleast_1d(out), (a,), back)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.shape[axis]
    return scalar_mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def l2_normalize_rows(a):
    """Scale each last-axis vector to unit norm; all-zero vectors pass through."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    zero = norm == 0.0
    if np.any(zero):
        warnings.warn("l2_normalize_rows: all-zero row left unnormalised",
                      DegenerateInputWarning, stacklevel=2)
    safe = np.where(zero, 1.0, norm)
    y = x / safe

    def back(g):
        proj = np.where(zero, 0.0, (g * y).sum(axis=-1, keepdims=True))
        return ((g - y * proj) / safe,)

    return _make("l2_normalize_rows", y, (a,), back)


def transpose(a):
    if a.ndim < 2:
        raise ShapeError(f"transpose: needs at least 2 axes, got {list(a.shape)}")
    return _make("transpose", np.swapaxes(a.data, -1, -2).copy(), (a,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def permute(a, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {list(a.shape)}")
    inv = tuple(np.argsort(axes))
    return _make("permute", np.transpose(a.data, axes).copy(), (a,),
                 lambda g: (np.transpose(g, inv),))


def reshape(a, shape):
    shape = tuple(shape)
    old = a.shape
    try:
        out = a.data.reshape(shape).copy()
    except ValueError:
        raise ShapeError(f"reshape: cannot view {list(old)} as {list(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(old),))


PRIMITIVES = {
    "matmul": matmul, "add": add, "sub": sub, "scalar_mul": scalar_mul,
    "elementwise_mul": elementwise_mul, "concat_rows": concat_rows,
    "slice_rows": slice_rows, "layer_norm": layer_norm, "gelu": gelu,
    "softmax_rows": softmax_rows, "log": log, "exp": exp, "abs": abs,
    "sum": sum, "mean": mean, "l2_normalize_rows": l2_normalize_rows,
    "transpose": transpose, "permute": permute, "reshape": reshape,
    "clamp_min": clamp_min,
}


def primitive_forward(kind, *operands, **kwargs):
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*operands, **kwargs)


# ---------------------------------------------------------------- backward


def backward(loss, params=None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` and return ``{leaf: grad}``.

    The returned map covers every requires-grad leaf on the graph plus any
    tensors passed in ``params``; leaves the loss does not depend on get
    exact zeros.  The graph that produced ``loss`` is cleared afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {list(loss.shape)}")

    graph = active_graph()
    grads = {}
    leaves = {}
    if loss._record is not None:
        grads[id(loss)] = np.ones_like(loss.data)
        for rec in reversed(graph.records):
            g = grads.pop(id(rec.output), None)
            for t in rec.inputs:
                if t.requires_grad and t._record is None:
                    leaves[id(t)] = t
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward_fn(g)):
                if not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    for t in params or ():
        if not t.requires_grad:
            raise ValueError(f"backward: {t!r} does not require grad")
        leaves[id(t)] = t
    graph.clear()

    out = {}
    for key, t in leaves.items():
        g = grads.get(key)
        g = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
        t.grad = g if t.grad is None else t.grad + g
        out[t] = g
    return out


def sgd_step(params, grads, learning_rate):
    """Plain SGD: ``p <- p - lr * grad`` in place, then clear ``p.grad``."""
    if not learning_rate > 0:
        raise ValueError(f"learning rate must be positive, got {learning_rate}")
    for p in params:
        if isinstance(grads, dict):
            if p not in grads:
                raise KeyError(f"no gradient for parameter {p!r}")
            g = grads[p]
        else:
            g = grads[params.index(p)]
        if g is None:
            raise KeyError(f"no gradient for parameter {p!r}")
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {list(g.shape)} != parameter shape {list(p.shape)}")
        new = p.data - learning_rate * g
        _check_finite(new, "sgd_step")
        p.data = new
        p.grad = None
    return params


def finite_difference_check(scalar_fn, params, step=1e-5):
    """Max over coordinates of |analytic - central| / max(1, |central|).

    ``scalar_fn()`` must rebuild its computation from the current values of
    ``params`` every call.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    params = list(params)
    with Graph():
        loss = scalar_fn()
        analytic = backward(loss, params=params)
    for p in params:
        p.grad = None

    def value():
        with no_grad():
            v = scalar_fn().item()
        if not np.isfinite(v):
            raise NonFiniteError("finite_difference_check: non-finite evaluation")
        return v

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        ga = analytic[p].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = value()
            flat[i] = orig - step
            down = value()
            flat[i] = orig
            central = (up - down) / (2 * step)
            worst = max(worst, float(np.abs(ga[i] - central) / max(1.0, np.abs(central))))
    return worst
