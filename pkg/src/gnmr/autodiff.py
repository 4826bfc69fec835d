"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations are recorded only while a :class:`Tape` is active::

    with Tape() as tape:
        loss = mse_loss(model(x), y)
    backward(loss, tape)

Outside a tape every op is a plain numpy computation, which keeps inference
cheap. A tape is single use; parameter gradients must be cleared with
:func:`zero_grad` between backward passes unless ``accumulate=True`` is
passed explicitly.
"""

import threading

import numpy as np

from . import kernels
from .errors import ConfigError, EmptyInputError, GradientError, NumericalError, ShapeError

__all__ = [
    "Tape",
    "Tensor",
    "add",
    "backward",
    "check_finite",
    "concat",
    "dropout",
    "gru_sequence",
    "leaky_relu",
    "matmul",
    "mse_loss",
    "mul",
    "reshape",
    "scale",
    "sigmoid",
    "softmax",
    "stack",
    "sub",
    "sum",
    "tanh",
    "take",
    "transpose",
    "zero_grad",
]

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tape:
    """Ordered record of executed primitives, consumed by one backward pass."""

    def __init__(self):
        self.ops = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.ops)

    def backward(self, loss, accumulate=False):
        backward(loss, self, accumulate=accumulate)


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-d float64 array that can take part in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _index(self, index)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, inputs, grad_fn):
    tape = _active_tape()
    requires = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires:
        tape.ops.append((out, inputs, grad_fn))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), grad_fn)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), grad_fn)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), grad_fn)


def scale(x, factor):
    x = _lift(x)
    factor = float(factor)
    return _record(x.data * factor, (x,), lambda g: (g * factor,))


def sigmoid(x):
    x = _lift(x)
    y = np.exp(-np.logaddexp(0.0, -x.data))
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x):
    x = _lift(x)
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def leaky_relu(x, alpha=0.01):
    x = _lift(x)
    slope = np.where(x.data > 0, 1.0, alpha)
    return _record(x.data * slope, (x,), lambda g: (g * slope,))


def softmax(x):
    """Softmax along the last axis."""
    x = _lift(x)
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (x,), grad_fn)


# -- linear algebra and shape ops --------------------------------------------


def matmul(a, b):
    """Matrix product with numpy ``matmul`` batching rules (operands ≥ 2-d)."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}") from None

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), grad_fn)


def concat(tensors, axis=-1):
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise EmptyInputError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1 :] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1 :]:
            raise ShapeError(f"concat shape mismatch along axis {axis}: {[t.shape for t in tensors]}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), grad_fn)


def stack(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise EmptyInputError("stack needs at least one tensor")
    ax = axis % (tensors[0].ndim + 1)
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors]
    return concat(expanded, axis=ax)


def _index(x, index):
    x = _lift(x)
    out = x.data[index]

    items = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(i, (np.ndarray, list)) for i in items)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _record(np.array(out, dtype=np.float64), (x,), grad_fn)


def take(x, indices, axis=0):
    """Gather entries along ``axis``; repeated indices accumulate gradient."""
    x = _lift(x)
    ax = axis % x.ndim
    index = (slice(None),) * ax + (np.asarray(indices, dtype=np.intp),)
    return _index(x, index)


def reshape(x, shape):
    x = _lift(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    x = _lift(x)
    inverse = np.argsort(axes)
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def sum(x, axis=None, keepdims=False):
    x = _lift(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), grad_fn)


# -- stochastic / loss ---------------------------------------------------------


def dropout(x, rate, rng, training):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    x = _lift(x)
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record(x.data * mask, (x,), lambda g: (g * mask,))


def mse_loss(pred, target):
    pred, target = _lift(pred), _lift(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    n = pred.size
    if n == 0:
        raise EmptyInputError("mse_loss on an empty batch")
    diff = pred.data - target.data
    value = np.array(np.mean(diff * diff))
    check_finite(value, "loss")

    def grad_fn(g):
        base = g * 2.0 * diff / n
        return base, -base

    return _record(value, (pred, target), grad_fn)


def check_finite(x, name="tensor"):
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values in {name}")


# -- fused recurrence --------------------------------------------------------------


def gru_sequence(x, w, u, b):
    """Run one GRU layer over a batch of sequences from a zero initial state.

    ``x`` is (N, T, D); ``w`` is (D, 3d), ``u`` is (d, 3d), ``b`` is (3d,)
    with gate blocks ordered ``[update | reset | candidate]``. Returns the
    hidden state at every step, shape (N, T, d).
    """
    x, w, u, b = (_lift(t) for t in (x, w, u, b))
    if x.ndim != 3 or w.ndim != 2 or x.shape[2] != w.shape[0]:
        raise ShapeError(f"gru_sequence input {x.shape} incompatible with weights {w.shape}")
    d = u.shape[0]
    if u.shape != (d, 3 * d) or w.shape[1] != 3 * d or b.shape != (3 * d,):
        raise ShapeError(f"gru_sequence weight shapes inconsistent: w={w.shape} u={u.shape} b={b.shape}")
    n, steps, _ = x.shape
    xt = np.ascontiguousarray(x.data.transpose(1, 0, 2))
    xw = np.ascontiguousarray(xt @ w.data + b.data)
    uc = np.ascontiguousarray(u.data)
    h, gates = kernels.gru_forward(xw, uc)

    def grad_fn(g):
        dh = np.ascontiguousarray(np.transpose(g, (1, 0, 2)))
        da = kernels.gru_backward(dh, h, gates, uc)
        flat_da = da.reshape(-1, 3 * d)
        h_prev = np.concatenate([np.zeros((1, n, d)), h[:-1]], axis=0).reshape(-1, d)
        r = gates[:, :, d : 2 * d].reshape(-1, d)
        du = np.empty_like(uc)
        du[:, : 2 * d] = h_prev.T @ flat_da[:, : 2 * d]
        du[:, 2 * d :] = (r * h_prev).T @ flat_da[:, 2 * d :]
        dw = xt.reshape(-1, xt.shape[2]).T @ flat_da
        db = flat_da.sum(axis=0)
        dx = (da @ w.data.T).transpose(1, 0, 2)
        return dx, dw, du, db

    return _record(np.ascontiguousarray(h.transpose(1, 0, 2)), (x, w, u, b), grad_fn)


# -- backward ---------------------------------------------------------------------


def backward(loss, tape, accumulate=False):
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``.

    Leaf tensors that already hold a gradient raise :class:`GradientError`
    unless ``accumulate`` is true, so stale gradients are never silently summed.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise GradientError("this tape was already used for a backward pass")
    check_finite(loss, "loss")
    if not loss.requires_grad:
        raise GradientError("loss was not produced on a tape from grad-requiring inputs")

    grads = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves = {}
    for out, inputs, grad_fn in reversed(tape.ops):
        produced.add(id(out))
        leaves.pop(id(out), None)
        g = grads.pop(id(out), None)
        if g is None:
            continue
        out.grad = g
        for t, gi in zip(inputs, grad_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = gi if key not in grads else grads[key] + gi
            if key not in produced:
                leaves[key] = t

    pending = [(leaves[k], g) for k, g in grads.items() if k in leaves]
    if not accumulate:
        for t, _ in pending:
            if t.grad is not None:
                label = t.name or repr(t)
                raise GradientError(f"{label} already holds a gradient; call zero_grad first")
    for t, g in pending:
        t.grad = np.array(g, dtype=np.float64) if t.grad is None else t.grad + g
    tape.consumed = True


def zero_grad(params):
    for p in params:
        p.grad = None
