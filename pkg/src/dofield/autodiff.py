"""A small dense-tensor reverse-mode autodiff engine with an Adam optimizer.

Operations record themselves on the active :class:`Tape` whenever one of
their inputs requires a gradient. Outside a tape they just compute. Use::

    with Tape() as tape:
        loss = mean(mul(err, err))
    tape.backward(loss)

Calling ``backward`` accumulates into the ``grad`` buffers of leaf tensors;
call :meth:`Tensor.zero_grad` (or build fresh leaves) between steps.

Broadcasting is limited to one case: an operand whose shape equals the
other operand's shape without its leading (batch) axis, or a scalar.
"""

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

_state = {"dtype": np.float32}
_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the working float type (``float32`` or ``float64``)."""
    dt = np.dtype(dtype).type
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    old = _state["dtype"]
    _state["dtype"] = dt
    try:
        yield
    finally:
        _state["dtype"] = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=_state["dtype"])
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: object


@dataclass
class Tape:
    """Ordered log of operations; inputs always precede the outputs using them."""

    records: list = field(default_factory=list)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def backward(self, loss):
        """Populate ``grad`` on every leaf reachable from the scalar ``loss``."""
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        produced = {id(r.out) for r in self.records}
        grads = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.dtype != t.data.dtype:
                    gi = gi.astype(t.data.dtype)
                if id(t) in produced:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
                elif t.grad is None:
                    t.grad = np.array(gi, copy=True)
                else:
                    t.grad += gi
        if id(loss) not in produced and loss.grad is None:
            loss.grad = np.ones_like(loss.data)


def backward(loss):
    """Run backward on the tape that produced ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._tape is None:
        if loss.requires_grad and loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        return
    loss._tape.backward(loss)


def record(out_data, inputs, backward_fn):
    """Wrap ``out_data`` as a Tensor and log it on the active tape if needed.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    This is the hook for fused operations defined outside this module.
    """
    out = Tensor(out_data)
    tapes = _tape_stack()
    if tapes and any(t.requires_grad for t in inputs):
        tape = tapes[-1]
        out.requires_grad = True
        out._tape = tape
        tape.records.append(_Record(out, tuple(inputs), backward_fn))
    return out


def _check_broadcast(name, a, b):
    if a.shape == b.shape or b.ndim == 0 or a.ndim == 0:
        return
    if a.ndim == b.ndim + 1 and a.shape[1:] == b.shape:
        return
    if b.ndim == a.ndim + 1 and b.shape[1:] == a.shape:
        return
    raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.sum(axis=0)


# --- primitives -------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return record(ad @ bd, (a, b), bw)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return record(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, b.shape) if b.requires_grad else None)

    return record(ad * bd, (a, b), bw)


def neg(a):
    a = as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,))


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return record(out, (a,), lambda g: (g * (a.data > 0),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return record(out, (a,), lambda g: (g * out * (1.0 - out),))


def concat(tensors, axis=-1):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or t.shape[:ax] != ts[0].shape[:ax] or t.shape[ax + 1:] != ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return record(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), bw)


def slice_(a, index):
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {a.shape}") from exc
    if not np.shares_memory(out, a.data) and out.size:
        raise ShapeError("slice: only basic slicing is supported")

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return record(np.array(out), (a,), bw)


def take_rows(a, index):
    """Gather rows ``a[index]``; the backward pass sums gradients of repeated rows."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[0])):
        raise ShapeError(f"take_rows: bad index for shape {a.shape}")

    def bw(g):
        n = a.shape[0]
        if n <= 64:
            onehot = np.zeros((n, idx.shape[0]), dtype=g.dtype)
            onehot[idx, np.arange(idx.shape[0])] = 1
            return (onehot @ g.reshape(g.shape[0], -1)).reshape(a.shape),
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return record(a.data[idx], (a,), bw)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from exc
    return record(out, (a,), lambda g: (g.reshape(a.shape),))


def sum_(a, axis=None):
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return record(out, (a,), bw)


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)

    def bw(g):
        g = g / n
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.data.dtype),)

    return record(out, (a,), bw)


def _extreme(a, axis, pick):
    a = as_tensor(a)
    if a.data.size == 0:
        raise ShapeError(f"{pick.__name__}: empty input")
    flat_axis = axis is None
    data = a.data.reshape(-1) if flat_axis else a.data
    ax = 0 if flat_axis else axis
    arg = pick(data, axis=ax)  # first occurrence on ties
    vals = np.take_along_axis(data, np.expand_dims(arg, ax), axis=ax).squeeze(ax)

    def bw(g):
        full = np.zeros_like(data)
        np.put_along_axis(full, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (full.reshape(a.shape),)

    return record(vals, (a,), bw), arg


def min_(a, axis=None):
    """Minimum and its index; ties resolve to the lowest index."""
    return _extreme(a, axis, np.argmin)


def max_(a, axis=None):
    """Maximum and its index; ties resolve to the lowest index."""
    return _extreme(a, axis, np.argmax)


def cumsum(a, axis=-1):
    a = as_tensor(a)
    out = np.cumsum(a.data, axis=axis)

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return record(out, (a,), bw)


# --- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 4e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state):
    """One bias-corrected Adam update of ``params`` (dict of arrays) in place.

    Parameters missing from ``grads`` (or with a None gradient) are treated
    as having zero gradient: their moments still decay.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient for {name} has shape {g.shape}, param {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return params
