"""Define-by-run reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive as a node holding its value, its
parent node ids and an adjoint rule. Nodes only ever reference earlier
nodes, so the reverse sweep is a plain walk backwards over the list.

Values are float64 arrays of any fixed shape; a leading batch axis is the
common case. Elementwise ops follow numpy broadcasting and adjoints are
summed back down to each operand's shape.

Complex quantities are carried as ``(re, im)`` pairs of real variables, see
:func:`cmatmul` and friends.
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Var:
    __slots__ = ("tape", "id", "value")
    __array_priority__ = 100

    def __init__(self, tape: "Tape", node_id: int, value: np.ndarray):
        self.tape = tape
        self.id = node_id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.value.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        if isinstance(o, Var):
            return mul(self, reciprocal(o))
        return mul(self, 1.0 / np.asarray(o, dtype=float))

    def __rtruediv__(self, o):
        return mul(o, reciprocal(self))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return slice_(self, idx)


class Tape:
    """Append-only record of one forward pass."""

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.parents: list[tuple[int, ...]] = []
        self.rules: list[Callable | None] = []
        self.param_ids: list[int] = []
        self.param_names: list[str] = []
        self.param_offsets: list[int] = []
        self._size = 0

    def __len__(self):
        return len(self.values)

    def _push(self, value, parents=(), rule=None) -> Var:
        nid = len(self.values)
        self.values.append(value)
        self.parents.append(tuple(parents))
        self.rules.append(rule)
        return Var(self, nid, value)

    def param(self, name: str, value) -> Var:
        """Register a trainable leaf; its flat offset is the running total so far."""
        v = np.asarray(value, dtype=float)
        var = self._push(v)
        self.param_ids.append(var.id)
        self.param_names.append(name)
        self.param_offsets.append(self._size)
        self._size += v.size
        return var

    def const(self, value) -> Var:
        return self._push(np.asarray(value, dtype=float))

    @property
    def n_params(self) -> int:
        return self._size

    def backward(self, loss: Var) -> np.ndarray:
        """Gradient of scalar ``loss`` w.r.t. every registered parameter, flattened
        in registration order. Unreachable parameters get exact zeros."""
        if loss.tape is not self:
            raise TapeError("loss belongs to a different tape")
        if loss.value.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.value.shape}")
        grads: list[np.ndarray | None] = [None] * (loss.id + 1)
        grads[loss.id] = np.ones_like(loss.value)
        for nid in range(loss.id, -1, -1):
            g = grads[nid]
            rule = self.rules[nid]
            if g is None or rule is None:
                continue
            pgs = rule(g)
            for pid, pg in zip(self.parents[nid], pgs):
                if pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
        out = np.zeros(self._size)
        for pid, off in zip(self.param_ids, self.param_offsets):
            if pid < len(grads) and grads[pid] is not None:
                g = grads[pid]
                out[off : off + g.size] = g.ravel()
        return out

    def named_grads(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        out = {}
        for name, pid, off in zip(self.param_names, self.param_ids, self.param_offsets):
            shape = self.values[pid].shape
            size = int(np.prod(shape))
            out[name] = flat[off : off + size].reshape(shape)
        return out


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TapeError("no Var among operands")


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise TapeError("operands live on different tapes")
        return x
    return tape.const(x)


def _binary_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from exc


def _folds(numpy_fn):
    """Unary primitives applied to a plain array return the plain numpy result."""

    def wrap(prim):
        def op(a, *args, **kw):
            if not isinstance(a, Var):
                return numpy_fn(np.asarray(a, dtype=float), *args, **kw)
            return prim(a, *args, **kw)

        op.__name__, op.__doc__ = prim.__name__, prim.__doc__
        return op

    return wrap


def add(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _binary_shape(a.value, b.value)
    sa, sb = a.shape, b.shape
    return t._push(a.value + b.value, (a.id, b.id), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _binary_shape(a.value, b.value)
    sa, sb = a.shape, b.shape
    return t._push(a.value - b.value, (a.id, b.id), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _binary_shape(a.value, b.value)
    av, bv = a.value, b.value
    return t._push(av * bv, (a.id, b.id), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


@_folds(lambda a, c: a * float(c))
def scale(a: Var, c: float) -> Var:
    c = float(c)
    return a.tape._push(a.value * c, (a.id,), lambda g: (g * c,))


def matmul(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul shapes {av.shape} @ {bv.shape}")

    def rule(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return t._push(av @ bv, (a.id, b.id), rule)


@_folds(np.tanh)
def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    return a.tape._push(y, (a.id,), lambda g: (g * (1.0 - y * y),))


@_folds(lambda a: 0.5 * (1.0 + np.tanh(0.5 * a)))
def sigmoid(a: Var) -> Var:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return a.tape._push(y, (a.id,), lambda g: (g * y * (1.0 - y),))


@_folds(np.sqrt)
def sqrt(a: Var) -> Var:
    y = np.sqrt(a.value)
    return a.tape._push(y, (a.id,), lambda g: (g * 0.5 / y,))


@_folds(lambda a: 1.0 / a)
def reciprocal(a) -> Var:
    y = 1.0 / a.value
    return a.tape._push(y, (a.id,), lambda g: (-g * y * y,))


@_folds(lambda a: a * a)
def square(a: Var) -> Var:
    x = a.value
    return a.tape._push(x * x, (a.id,), lambda g: (2.0 * g * x,))


def concat(xs: Sequence[Var], axis: int = -1) -> Var:
    t = _tape_of(*xs)
    xs = [_lift(t, x) for x in xs]
    vals = [x.value for x in xs]
    try:
        y = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    ax = axis % y.ndim
    bounds = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=ax))

    return t._push(y, tuple(x.id for x in xs), rule)


@_folds(lambda a, idx: a[idx])
def slice_(a: Var, idx) -> Var:
    """Basic (non-fancy) indexing."""
    shape = a.value.shape
    y = a.value[idx]

    def rule(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return a.tape._push(y, (a.id,), rule)


@_folds(np.reshape)
def reshape(a: Var, shape) -> Var:
    old = a.value.shape
    return a.tape._push(a.value.reshape(shape), (a.id,), lambda g: (g.reshape(old),))


@_folds(lambda a: np.swapaxes(a, -1, -2))
def transpose(a: Var) -> Var:
    """Swap the last two axes."""
    return a.tape._push(np.swapaxes(a.value, -1, -2), (a.id,), lambda g: (np.swapaxes(g, -1, -2),))


@_folds(lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims))
def sum_(a: Var, axis=None, keepdims: bool = False) -> Var:
    shape = a.value.shape
    y = np.sum(a.value, axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape._push(np.asarray(y, dtype=float), (a.id,), rule)


@_folds(lambda a: a)
def stop_gradient(a: Var) -> Var:
    return a.tape.const(a.value.copy())


class TapeOps:
    """Namespace used by model code to build graphs on a tape."""

    add = staticmethod(add)
    sub = staticmethod(sub)
    mul = staticmethod(mul)
    scale = staticmethod(scale)
    matmul = staticmethod(matmul)
    tanh = staticmethod(tanh)
    sigmoid = staticmethod(sigmoid)
    sqrt = staticmethod(sqrt)
    reciprocal = staticmethod(reciprocal)
    square = staticmethod(square)
    concat = staticmethod(concat)
    reshape = staticmethod(reshape)
    transpose = staticmethod(transpose)
    sum = staticmethod(sum_)
    stop_gradient = staticmethod(stop_gradient)

    def __init__(self, tape: Tape | None = None):
        self.tape = tape if tape is not None else Tape()

    def param(self, name, value):
        return self.tape.param(name, value)

    def const(self, value):
        return self.tape.const(value)

    @staticmethod
    def value(x):
        return x.value if isinstance(x, Var) else np.asarray(x)


class NumpyOps:
    """The same namespace over bare arrays: forward-only, no recording."""

    add = staticmethod(np.add)
    sub = staticmethod(np.subtract)
    mul = staticmethod(np.multiply)
    matmul = staticmethod(np.matmul)
    tanh = staticmethod(np.tanh)
    sqrt = staticmethod(np.sqrt)
    concat = staticmethod(np.concatenate)
    reshape = staticmethod(np.reshape)

    @staticmethod
    def scale(a, c):
        return a * float(c)

    @staticmethod
    def sigmoid(a):
        return 0.5 * (1.0 + np.tanh(0.5 * a))

    @staticmethod
    def reciprocal(a):
        return 1.0 / a

    @staticmethod
    def square(a):
        return a * a

    @staticmethod
    def transpose(a):
        return np.swapaxes(a, -1, -2)

    @staticmethod
    def sum(a, axis=None, keepdims=False):
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def stop_gradient(a):
        return a

    @staticmethod
    def param(name, value):
        return np.asarray(value, dtype=float)

    @staticmethod
    def const(value):
        return np.asarray(value, dtype=float)

    @staticmethod
    def value(x):
        return np.asarray(x)


# Complex helpers on (re, im) pairs. They work with either namespace.


def cmatmul(F, ar, ai, br, bi):
    """``(ar + i ai) @ (br + i bi)`` as four real products."""
    re = F.sub(F.matmul(ar, br), F.matmul(ai, bi))
    im = F.add(F.matmul(ar, bi), F.matmul(ai, br))
    return re, im


def cdagger(F, ar, ai):
    return F.transpose(ar), F.scale(F.transpose(ai), -1.0)


class GradCheck(NamedTuple):
    max_rel: float  # worst relative error over components with magnitude > abs_floor
    max_abs: float  # worst absolute error over the remaining small components
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def worst(self) -> float:
        return max(self.max_rel, self.max_abs)

    def ok(self, rel_tol: float, abs_tol: float) -> bool:
        return self.max_rel <= rel_tol and self.max_abs <= abs_tol


def grad_check(f: Callable, params, step: float = 1e-5, abs_floor: float = 1e-4) -> GradCheck:
    """Compare reverse-mode gradients with central differences.

    ``f(F, flat_params)`` builds a scalar with the ops namespace ``F`` and
    registers the parameters itself (``F.param("p", flat_params)``). It is
    called once on a :class:`TapeOps` for the reverse sweep and twice per
    component on :class:`NumpyOps` for the differences.
    """
    params = np.asarray(params, dtype=float)
    F = TapeOps()
    analytic = F.tape.backward(f(F, params))
    numeric = np.zeros(params.size)
    for i in range(params.size):
        p = params.copy()
        p.flat[i] += step
        up = float(np.asarray(f(NumpyOps, p)).ravel()[0])
        p.flat[i] -= 2 * step
        dn = float(np.asarray(f(NumpyOps, p)).ravel()[0])
        numeric[i] = (up - dn) / (2 * step)
    diff = np.abs(analytic - numeric)
    mag = np.maximum(np.abs(analytic), np.abs(numeric))
    big = mag > abs_floor
    max_rel = float((diff[big] / mag[big]).max()) if big.any() else 0.0
    max_abs = float(diff[~big].max()) if (~big).any() else 0.0
    return GradCheck(max_rel, max_abs, analytic, numeric)
