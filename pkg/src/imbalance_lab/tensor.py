"""Dense float64 arrays with reverse-mode autodiff and a plain SGD optimizer.

Every ``Value`` keeps the closure that pushes its gradient back to the
operands that produced it.  ``backward`` topologically sorts the graph and
resets all gradients before propagating, so two calls never accumulate.
"""

from __future__ import annotations

import logging
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

# floor used by guarded logs inside loss code paths
LOG_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite or exploding quantity."""

    def __init__(self, message: str, t: Optional[int] = None):
        super().__init__(message)
        self.t = t


class Value:
    """A dense float64 array that participates in reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    # make ndarray <op> Value dispatch to the reflected Value operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents: Tuple["Value", ...] = (), op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return vsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _make(data: np.ndarray, parents: Sequence[Value], op: str, backward) -> Value:
    req = any(p.requires_grad for p in parents)
    out = Value(data, requires_grad=req, _parents=tuple(parents) if req else (), op=op)
    if req:
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Value, b: Value, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


def _accum(v: Value, g: np.ndarray, fresh: bool = False) -> None:
    # first contribution is stored directly; ``fresh`` marks a buffer nobody else holds
    if not v.requires_grad:
        return
    g = _unbroadcast(g, v.shape)
    if v.grad is None:
        v.grad = g if fresh and g.flags.writeable else np.array(g, dtype=np.float64)
    else:
        v.grad += g


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), "mul", backward)


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), "matmul", backward)


def relu(x) -> Value:
    x = as_value(x)
    mask = x.data > 0

    def backward(g):
        _accum(x, g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), "relu", backward)


def sigmoid(x) -> Value:
    x = as_value(x)
    # split by sign so exp never overflows
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        _accum(x, g * out * (1.0 - out))

    return _make(out, (x,), "sigmoid", backward)


def log(x, floor: Optional[float] = None) -> Value:
    """Natural log; with ``floor`` set, evaluates ``log(max(x, floor))``.

    Entries clamped by the floor receive zero gradient.
    """
    x = as_value(x)
    if floor is None:
        safe = x.data
        active = None
    else:
        active = x.data > floor
        safe = np.where(active, x.data, floor)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(safe)

    def backward(g):
        gx = g / safe
        if active is not None:
            gx = np.where(active, gx, 0.0)
        _accum(x, gx)

    return _make(out, (x,), "log", backward)


def vabs(x) -> Value:
    x = as_value(x)

    def backward(g):
        _accum(x, g * np.sign(x.data))

    return _make(np.abs(x.data), (x,), "abs", backward)


def power(x, exponent: float) -> Value:
    x = as_value(x)
    if isinstance(exponent, Value) or np.ndim(exponent) != 0:
        raise ShapeError("power: exponent must be a python scalar")
    exponent = float(exponent)

    def backward(g):
        if exponent == 0.0:
            return
        _accum(x, g * exponent * x.data ** (exponent - 1.0))

    return _make(x.data ** exponent, (x,), f"pow{exponent:g}", backward)


def exp(x) -> Value:
    x = as_value(x)
    out = np.exp(x.data)

    def backward(g):
        _accum(x, g * out)

    return _make(out, (x,), "exp", backward)


def vsum(x, axis=None) -> Value:
    x = as_value(x)

    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape).copy())
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return _make(x.data.sum(axis=axis), (x,), "sum", backward)


def mean(x, axis=None) -> Value:
    x = as_value(x)
    n = x.data.size if axis is None else x.shape[axis]
    if n == 0:
        raise ShapeError("mean over an empty axis")
    return mul(vsum(x, axis), 1.0 / n)


def reshape(x, shape: Sequence[int]) -> Value:
    x = as_value(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc

    def backward(g):
        _accum(x, g.reshape(x.shape))

    return _make(out, (x,), "reshape", backward)


def transpose(x, axes: Sequence[int]) -> Value:
    x = as_value(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, g.transpose(inverse))

    return _make(x.data.transpose(axes), (x,), "transpose", backward)


def take(x, indices, axis: int = 0) -> Value:
    """Gather ``indices`` along ``axis``; repeated indices accumulate."""
    x = as_value(x)
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g):
        if not x.requires_grad:
            return
        full = np.zeros_like(x.data)
        np.add.at(full, (slice(None),) * axis + (idx,), g)
        _accum(x, full, fresh=True)

    return _make(np.take(x.data, idx, axis=axis), (x,), "take", backward)


def concat(values: Sequence[Value], axis: int = 0) -> Value:
    vals = [as_value(v) for v in values]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def backward(g):
        for v, part in zip(vals, np.split(g, sizes, axis=axis)):
            _accum(v, part)

    return _make(np.concatenate([v.data for v in vals], axis=axis), vals, "concat", backward)


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # channel-major columns [Cin*k*k, B*Ho*Wo]; the copy is contiguous per shift
    b, cin = xp.shape[:2]
    cols = np.empty((cin, k, k, b, ho, wo))
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    return cols.reshape(cin * k * k, b * ho * wo)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Value:
    """2-D cross-correlation, NCHW input, [Cout, Cin, k, k] weight.

    Only stride 1 or 2 and zero padding are supported.
    """
    x, weight = as_value(x), as_value(weight)
    bias = as_value(bias) if bias is not None else None
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    b, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin or k != k2:
        raise ShapeError(f"conv2d: weight {weight.shape} does not fit input {x.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {k} too large for input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols  # [Cout, B*Ho*Wo]
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(cout, b, ho, wo).transpose(1, 0, 2, 3)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, b * ho * wo)
        if weight.requires_grad:
            _accum(weight, np.dot(g2, cols.T).reshape(weight.shape), fresh=True)
        if bias is not None and bias.requires_grad:
            _accum(bias, g2.sum(axis=1), fresh=True)
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(cin, k, k, b, ho, wo)
            dxp = np.zeros((cin, b) + xp.shape[2:])
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[:, i, j]
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            _accum(x, dxp.transpose(1, 0, 2, 3), fresh=True)

    return _make(out, parents, "conv2d", backward)


def stop_gradient(v) -> Value:
    """Same data, cut from the graph: nothing upstream receives gradient through it."""
    v = as_value(v)
    return Value(v.data.copy(), requires_grad=False, op="stop_gradient")


def _topo(root: Value):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Value) -> None:
    """Populate ``grad`` on every requires_grad Value reachable from scalar ``root``.

    Gradients are reset at the start of every call.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    order = _topo(root)
    for node in order:
        node.grad = None
    if not root.requires_grad:
        return
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        # a node no gradient reached contributes nothing upstream
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node.requires_grad and node.grad is None:
            node.grad = np.zeros_like(node.data)


class ParamStore:
    """Named trainable parameters, learning rate and iteration counter."""

    def __init__(self, params: Dict[str, np.ndarray], learning_rate: float, t: int = 0):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.params: Dict[str, Value] = {
            name: Value(np.array(arr, dtype=np.float64), requires_grad=True) for name, arr in params.items()
        }
        self._shapes = {name: v.shape for name, v in self.params.items()}
        self.learning_rate = float(learning_rate)
        self.t = int(t)

    def __getitem__(self, name: str) -> Value:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def names(self) -> Iterable[str]:
        return self.params.keys()

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: v.data for name, v in self.params.items()}

    def set(self, name: str, array: np.ndarray) -> None:
        array = np.asarray(array, dtype=np.float64)
        if array.shape != self._shapes[name]:
            raise ShapeError(f"parameter {name!r} has fixed shape {self._shapes[name]}, got {array.shape}")
        self.params[name] = Value(array.copy(), requires_grad=True)

    def clone(self) -> "ParamStore":
        return ParamStore(self.arrays(), self.learning_rate, self.t)

    def grads(self) -> Dict[str, Optional[np.ndarray]]:
        return {name: v.grad for name, v in self.params.items()}


def sgd_step(store: ParamStore, grads: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Theta <- Theta - lr * dL/dTheta, then t += 1.

    Raises DivergenceError (leaving the store untouched) when any gradient is
    missing or non-finite.
    """
    if grads is None:
        grads = store.grads()
    for name in store.names():
        g = grads.get(name)
        if g is None:
            raise DivergenceError(f"no gradient for parameter {name!r}", t=store.t)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}", t=store.t)
    for name in list(store.names()):
        store.set(name, store[name].data - store.learning_rate * grads[name])
    store.t += 1
