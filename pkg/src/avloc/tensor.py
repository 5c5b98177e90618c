"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. Outside a tape nothing is recorded, which
keeps finite-difference evaluations cheap.

Backward rules live in ``BACKWARD_RULES`` and are looked up when the tape is
replayed, so a rule can be swapped out (see :func:`corrupted_backward`) to
check that the gradient checker notices.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "DimensionError",
    "NonFiniteError",
    "BACKWARD_RULES",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "clip",
    "softmax",
    "logsumexp",
    "sum",
    "mean",
    "max",
    "reduce",
    "elementwise",
    "reshape",
    "swapaxes",
    "concat",
    "stack",
    "index",
    "set_checked",
    "corrupted_backward",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(ValueError):
    """Raised when a NaN or Inf shows up where finite values are required."""


_CHECKED = True


def set_checked(flag: bool) -> bool:
    """Toggle NaN/Inf rejection for user-constructed tensors; returns old value."""
    global _CHECKED
    old, _CHECKED = _CHECKED, bool(flag)
    return old


class Tensor:
    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if _CHECKED and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = False
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a python scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x: Any) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


# --------------------------------------------------------------------- tape


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: dict = field(default_factory=dict)


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tape:
    """Records operations in execution order for one backward pass.

    Usage::

        with Tape() as tape:
            loss = f(w)
        (gw,) = tape.gradient(loss, [w])
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed: Any = None) -> list[np.ndarray]:
        """Return d target / d source for each source (zeros if unreachable)."""
        if seed is None:
            if target.size != 1:
                raise DimensionError(f"gradient target must be scalar without a seed, got {target.shape}")
            seed = np.ones_like(target.data)
        grads: dict[int, np.ndarray] = {id(target): np.asarray(seed, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            rule = BACKWARD_RULES[node.op]
            in_grads = rule(g, node)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _record(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], **ctx) -> Tensor:
    result = Tensor._wrap(out)
    stack = _tape_stack()
    if stack and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        stack[-1].nodes.append(Node(op, inputs, result, ctx))
    return result


BACKWARD_RULES: dict[str, Callable[[np.ndarray, Node], tuple]] = {}


def _rule(name: str):
    def deco(fn):
        BACKWARD_RULES[name] = fn
        return fn

    return deco


@contextlib.contextmanager
def corrupted_backward(op: str, factor: float = 1.5):
    """Temporarily scale the backward rule of ``op`` by ``factor``.

    Fault injection for negative-control gradient checks.
    """
    original = BACKWARD_RULES[op]

    def broken(g, node):
        return tuple(None if gi is None else gi * factor for gi in original(g, node))

    BACKWARD_RULES[op] = broken
    try:
        yield
    finally:
        BACKWARD_RULES[op] = original


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _record("add", a.data + b.data, (a, b))


@_rule("add")
def _add_bw(g, node):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _record("sub", a.data - b.data, (a, b))


@_rule("sub")
def _sub_bw(g, node):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def mul(a, b) -> Tensor:
    """Elementwise product. A vector broadcasts over the matching matrix axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim == 2 and a.shape[0] == b.shape[0] != b.shape[1]:
        # d-vector against a d x S matrix: repeat along the column axis
        a = reshape(a, (a.shape[0], 1))
    elif b.ndim == 1 and a.ndim == 2 and b.shape[0] == a.shape[0] != a.shape[1]:
        b = reshape(b, (b.shape[0], 1))
    _check_broadcast("mul", a, b)
    return _record("mul", a.data * b.data, (a, b))


@_rule("mul")
def _mul_bw(g, node):
    a, b = node.inputs
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _record("scale", a.data * c, (a,), c=float(c))


@_rule("scale")
def _scale_bw(g, node):
    return (g * node.ctx["c"],)


def neg(a) -> Tensor:
    return scale(a, -1.0)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    A 1-D left operand is treated as a single row and a 1-D right operand as a
    single column, with the added axis dropped from the result.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim >= 2 and a.shape[0] == b.shape[-2]:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1 and a.ndim >= 2 and b.shape[0] == a.shape[-1]:
        out = matmul(a, reshape(b, (b.shape[0], 1)))
        return reshape(out, out.shape[:-1])
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    return _record("matmul", out, (a, b))


@_rule("matmul")
def _matmul_bw(g, node):
    a, b = node.inputs
    ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
    gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
    return (
        None if ga is None else _unbroadcast(ga, a.shape),
        None if gb is None else _unbroadcast(gb, b.shape),
    )


# ------------------------------------------------------------ nonlinearity


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    return _record("sigmoid", _sigmoid_np(a.data), (a,))


@_rule("sigmoid")
def _sigmoid_bw(g, node):
    s = node.output.data
    return (g * s * (1.0 - s),)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    return _record("tanh", np.tanh(a.data), (a,))


@_rule("tanh")
def _tanh_bw(g, node):
    t = node.output.data
    return (g * (1.0 - t * t),)


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _record("relu", np.maximum(a.data, 0.0), (a,))


@_rule("relu")
def _relu_bw(g, node):
    return (g * (node.inputs[0].data > 0),)


def exp(a) -> Tensor:
    a = as_tensor(a)
    return _record("exp", np.exp(a.data), (a,))


@_rule("exp")
def _exp_bw(g, node):
    return (g * node.output.data,)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record("log", np.log(a.data), (a,))


@_rule("log")
def _log_bw(g, node):
    return (g / node.inputs[0].data,)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    return _record("clip", np.clip(a.data, lo, hi), (a,), lo=lo, hi=hi)


@_rule("clip")
def _clip_bw(g, node):
    x = node.inputs[0].data
    return (g * ((x >= node.ctx["lo"]) & (x <= node.ctx["hi"])),)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise IndexError(f"axis {axis} out of bounds for shape {x.shape}")
    return axis % x.ndim


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return _record("softmax", e / e.sum(axis=axis, keepdims=True), (a,), axis=axis)


@_rule("softmax")
def _softmax_bw(g, node):
    p = node.output.data
    axis = node.ctx["axis"]
    return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)


def logsumexp(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """log(sum(exp(a))) along ``axis``; entries where ``mask`` is False are left out."""
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("logsumexp: every slice needs at least one unmasked entry")
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(np.log(s) + m, axis=axis)
    return _record("logsumexp", out, (a,), axis=axis, p=e / s)


@_rule("logsumexp")
def _logsumexp_bw(g, node):
    axis = node.ctx["axis"]
    return (np.expand_dims(g, axis) * node.ctx["p"],)


# --------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    if axis is not None:
        axis = _check_axis(a, axis)
    return _record("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), axis=axis, keepdims=keepdims)


@_rule("sum")
def _sum_bw(g, node):
    (a,) = node.inputs
    axis = node.ctx["axis"]
    if axis is not None and not node.ctx["keepdims"]:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is not None:
        axis = _check_axis(a, axis)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    return _record("mean", out, (a,), axis=axis, keepdims=keepdims)


@_rule("mean")
def _mean_bw(g, node):
    (a,) = node.inputs
    axis = node.ctx["axis"]
    n = a.size if axis is None else a.shape[axis]
    if axis is not None and not node.ctx["keepdims"]:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, a.shape).copy(),)


def max(a, axis: int) -> tuple[Tensor, np.ndarray]:  # noqa: A001
    """Max along ``axis``. Returns (values, argmax); ties go to the lowest index."""
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    idx = np.argmax(a.data, axis=axis)
    vals = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    out = _record("max", np.squeeze(vals, axis=axis), (a,), axis=axis, idx=idx)
    return out, idx


@_rule("max")
def _max_bw(g, node):
    (a,) = node.inputs
    axis = node.ctx["axis"]
    ga = np.zeros_like(a.data)
    np.put_along_axis(ga, np.expand_dims(node.ctx["idx"], axis), np.expand_dims(g, axis), axis=axis)
    return (ga,)


def reduce(op: str, x, axis: int):
    if op == "mean":
        return mean(x, axis=axis)
    if op == "sum":
        return sum(x, axis=axis)
    if op in ("max", "max_with_argmax"):
        return max(x, axis=axis)
    raise ValueError(f"unknown reduction {op!r}")


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "exp": exp, "log": log, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *args, **kwargs) -> Tensor:
    if op in _UNARY:
        return _UNARY[op](*args)
    if op in _BINARY:
        return _BINARY[op](*args)
    if op == "scale":
        return scale(*args, **kwargs)
    raise ValueError(f"unknown elementwise op {op!r}")


# ------------------------------------------------------------------- shape


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record("reshape", a.data.reshape(shape), (a,))


@_rule("reshape")
def _reshape_bw(g, node):
    return (g.reshape(node.inputs[0].shape),)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _record("swapaxes", np.swapaxes(a.data, ax1, ax2), (a,), ax1=ax1, ax2=ax2)


@_rule("swapaxes")
def _swapaxes_bw(g, node):
    return (np.swapaxes(g, node.ctx["ax1"], node.ctx["ax2"]),)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    sizes = [t.shape[axis] for t in ts]
    return _record("concat", out, ts, axis=axis, splits=np.cumsum(sizes)[:-1])


@_rule("concat")
def _concat_bw(g, node):
    return tuple(np.split(g, node.ctx["splits"], axis=node.ctx["axis"]))


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"stack: incompatible shapes {[t.shape for t in ts]}") from None
    return _record("stack", out, ts, axis=axis)


@_rule("stack")
def _stack_bw(g, node):
    axis = node.ctx["axis"]
    return tuple(np.take(g, i, axis=axis) for i in range(g.shape[axis]))


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    return _record("index", np.array(a.data[idx]), (a,), idx=idx)


@_rule("index")
def _index_bw(g, node):
    ga = np.zeros_like(node.inputs[0].data)
    np.add.at(ga, node.ctx["idx"], g)
    return (ga,)
