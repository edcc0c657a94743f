"""Dense tensors with tape-based reverse-mode differentiation.

Tensors wrap read-only numpy arrays. Operations are recorded only while a
:class:`GradTape` is active and at least one input is being tracked, so
inference paths pay nothing for the autodiff machinery.

    >>> w = Tensor([1.0, 2.0, 3.0])
    >>> with GradTape() as tape:
    ...     tape.watch(w)
    ...     loss = (w * w).sum()
    >>> tape.gradient(loss, [w])[0]
    array([2., 4., 6.], dtype=float32)
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "NumericsError",
    "ShapeError",
    "NonFiniteError",
    "set_precision",
    "get_dtype",
    "precision",
    "as_tensor",
    "add",
    "mul",
    "matmul",
    "transpose",
    "reshape",
    "slice_",
    "concat",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "softmax",
    "layer_norm",
    "sum_",
    "mean",
    "broadcast_to",
]


class NumericsError(ValueError):
    """Base class for failures raised by tensor primitives."""

    def __init__(self, message: str, primitive: str | None = None):
        super().__init__(message)
        self.primitive = primitive


class ShapeError(NumericsError):
    def __init__(self, primitive: str, *shapes: tuple[int, ...], detail: str = ""):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{primitive}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg, primitive)
        self.shapes = shapes


class NonFiniteError(NumericsError):
    def __init__(self, primitive: str, node: int | None):
        where = f"node #{node}" if node is not None else "untracked node"
        super().__init__(f"{primitive} produced non-finite values at {where}", primitive)
        self.node = node


# --------------------------------------------------------------------------
# precision

_PRECISIONS = {32: np.float32, 64: np.float64}
_dtype: type = np.float32


def set_precision(bits: int) -> None:
    global _dtype
    if bits not in _PRECISIONS:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _dtype = _PRECISIONS[bits]


def get_dtype() -> type:
    return _dtype


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the global floating point precision."""
    previous = 64 if _dtype is np.float64 else 32
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(previous)


# --------------------------------------------------------------------------
# tensors and tape


class Tensor:
    __slots__ = ("data", "name", "__weakref__")

    def __init__(self, data, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _dtype)
        if arr is data and arr.flags.writeable:
            arr = arr.copy()
        arr.flags.writeable = False
        self.data = arr
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        arr.flags.writeable = False
        out.data = arr
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
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __len__(self) -> int:
        return len(self.data)

    # operators (compositions of primitives)
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, exp(mul(log(other), -1.0)))
        return mul(self, 1.0 / np.asarray(other, dtype=_dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)


@dataclass
class _Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _active_tape() -> "GradTape | None":
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of primitive operations for one backward pass.

    Creation order of recorded nodes is a topological order, so the backward
    pass is a single reversed sweep with every node visited once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tracked: dict[int, Tensor] = {}

    def __enter__(self) -> "GradTape":
        if not hasattr(_local, "tapes"):
            _local.tapes = []
        _local.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.remove(self)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if not isinstance(t, Tensor):
                raise TypeError(f"can only watch Tensors, got {type(t).__name__}")
            self._tracked[id(t)] = t

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def _record(self, op, out, inputs, backward) -> None:
        self.nodes.append(_Node(op, out, inputs, backward))
        self._tracked[id(out)] = out

    def gradient(self, target: Tensor, sources: Iterable[Tensor]) -> list[np.ndarray]:
        sources = list(sources)
        if target.size != 1:
            raise NumericsError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or id(inp) not in self._tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else np.asarray(g, dtype=s.data.dtype))
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = _active_tape()
    record = tape is not None and any(tape.is_tracked(t) for t in inputs)
    if not np.isfinite(data).all():
        raise NonFiniteError(op, len(tape.nodes) if record else None)
    out = Tensor._wrap(data)
    if record:
        tape._record(op, out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return _emit("add", data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    return _emit(
        "mul",
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + (b.shape[-1],))
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions differ")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dimensions") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", data, (a, b), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 1, -1, -1)) if a.ndim != 2 else (1, 0)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"invalid axes {axes}")
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    src = a.shape
    return _emit("reshape", data, (a,), lambda g: (g.reshape(src),))


def slice_(a, idx) -> Tensor:
    a = as_tensor(a)
    if not isinstance(idx, tuple):
        idx = (idx,)
    for item in idx:
        if not (isinstance(item, (int, np.integer, slice)) or item is Ellipsis or item is None):
            raise NumericsError("slice: only basic indexing is supported", "slice")
    try:
        data = a.data[idx]
    except IndexError as err:
        raise ShapeError("slice", a.shape, detail=str(err)) from None

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _emit("slice", np.array(data), (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise NumericsError("concat: no tensors given", "concat")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit("concat", data, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _emit("exp", data, (a,), lambda g: (g * data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _emit("log", data, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        data = np.sqrt(a.data)
    return _emit("sqrt", data, (a,), lambda g: (g * 0.5 / data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)
    return _emit("tanh", data, (a,), lambda g: (g * (1.0 - data * data),))


def softmax(a) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    a = as_tensor(a)
    if a.size == 0 or a.ndim == 0:
        raise ShapeError("softmax", a.shape, detail="empty tensor")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (data * (g - (g * data).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", data, (a,), backward)


def layer_norm(a, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply optional gain and bias."""
    a = as_tensor(a)
    n = a.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    inputs = [a]
    data = xhat
    if gamma is not None:
        gamma = as_tensor(gamma)
        if gamma.shape != (n,):
            raise ShapeError("layer_norm", a.shape, gamma.shape, detail="gain")
        data = data * gamma.data
        inputs.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        if beta.shape != (n,):
            raise ShapeError("layer_norm", a.shape, beta.shape, detail="bias")
        data = data + beta.data
        inputs.append(beta)
    data = data.astype(a.data.dtype, copy=False)
    lead = tuple(range(a.ndim - 1))

    def backward(g):
        dxhat = g * gamma.data if gamma is not None else g
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        out = [dx]
        if gamma is not None:
            out.append((g * xhat).sum(axis=lead))
        if beta is not None:
            out.append(g.sum(axis=lead))
        return out

    return _emit("layer_norm", data, tuple(inputs), backward)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    data = np.asarray(a.data.sum(axis=axes, keepdims=keepdims))
    src = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _emit("sum", data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    data = np.asarray(a.data.mean(axis=axes, keepdims=keepdims))
    src = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, src).copy(),)

    return _emit("mean", data, (a,), backward)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast", a.shape, tuple(shape)) from None
    src = a.shape
    return _emit("broadcast", np.array(data), (a,), lambda g: (_unbroadcast(g, src),))
