"""Dense tensors with reverse-mode differentiation, built on numpy.

Every primitive records a closure that maps the output gradient to its
inputs' gradients.  Graphs are only recorded when at least one input
requires a gradient and recording is enabled (see :func:`no_grad`).
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Parameter", "ShapeError", "NumericFault",
    "precision", "set_precision", "get_dtype", "no_grad", "is_grad_enabled",
    "as_tensor", "add", "sub", "mul", "scale", "matmul", "linear", "conv2d",
    "layer_norm", "relu", "gelu", "softmax", "masked_softmax", "embedding",
    "mean", "sum", "concat", "stack", "reshape", "transpose", "index",
    "scatter_rows", "log", "clamp_min", "apply", "PRIMITIVES",
    "DEFAULT_PENALTY",
]

DEFAULT_PENALTY = -1e9

_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = {"dtype": np.float32, "grad": True}


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of incompatible shape."""

    def __init__(self, kind: str, shapes: Sequence[tuple], detail: str = ""):
        self.kind = kind
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{kind}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericFault(FloatingPointError):
    """Raised when a computation produces NaN or Inf."""

    def __init__(self, kind: str, detail: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: non-finite value" + (f" ({detail})" if detail else ""))


def get_dtype():
    return _state["dtype"]


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[name]


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the default floating dtype ("float32" or "float64")."""
    prev = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def is_grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _state["dtype"])
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        """Propagate gradients from this tensor to every upstream leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward", [self.shape], "implicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        _accum(self, np.asarray(grad, dtype=self.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if not isinstance(node, Parameter):
                    node.grad = None

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A learnable leaf tensor with a persistent gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if isinstance(t, Parameter):
        t.grad = t.grad + g if t.grad is not None else np.array(g, dtype=t.dtype)
    elif t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _finite(arr: np.ndarray, kind: str) -> None:
    if not np.isfinite(arr).all():
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NumericFault(kind, f"first at index {tuple(int(i) for i in bad)}")


def _make(data: np.ndarray, parents: tuple, backward: Callable, kind: str) -> Tensor:
    _finite(data, kind)
    out = Tensor._wrap(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


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


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, [a.shape, b.shape]) from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.dtype.type(c)

    def backward(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), backward, "scale")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def backward(g):
        _accum(x, g * pos)

    return _make(np.where(pos, x.data, x.dtype.type(0)), (x,), backward, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    d = x.data
    c = d.dtype.type(_GELU_C)
    k = d.dtype.type(0.044715)
    d2 = d * d
    th = np.tanh(c * (d + k * d2 * d))
    out = 0.5 * d * (1 + th)

    def backward(g):
        dinner = c * (1 + 3 * k * d2)
        _accum(x, g * (0.5 * (1 + th) + 0.5 * d * (1 - th * th) * dinner))

    return _make(out, (x,), backward, "gelu")


def log(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accum(x, g / x.data)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), backward, "log")


def clamp_min(x, lo: float) -> Tensor:
    """max(x, lo); the gradient is zero where the clamp is active."""
    x = as_tensor(x)
    keep = x.data >= lo

    def backward(g):
        _accum(x, g * keep)

    return _make(np.where(keep, x.data, x.dtype.type(lo)), (x,), backward, "clamp_min")


# ---------------------------------------------------------------- reductions / shape

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise ShapeError("mean", [x.shape], "empty reduction")

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g / x.dtype.type(count), x.shape))

    return _make(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), backward, "mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", [x.shape, tuple(shape)]) from None

    def backward(g):
        _accum(x, g.reshape(x.shape))

    return _make(out, (x,), backward, "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), backward, "transpose")


def index(x, idx) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    x = as_tensor(x)
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accum(x, full)

    return _make(np.asarray(out), (x,), backward, "index")


def scatter_rows(values, rows: np.ndarray, n: int) -> Tensor:
    """Place ``values[k]`` at row ``rows[k]`` of an all-zero (n, ...) array."""
    values = as_tensor(values)
    rows = np.asarray(rows, dtype=np.int64)
    if rows.ndim != 1 or rows.shape[0] != values.shape[0]:
        raise ShapeError("scatter_rows", [values.shape, rows.shape])
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    out[rows] = values.data

    def backward(g):
        _accum(values, g[rows])

    return _make(out, (values,), backward, "scatter_rows")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", [t.shape for t in ts]) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _make(out, tuple(ts), backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack", [t.shape for t in ts]) from None

    def backward(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                _accum(t, np.take(g, i, axis=axis))

    return _make(out, tuple(ts), backward, "stack")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", [a.shape, b.shape])
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", [a.shape, b.shape]) from None

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is (in, out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear", [x.shape, weight.shape])
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError("linear", [x.shape, weight.shape, bias.shape], "bias")
    x2 = x.data.reshape(-1, weight.shape[0])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    lead = x.shape[:-1]

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        if x.requires_grad:
            _accum(x, (g2 @ weight.data.T).reshape(x.shape))
        if weight.requires_grad:
            _accum(weight, x2.T @ g2)
        if bias is not None and bias.requires_grad:
            _accum(bias, g2.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out.reshape(lead + (weight.shape[1],)), parents, backward, "linear")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on channels-last input.

    ``x`` is (N, H, W, C_in) and ``weight`` is (k, k, C_in, C_out) with a
    square kernel.  Only zero padding and strides 1 or 2 are supported.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if stride not in (1, 2):
        raise ShapeError("conv2d", [x.shape, weight.shape], f"stride {stride} not in (1, 2)")
    if (x.ndim != 4 or weight.ndim != 4 or weight.shape[0] != weight.shape[1]
            or x.shape[3] != weight.shape[2]):
        raise ShapeError("conv2d", [x.shape, weight.shape])
    n, h, w, c = x.shape
    k, _, _, f = weight.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", [x.shape, weight.shape], "kernel larger than padded input")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (f,):
            raise ShapeError("conv2d", [x.shape, weight.shape, bias.shape], "bias")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1

    def window(i, j):
        return xp[:, i : i + hs : stride, j : j + ws : stride, :]

    out = np.zeros((n, ho, wo, f), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            out += window(i, j) @ weight.data[i, j]
    if bias is not None:
        out += bias.data

    def backward(g):
        if weight.requires_grad:
            g2 = g.reshape(-1, f)
            gw = np.empty_like(weight.data)
            for i in range(k):
                for j in range(k):
                    gw[i, j] = window(i, j).reshape(-1, c).T @ g2
            _accum(weight, gw)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.reshape(-1, f).sum(axis=0))
        if x.requires_grad:
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + hs : stride, j : j + ws : stride, :] += g @ weight.data[i, j].T
            _accum(x, dxp[:, padding : padding + h, padding : padding + w, :])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv2d")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", [x.shape, gamma.shape, beta.shape])
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            _accum(x, gx)

    return _make(out, (x, gamma, beta), backward, "layer_norm")


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for integer ids of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding", [table.shape, ids.shape], "needs 2-D table and integer ids")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", [table.shape, ids.shape], "id out of range")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, full)

    return _make(table.data[ids], (table,), backward, "embedding")


# ---------------------------------------------------------------- softmax family

def _softmax_data(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if axis not in (-1, x.ndim - 1):
        raise ShapeError("softmax_last_axis", [x.shape], "only the last axis is supported")
    y = _softmax_data(x.data)

    def backward(g):
        _accum(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (x,), backward, "softmax_last_axis")


def masked_softmax(scores, key_mask, penalty: float = DEFAULT_PENALTY) -> Tensor:
    """Softmax over keys of ``scores * M + penalty * (1 - M)``.

    ``key_mask`` is a 0/1 array broadcastable to ``scores``; typically a
    per-key availability vector broadcast over queries, or a full
    (queries, keys) pattern such as a causal triangle.
    """
    scores = as_tensor(scores)
    m = np.asarray(key_mask)
    try:
        bshape = np.broadcast_shapes(scores.shape, m.shape)
    except ValueError:
        raise ShapeError("masked_softmax", [scores.shape, m.shape]) from None
    if bshape != scores.shape:
        raise ShapeError("masked_softmax", [scores.shape, m.shape], "mask broadcasts beyond scores")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("masked_softmax: mask entries must be 0 or 1")
    if (np.atleast_1d(m).sum(axis=-1) == 0).any():
        raise ValueError("masked_softmax: every key is masked for at least one query")
    m = m.astype(scores.dtype, copy=False)
    pen = scores.dtype.type(penalty)
    z = scores.data * m + pen * (1 - m)
    y = _softmax_data(z)

    def backward(g):
        gz = y * (g - (g * y).sum(axis=-1, keepdims=True))
        _accum(scores, gz * m)

    return _make(y, (scores,), backward, "masked_softmax")


# ---------------------------------------------------------------- dispatch

PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "linear": linear,
    "layer_norm": layer_norm,
    "relu": relu,
    "gelu": gelu,
    "softmax_last_axis": softmax,
    "embedding_lookup": embedding,
    "add": add,
    "scale": scale,
    "mean": mean,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
}


def apply(kind: str, *inputs, **kwargs) -> Tensor:
    """Run the named primitive; see :data:`PRIMITIVES` for the catalogue."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)
