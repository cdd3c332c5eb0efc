"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable function in this module records its parents and a local
backward rule on the output tensor. ``Tensor.backward`` walks the recorded
graph in reverse topological order and accumulates gradients into leaves.
Arrays are numpy, row-major, and all reductions take explicit axes.
"""

from __future__ import annotations

import contextlib
import struct
from collections import OrderedDict

import numpy as np


class ShapeMismatch(ValueError):
    pass


class AxisOutOfRange(IndexError):
    pass


class NotScalar(ValueError):
    pass


class DoubleBackward(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


_grad_enabled = True
_debug = False


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph (inference and finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug(flag: bool) -> None:
    """Enable the NaN/Inf guard on every op output."""
    global _debug
    _debug = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators ---------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- backward ------------------------------------------------------------
    def backward(self, retain_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` leaf.

        The graph is released afterwards unless ``retain_graph`` is set; a
        second call on the same loss raises ``DoubleBackward``.
        """
        if self.data.size != 1:
            raise NotScalar(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise DoubleBackward("graph already consumed; run a new forward pass")
        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if not retain_graph:
            for node in order:
                if node._backward is not None:
                    node._parents = ()
                    node._backward = None
                    node._consumed = True
            self._consumed = True


def _topo_order(root: Tensor) -> list:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _result(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._consumed = False
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def custom_op(data: np.ndarray, parents: tuple, backward, name: str) -> Tensor:
    """Record an op with a hand-written backward returning one grad per parent."""
    return _result(data, tuple(parents), backward, name)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` over broadcast dimensions."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def broadcast_shape(a: tuple, b: tuple) -> tuple:
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        da = a[-i] if i <= len(a) else 1
        db = b[-i] if i <= len(b) else 1
        if da != db and da != 1 and db != 1:
            raise ShapeMismatch(f"cannot broadcast {a} with {b}")
        out.append(max(da, db))
    return tuple(reversed(out))


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------

def binary_op(a, b, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown binary op {kind!r}")


def _binary_prep(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a)
    broadcast_shape(a.shape, b.shape)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_prep(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_prep(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_prep(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_prep(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad / bd, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 1-D operands and broadcast batch dims follow numpy."""
    a, b = _as_pair(a, b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeMismatch("matmul needs operands of rank >= 1")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    ad, bd = a.data, b.data

    def backward(g):
        A = ad[None, :] if ad.ndim == 1 else ad
        B = bd[:, None] if bd.ndim == 1 else bd
        G = g
        if ad.ndim == 1:
            G = np.expand_dims(G, -2)
        if bd.ndim == 1:
            G = np.expand_dims(G, -1)
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(G, np.swapaxes(B, -1, -2))
            ga = unbroadcast(ga, A.shape).reshape(ad.shape)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(A, -1, -2), G)
            gb = unbroadcast(gb, B.shape).reshape(bd.shape)
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def _as_pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a)
    return a, b


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _check_axis(a: Tensor, axis):
    if axis is None:
        return None
    nd = a.ndim
    ax = axis + nd if axis < 0 else axis
    if not 0 <= ax < nd:
        raise AxisOutOfRange(f"axis {axis} out of range for rank {nd}")
    return ax


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    ax = _check_axis(a, axis)
    shape = a.shape

    def backward(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(a.data, axis=ax, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _check_axis(a, axis)
    n = a.data.size if ax is None else a.shape[ax]
    shape = a.shape

    def backward(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _result(np.mean(a.data, axis=ax, keepdims=keepdims), (a,), backward, "mean")


def max_index(a: Tensor, axis: int = 0) -> np.ndarray:
    """Index of the maximum along ``axis``; first occurrence wins ties.

    Not differentiable, so the result is a plain integer array.
    """
    ax = _check_axis(a, axis)
    return np.argmax(a.data, axis=ax)


def reduce(a: Tensor, axis: int, kind: str):
    if kind == "sum":
        return sum(a, axis)
    if kind == "mean":
        return mean(a, axis)
    if kind == "max_index":
        return max_index(a, axis)
    raise ValueError(f"unknown reduction {kind!r}")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return _result(y, (a,), lambda g: (g / x,), "log")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.logaddexp(0.0, x).astype(x.dtype, copy=False)
    # derivative is sigmoid(x)
    s = np.exp(x - y)
    return _result(y, (a,), lambda g: (g * s,), "softplus")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = _check_axis(a, axis)
    z = a.data - np.max(a.data, axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=ax, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=ax, keepdims=True)),)

    return _result(y, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = _check_axis(a, axis)
    z = a.data - np.max(a.data, axis=ax, keepdims=True)
    y = z - np.log(np.sum(np.exp(z), axis=ax, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * np.sum(g, axis=ax, keepdims=True),)

    return _result(y, (a,), backward, "log_softmax")


_ACTIVATIONS = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "log": log,
    "exp": exp,
    "softplus": softplus,
}


def activation(a: Tensor, kind: str, axis: int = -1) -> Tensor:
    if kind == "softmax":
        return softmax(a, axis)
    if kind == "log_softmax":
        return log_softmax(a, axis)
    try:
        return _ACTIVATIONS[kind](a)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    src = a.shape
    return _result(y, (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeMismatch("concat of zero tensors")
    ax = _check_axis(tensors[0], axis)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeMismatch(f"concat shapes differ off-axis: {ref} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    y = np.concatenate([t.data for t in tensors], axis=ax)

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(y, tuple(tensors), backward, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise ShapeMismatch(f"stack shapes differ: {ref} vs {t.shape}")
    y = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _result(y, tuple(tensors), backward, "stack")


def getitem(a: Tensor, index) -> Tensor:
    """Basic slicing/integer indexing; gradient scatters back into the slice."""
    try:
        y = a.data[index]
    except IndexError as exc:
        raise IndexError(str(exc)) from None
    shape, dt = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dt)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(y, copy=True), (a,), backward, "getitem")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather rows along ``axis`` (repeats allowed); scatter-add on backward."""
    ax = _check_axis(a, axis)
    idx = np.asarray(indices, dtype=np.int64)
    n = a.shape[ax]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"index out of range for axis of size {n}")
    if idx.ndim > 1:
        raise ShapeMismatch("take expects a scalar or 1-D index array")
    y = np.take(a.data, idx, axis=ax)
    shape, dt = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dt)
        moved = np.moveaxis(full, ax, 0)
        if idx.ndim == 0:
            np.add.at(moved, idx[None], np.moveaxis(np.expand_dims(g, ax), ax, 0))
        else:
            np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (full,)

    return _result(y, (a,), backward, "take")


def reshape_concat_slice(a, spec: dict) -> Tensor:
    """Dispatch helper: ``{"reshape": shape}``, ``{"concat": [others], "axis": k}``
    or ``{"slice": index}``."""
    if "reshape" in spec:
        return reshape(a, spec["reshape"])
    if "concat" in spec:
        return concat([a, *spec["concat"]], spec.get("axis", 0))
    if "slice" in spec:
        return getitem(a, spec["slice"])
    raise ValueError(f"bad spec {spec!r}")


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# parameters and checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"RMNC"
CHECKPOINT_VERSION = 1


class ParameterStore:
    """Ordered name -> trainable tensor map with seeded initialization."""

    def __init__(self, seed: int = 0, dtype=np.float64):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def uniform(self, name: str, shape, bound: float) -> Tensor:
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def num_scalars(self) -> int:
        return int(np.sum([p.data.size for p in self._params.values()]))

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        if strict and set(state) != set(self._params):
            missing = sorted(set(self._params) - set(state))
            extra = sorted(set(state) - set(self._params))
            raise CheckpointError(f"parameter names differ; missing={missing[:5]} extra={extra[:5]}")
        for name, arr in state.items():
            if name not in self._params:
                continue
            p = self._params[name]
            if p.shape != tuple(arr.shape):
                raise CheckpointError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = np.asarray(arr, dtype=self.dtype).copy()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(encode_checkpoint(self.state_dict()))

    def load(self, path) -> None:
        with open(path, "rb") as fh:
            self.load_state_dict(decode_checkpoint(fh.read()))


def encode_checkpoint(state: dict) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic; not an RMNC checkpoint")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        out = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 4 * size > len(buf):
                raise CheckpointError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).copy()
            off += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if off != len(buf):
        raise CheckpointError("trailing bytes after last entry")
    return out
