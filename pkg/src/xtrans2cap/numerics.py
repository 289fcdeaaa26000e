"""Dense tensors with reverse-mode differentiation on top of numpy.

Every model computation is expressed with the operations in this module.
A forward call records a closure per node; ``Tensor.backward`` walks the
graph in reverse topological order and accumulates gradients.  Training runs
in float32, gradient checks in float64 (see ``grad_check``).
"""
from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass
from typing import BinaryIO, Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5

_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An n-dimensional array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tensor requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and np.isscalar(x):
        return Tensor(np.asarray(x))
    return Tensor(x, dtype=dtype)


def make_op(out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out`` as the result of an operation on ``parents``.

    ``backward(g)`` must return one gradient (or None) per parent.  Custom
    fused operations elsewhere in the package are built with this.
    """
    t = Tensor(out)
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    return t


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    a = as_tensor(a)
    b = as_tensor(b)
    # python scalars follow the tensor operand's precision
    if a.data.ndim == 0 and not a.requires_grad and b.data.dtype != a.data.dtype:
        a = Tensor(a.data.astype(b.data.dtype))
    if b.data.ndim == 0 and not b.requires_grad and a.data.dtype != b.data.dtype:
        b = Tensor(b.data.astype(a.data.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return make_op(out, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return make_op(out, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad * bd
    return make_op(out, (a, b), lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # stable for large |x|
    e = np.exp(-np.abs(xd))
    r = 1.0 / (1.0 + e)
    out = np.where(xd >= 0, r, e * r)
    return make_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_op(xd * xd, (x,), lambda g: (2.0 * g * xd,))


# ------------------------------------------------------------------- linear

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    # weight shared across leading axes: one 2-D GEMM is much faster than a stacked matmul
    flat = ad.ndim > 2 and bd.ndim == 2
    if flat:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(*ad.shape[:-1], bd.shape[-1])
    else:
        out = ad @ bd

    def backward(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_op(out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ------------------------------------------------------------------- shapes

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def index(x: Tensor, idx) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return make_op(x.data[idx], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_op(out, tensors, backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.shape
    out = np.broadcast_to(x.data, shape)
    return make_op(out, (x,), lambda g: (unbroadcast(g, src),))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    shape, dtype = table.shape, table.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return make_op(table.data[ids], (table,), backward)


# --------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return make_op(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis), 1.0 / float(n))


# ------------------------------------------------------------ normalisation

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of an m x n matrix (max-subtracted)."""
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs a feature width of at least 2")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_op(out, (x, gain, bias), backward)


# ------------------------------------------------------------ grad checking

@dataclass
class GradReport:
    """Outcome of comparing reverse-mode gradients with central differences.

    The relative error of an element is ``|analytic - numeric| /
    max(|analytic|, |numeric|, floor)``; the floor keeps elements whose true
    gradient is ~0 from dominating through round-off.
    """

    op_name: str
    max_rel_error: float
    max_abs_error: float
    passed: bool
    message: str = ""


def grad_check(op: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-3,
               tol: float = 1e-3, op_name: str | None = None, seed: int = 0,
               floor: float = 1e-2) -> GradReport:
    """Check ``op`` (a pure function of tensors) against central differences.

    Inputs are promoted to float64.  A non-scalar output is reduced with a
    fixed random projection so that e.g. softmax rows do not sum to a constant.
    """
    name = op_name or getattr(op, "__name__", "op")
    arrays = [np.array(as_tensor(x).data, dtype=np.float64) for x in inputs]
    proj: list[np.ndarray] = []

    def scalar(vals: list[np.ndarray], track: bool):
        ts = [Tensor(v, requires_grad=track) for v in vals]
        out = op(*ts)
        if not proj:
            rng = np.random.default_rng(seed)
            proj.append(rng.uniform(0.5, 1.5, size=out.shape))
        w = proj[0]
        if out.shape != w.shape:
            raise DimensionError(f"{name}: output shape changed between evaluations")
        total = sum(mul(out, Tensor(w)))
        return total, ts

    try:
        total, ts = scalar(arrays, True)
        if not np.isfinite(total.data).all():
            return GradReport(name, np.inf, np.inf, False, "non-finite forward value")
        total.backward()
        max_rel = max_abs = 0.0
        for i, arr in enumerate(arrays):
            analytic = ts[i].grad if ts[i].grad is not None else np.zeros_like(arr)
            numeric = np.zeros_like(arr)
            flat = arr.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                fp = scalar(arrays, False)[0].item()
                flat[j] = orig - eps
                fm = scalar(arrays, False)[0].item()
                flat[j] = orig
                numeric.reshape(-1)[j] = (fp - fm) / (2 * eps)
            if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
                return GradReport(name, np.inf, np.inf, False, f"non-finite gradient for input {i}")
            diff = np.abs(analytic - numeric)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
            max_abs = max(max_abs, float(diff.max(initial=0.0)))
            max_rel = max(max_rel, float((diff / denom).max(initial=0.0)))
    except FloatingPointError as exc:
        return GradReport(name, np.inf, np.inf, False, f"floating point error: {exc}")
    return GradReport(name, max_rel, max_abs, max_rel <= tol)


# ------------------------------------------------------------ serialisation

def write_tensor(fh: BinaryIO, name: str, t) -> None:
    """name length, name, rank, shape, then little-endian float32 data."""
    arr = np.ascontiguousarray(as_tensor(t).data, dtype="<f4")
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_tensor(fh: BinaryIO) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, n).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
    return name, data.astype(np.float32)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise EOFError(f"unexpected end of tensor stream (wanted {n} bytes, got {len(buf)})")
    return buf
