"""Small float64 tensor library with a dynamic reverse-mode tape.

Operations only record themselves while a :class:`Tape` is active, so
inference during rollouts runs as plain numpy. Arrays of rank 2 are the
common case; a leading batch axis is accepted by the elementwise ops and
by :func:`matmul` so that a whole minibatch of observations can be pushed
through the attention encoder at once.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int]

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A float64 array that can take part in gradient computation."""

    __slots__ = ("data", "name", "requires_grad", "_tracked")

    def __init__(self, data, name: Optional[str] = None, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.name = name
        self.requires_grad = requires_grad
        self._tracked = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))


def parameter(data, name: str) -> Tensor:
    return Tensor(data, name=name, requires_grad=True)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Records differentiable operations in execution order.

    Use as a context manager; nested tapes are not supported and each
    thread has its own active tape.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        if getattr(_local, "tape", None) is not None:
            raise RuntimeError("a Tape is already active on this thread")
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = None


def _active_tape() -> Optional[Tape]:
    return getattr(_local, "tape", None)


def _record(op: str, inputs: tuple, out_data: np.ndarray, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.name = None
    out.requires_grad = False
    out._tracked = False
    tape = _active_tape()
    if tape is not None and any(t._tracked for t in inputs):
        out._tracked = True
        tape.nodes.append(Node(op, inputs, out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op} received non-finite input")


# ---------------------------------------------------------------------------
# operations


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product, batched over leading axes with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record("matmul", (a, b), ad @ bd, backward)


def _binary(op: str, a: ArrayLike, b: ArrayLike):
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot combine {a.shape} and {b.shape}") from exc
    return a, b


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def tanh_elem(m: ArrayLike) -> Tensor:
    m = as_tensor(m)
    y = np.tanh(m.data)
    return _record("tanh", (m,), y, lambda g: (g * (1.0 - y * y),))


def exp(m: ArrayLike) -> Tensor:
    m = as_tensor(m)
    y = np.exp(m.data)
    return _record("exp", (m,), y, lambda g: (g * y,))


def square(m: ArrayLike) -> Tensor:
    m = as_tensor(m)
    x = m.data
    return _record("square", (m,), x * x, lambda g: (2.0 * g * x,))


def softmax_rows(m: ArrayLike) -> Tensor:
    """Softmax over the last axis, with the row maximum subtracted first."""
    m = as_tensor(m)
    _check_finite(m.data, "softmax_rows")
    z = m.data - m.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (m,), y, backward)


def log_softmax_rows(m: ArrayLike) -> Tensor:
    m = as_tensor(m)
    _check_finite(m.data, "log_softmax_rows")
    z = m.data - m.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", (m,), y, backward)


def sum_(m: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    m = as_tensor(m)
    shape = m.shape
    out = np.asarray(m.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (m,), out, backward)


def mean(m: ArrayLike, axis=None) -> Tensor:
    m = as_tensor(m)
    count = m.size if axis is None else m.shape[axis]
    return mul(sum_(m, axis=axis), 1.0 / count)


def reshape(m: ArrayLike, shape: tuple) -> Tensor:
    m = as_tensor(m)
    old = m.shape
    return _record("reshape", (m,), m.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(m: ArrayLike) -> Tensor:
    """Swap the last two axes."""
    m = as_tensor(m)
    return _record("transpose", (m,), np.swapaxes(m.data, -1, -2),
                   lambda g: (np.swapaxes(g, -1, -2),))


def concat(parts: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", parts, np.concatenate([p.data for p in parts], axis=axis), backward)


def clip(m: ArrayLike, lo: ArrayLike, hi: ArrayLike) -> Tensor:
    """Elementwise clip; the gradient is zero wherever the bound is active."""
    m = as_tensor(m)
    lo_d = lo.data if isinstance(lo, Tensor) else np.asarray(lo, dtype=np.float64)
    hi_d = hi.data if isinstance(hi, Tensor) else np.asarray(hi, dtype=np.float64)
    x = m.data
    inside = (x > lo_d) & (x < hi_d)
    return _record("clip", (m,), np.clip(x, lo_d, hi_d), lambda g: (g * inside,))


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise minimum; ties route the gradient to ``a``."""
    a, b = _binary("minimum", a, b)
    pick_a = a.data <= b.data
    sa, sb = a.shape, b.shape
    return _record("minimum", (a, b), np.where(pick_a, a.data, b.data),
                   lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)))


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise maximum; ties route the gradient to ``a``."""
    a, b = _binary("maximum", a, b)
    pick_a = a.data >= b.data
    sa, sb = a.shape, b.shape
    return _record("maximum", (a, b), np.where(pick_a, a.data, b.data),
                   lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)))


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor]) -> dict:
    """Gradients of a scalar ``loss`` for every tensor in ``params``.

    Returns a dict keyed by parameter name. Parameters the loss does not
    depend on get an explicit zero array.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    params = list(params)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp._tracked:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out = {}
    for p in params:
        g = grads.get(id(p))
        out[p.name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
    return out


def grad(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> tuple:
    """Evaluate ``fn`` under a fresh tape; return (loss value, gradient dict)."""
    with Tape() as tape:
        loss = fn()
    return float(loss.data), backward(tape, loss, params)


def finite_diff_check(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6,
                      floor: float = 1e-3) -> float:
    """Largest per-coordinate relative error between autodiff and central differences.

    ``fn`` must rebuild the loss from the current parameter values each
    call. The relative error of a coordinate is
    ``|auto - numeric| / max(|auto|, |numeric|, floor)``.
    """
    _, auto = grad(fn, params)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        ga = auto[p.name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(fn().data)
            flat[i] = orig - h
            f_minus = float(fn().data)
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * h)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class Adam:
    """Adaptive-moment optimizer with bias correction, updating arrays in place."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: Sequence[Tensor], grads: Mapping[str, np.ndarray]) -> None:
        missing = [p.name for p in params if p.name not in grads]
        if missing:
            raise KeyError(f"no gradient for parameters: {missing}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in params:
            g = grads[p.name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {p.name} has shape {g.shape}, expected {p.shape}")
            m = self.m.get(p.name)
            if m is None:
                m = self.m[p.name] = np.zeros_like(p.data)
                self.v[p.name] = np.zeros_like(p.data)
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(grads: dict, names: Iterable[str], max_norm: float) -> float:
    """Rescale the named gradients in place so their joint L2 norm is at most ``max_norm``."""
    names = list(names)
    total = float(np.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in names)))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for n in names:
            grads[n] = grads[n] * scale
    return total


# ---------------------------------------------------------------------------
# snapshots

MAGIC = b"MRLP"
VERSION = 1


def save_snapshot(path: Union[str, Path], params: Mapping[str, ArrayLike]) -> None:
    """Write named arrays in the MRLP binary layout (little-endian)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, value in params.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_snapshot(path: Union[str, Path]) -> dict:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not an MRLP snapshot")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    pos = 8
    out = {}
    while pos < len(blob):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * count
    return out
