"""Dense reverse-mode differentiation over numpy arrays.

A :class:`Tensor` records the primitive that produced it together with a
closure mapping the output cotangent to input cotangents.  Calling
:meth:`Tensor.backward` on a scalar topologically sorts the recorded graph
(the tape) and visits every node exactly once.

Only the primitives the kriging model needs are provided.  Arithmetic
broadcasts like numpy; gradients are summed back to the operand shape.
"""

from __future__ import annotations

import contextlib
import struct
from collections.abc import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DataError, ShapeError

_DTYPE = [np.dtype(np.float32)]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype of newly created tensors.

    The engine runs in float32; finite-difference checks switch to float64 so
    that round-off does not swamp the difference quotient.
    """
    prev = _DTYPE[0]
    _DTYPE[0] = np.dtype(dtype)
    try:
        yield
    finally:
        _DTYPE[0] = prev


def default_dtype() -> np.dtype:
    return _DTYPE[0]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    # make numpy defer to the reflected operators (ndarray - Tensor -> Tensor.__rsub__)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) and _parents:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=default_dtype())
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._backward = _backward

    # -- bookkeeping -------------------------------------------------------

    @staticmethod
    def _make(data, parents, backward) -> "Tensor":
        if any(p.requires_grad for p in parents):
            return Tensor(data, True, None, tuple(parents), backward)
        return Tensor(data)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- reverse pass ------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor with an empty tape")

        order, seen, stack = [], set(), [(self, False)]
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

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        return Tensor._make(
            a.data + b.data, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        return Tensor._make(
            a.data - b.data, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        )

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __neg__(self):
        a = self
        return Tensor._make(-a.data, (a,), lambda g: (-g,))

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        return Tensor._make(
            a.data * b.data, (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        return Tensor._make(
            a.data / b.data, (a, b),
            lambda g: (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            ),
        )

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __pow__(self, exponent: float):
        a = self
        out = a.data ** exponent
        return Tensor._make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))

    def __matmul__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul needs operands of rank >= 2")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

        if b.ndim == 2 and a.ndim > 2:
            # dense layer on a stack of rows: one flat GEMM each way
            a2 = a.data.reshape(-1, a.shape[-1])
            out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

            def back_flat(g):
                g2 = g.reshape(-1, g.shape[-1])
                ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
                gb = a2.T @ g2 if b.requires_grad else None
                return ga, gb

            return Tensor._make(out, (a, b), back_flat)

        def back(g):
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._make(a.data @ b.data, (a, b), back)

    def __rmatmul__(self, other):
        return _as_tensor(other) @ self

    # -- elementwise nonlinearities ---------------------------------------

    def tanh(self):
        a = self
        y = np.tanh(a.data)
        return Tensor._make(y, (a,), lambda g: (g * (1.0 - y * y),))

    def relu(self):
        a = self
        on = a.data > 0
        return Tensor._make(a.data * on, (a,), lambda g: (g * on,))

    def sigmoid(self):
        a = self
        x = a.data
        # split by sign so exp never overflows
        e = np.exp(-np.abs(x))
        y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
        return Tensor._make(y, (a,), lambda g: (g * y * (1.0 - y),))

    def abs(self):
        a = self
        s = np.sign(a.data)
        return Tensor._make(np.abs(a.data), (a,), lambda g: (g * s,))

    # -- reductions and structure -----------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(np.asarray(out, dtype=a.data.dtype), (a,), back)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes):
        a = self
        if not axes:
            axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))

    def __getitem__(self, idx):
        a = self

        def back(g):
            full = np.zeros_like(a.data)
            if _is_basic_index(idx):
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(a.data[idx], (a,), back)


# -- free functions ---------------------------------------------------------

def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=default_dtype()), requires_grad=True, name=name)


def matmul(a, b) -> Tensor:
    return _as_tensor(a) @ _as_tensor(b)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return Tensor._make(out, tuple(ts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def where(cond, a, b) -> Tensor:
    """Masked select: ``a`` where ``cond`` holds, else ``b``.  ``cond`` is constant."""
    cond = np.asarray(cond, dtype=bool)
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor._make(
        np.where(cond, a.data, b.data), (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0), a.shape),
                   _unbroadcast(np.where(cond, 0, g), b.shape)),
    )


def inv_sqrt(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Elementwise x^(-1/2), defined as 0 where x <= eps."""
    x = _as_tensor(x)
    live = x.data > eps
    safe = np.where(live, x.data, 1.0)
    y = np.where(live, safe ** -0.5, 0.0).astype(x.data.dtype)
    return Tensor._make(y, (x,), lambda g: (np.where(live, -0.5 * g * y / safe, 0.0),))


def safe_div(a, b, eps: float = 1e-6) -> Tensor:
    """``a / (b + eps)`` for a nonnegative denominator."""
    return _as_tensor(a) / (_as_tensor(b) + eps)


# -- parameters, RNG, optimizer ----------------------------------------------

def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based Philox stream; ``keys`` split independent substreams."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> tuple[float, bool]:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params)))
    if not np.isfinite(total) or total <= max_norm:
        return total, False
    scale = max_norm / (total + 1e-12)
    for p in params:
        p.grad = (p.grad * scale).astype(p.data.dtype)
    return total, True


class Adam:
    """Adam with bias correction; moments persist across :meth:`step` calls."""

    def __init__(self, params: Mapping[str, Tensor], lr=2e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise ContractError(f"no gradient for parameters: {', '.join(missing)}")
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)


# -- checkpoint file ---------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write ``params`` in the little-endian binary checkpoint layout.

    Layout: ``u32 version, u32 count`` then, per parameter, ``u32 name_len``,
    UTF-8 name, ``u32 rank``, ``rank x u32`` shape and the float32 payload.
    """
    chunks = [struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        version, count = struct.unpack_from("<II", buf, 0)
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        off = 8
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"truncated checkpoint {path}: {exc}") from None
    if off != len(buf):
        raise DataError(f"trailing bytes in checkpoint {path}")
    return out
