"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active, and involving at least
one tensor with ``requires_grad=True``, are appended to that tape. Calling
:func:`backward` replays the tape in reverse and accumulates gradients into
``Tensor.grad``.

Every op accepts an optional leading batch dimension; gradients flowing into
a tensor that was broadcast over the batch are summed back to its shape.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "affine",
    "backward",
    "broadcast_to",
    "concat",
    "conv2d",
    "grad_check",
    "hadamard",
    "matmul",
    "mul",
    "reshape",
    "sigmoid",
    "stack",
    "sub",
    "tanh",
    "tensor_sum",
    "transpose",
    "zero_grad",
]

_ONE_BELOW = np.nextafter(1.0, 0.0)
_TINY = np.finfo(np.float64).tiny


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or infinity."""


class ShapeError(ValueError):
    """Raised on incompatible operand shapes."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: "Tensor", inputs: tuple, vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive operations.

    Used as a context manager; tapes are thread-local, so independent tapes
    can record concurrently in different threads.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", inputs: tuple, vjp: Callable) -> None:
        self.nodes.append(_Node(out, inputs, vjp))


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional double-precision array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor{' ' + name if name else ''}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __getitem__(self, index):
        return _getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None) -> "Tensor":
        return tensor_sum(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    """Element-wise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), vjp)


def hadamard(a, b) -> Tensor:
    """Element-wise product of two tensors of identical shape."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard needs equal shapes, got {a.shape} and {b.shape}")
    return mul(a, b)


def sigmoid(x) -> Tensor:
    """Logistic function, evaluated without overflow for any finite input.

    Outputs are clamped to the open interval (0, 1) so that saturated gates
    never reach exactly 0 or 1.
    """
    x = as_tensor(x)
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    np.clip(out, _TINY, _ONE_BELOW, out=out)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), vjp)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.clip(np.tanh(x.data), -_ONE_BELOW, _ONE_BELOW)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), vjp)


# -- reductions and shape ops -------------------------------------------------


def tensor_sum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), vjp)


def transpose(x) -> Tensor:
    """Reverse the axes of ``x``."""
    x = as_tensor(x)

    def vjp(g):
        return (g.T,)

    return _make(x.data.T.copy(), (x,), vjp)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {x.shape} to {tuple(shape)}") from exc

    def vjp(g):
        return (_unbroadcast(g, x.shape),)

    return _make(out, (x,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, vjp)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


class _SliceGrad:
    """Gradient that is non-zero only on ``index`` of the input."""

    __slots__ = ("index", "value", "basic")

    def __init__(self, index, value: np.ndarray, basic: bool):
        self.index = index
        self.value = value
        self.basic = basic

    def add_into(self, buf: np.ndarray) -> None:
        if self.basic:
            buf[self.index] += self.value
        else:
            np.add.at(buf, self.index, self.value)


def _getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    basic = _is_basic_index(index)

    def vjp(g):
        return (_SliceGrad(index, g, basic),)

    return _make(np.array(out, copy=True), (x,), vjp)


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` where ``b`` is a matrix and ``a`` a vector or stack of rows."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def vjp(g):
        ga = g @ bd.T
        if ad.ndim == 1:
            gb = np.outer(ad, g)
        else:
            gb = ad.reshape(-1, bd.shape[0]).T @ g.reshape(-1, bd.shape[1])
        return ga, gb

    return _make(out, (a, b), vjp)


def affine(W, x, b) -> Tensor:
    """``W @ x + b`` for a matrix ``W`` (m x n).

    ``x`` may be a single vector of length n or a batch of shape (B, n); the
    result then has shape (m,) or (B, m).
    """
    W, x, b = as_tensor(W), as_tensor(x), as_tensor(b)
    if W.ndim != 2:
        raise ShapeError(f"affine weight must be 2-D, got {W.shape}")
    m, n = W.shape
    if x.ndim not in (1, 2) or x.shape[-1] != n:
        raise ShapeError(f"affine input {x.shape} incompatible with weight {W.shape}")
    if b.shape != (m,):
        raise ShapeError(f"affine bias {b.shape} must be ({m},)")
    Wd, xd = W.data, x.data
    out = xd @ Wd.T + b.data

    def vjp(g):
        gW = np.outer(g, xd) if xd.ndim == 1 else g.T @ xd
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return gW, g @ Wd, gb

    return _make(out, (W, x, b), vjp)


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B, M, N, L) -> (B, M, N, kh*kw*L) patches of the zero-padded input."""
    if kh == 1 and kw == 1:
        return x
    B, M, N, L = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.zeros((B, M + 2 * ph, N + 2 * pw, L))
    xp[:, ph:ph + M, pw:pw + N] = x
    return np.concatenate(
        [xp[:, i:i + M, j:j + N] for i in range(kh) for j in range(kw)], axis=-1)


def _col2im(cols: np.ndarray, kh: int, kw: int, L: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`."""
    if kh == 1 and kw == 1:
        return cols
    B, M, N, _ = cols.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.zeros((B, M + 2 * ph, N + 2 * pw, L))
    k = 0
    for i in range(kh):
        for j in range(kw):
            xp[:, i:i + M, j:j + N] += cols[..., k * L:(k + 1) * L]
            k += 1
    return xp[:, ph:ph + M, pw:pw + N]


def conv2d(x, kernel, bias=None) -> Tensor:
    """Stride-1 2-D convolution with same-size zero padding.

    Parameters
    ----------
    x : Tensor
        Input of shape (M, N, L) or batched (B, M, N, L).
    kernel : Tensor
        Filter bank of shape (kh, kw, L, L'); kh and kw must be odd.
    bias : Tensor, optional
        Per-output-channel bias of shape (L',).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be 4-D (kh, kw, L, L'), got {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be (M, N, L) or (B, M, N, L), got {x.shape}")
    if x.shape[-1] != cin:
        raise ShapeError(f"input has {x.shape[-1]} channels, kernel expects {cin}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    cols = _im2col(xd, kh, kw)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = cols @ kmat
    inputs: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"bias {bias.shape} must be ({cout},)")
        out += bias.data
        inputs = inputs + (bias,)

    def vjp(g):
        g4 = g[None] if unbatched else g
        g2 = g4.reshape(-1, cout)
        gk = (cols.reshape(-1, kh * kw * cin).T @ g2).reshape(kernel.shape)
        gx = _col2im(g4 @ kmat.T, kh, kw, cin)
        grads = (gx[0] if unbatched else gx, gk)
        if bias is not None:
            grads = grads + (g2.sum(axis=0),)
        return grads

    return _make(out[0] if unbatched else out, inputs, vjp)


# -- differentiation ----------------------------------------------------------


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every tensor on the tape."""
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if not tape.nodes:
        raise ValueError("tape is empty; nothing was recorded")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owned: set[int] = set()  # buffers private to this pass, safe to update in place
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g if node.out.grad is None else node.out.grad + g
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in grads:
                leaves[key] = inp
                if isinstance(gi, _SliceGrad):
                    buf = np.zeros(inp.shape)
                    gi.add_into(buf)
                    grads[key] = buf
                    owned.add(key)
                else:
                    grads[key] = gi
                continue
            if key not in owned:
                grads[key] = np.array(grads[key], dtype=np.float64, copy=True)
                owned.add(key)
            if isinstance(gi, _SliceGrad):
                gi.add_into(grads[key])
            else:
                grads[key] += gi
    for key, g in grads.items():
        leaf = leaves.get(key)
        if leaf is None:
            continue
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Compare tape gradients of ``f()`` against central finite differences.

    Returns the maximum over all parameter entries of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    zero_grad(params)
    with Tape() as tape:
        loss = f()
    if loss.size != 1:
        raise ShapeError("grad_check needs a scalar function")
    if loss.requires_grad and tape.nodes:
        backward(loss, tape)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        for idx in np.ndindex(*p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + eps
            fp = f().item()
            p.data[idx] = orig - eps
            fm = f().item()
            p.data[idx] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    zero_grad(params)
    return worst
