"""LSTM and conv-LSTM cells with peephole connections, plus grid reshaping helpers.

Inputs may carry a leading batch axis: an LSTM step takes ``x`` of shape
(L,) or (B, L); a conv-LSTM step takes (M, N, L) or (B, M, N, L).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    affine,
    as_tensor,
    broadcast_to,
    concat,
    conv2d,
    matmul,
    reshape,
    sigmoid,
    stack,
    tanh,
)

GATES = ("i", "f", "c", "o")


def glorot(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Uniform draw in +-sqrt(6 / (fan_in + fan_out))."""
    if len(shape) == 4:
        kh, kw, cin, cout = shape
        fan_in, fan_out = kh * kw * cin, kh * kw * cout
    elif len(shape) == 2:
        fan_out, fan_in = shape
    else:
        fan_in = fan_out = shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class _ParamGroup:
    """Shared helpers for dataclasses whose fields are all tensors."""

    def named_tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def weights(self) -> list[Tensor]:
        return [t for name, t in self.named_tensors().items() if not name.startswith("b_")]

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())


@dataclass
class LstmCellParams(_ParamGroup):
    W_xi: Tensor
    W_hi: Tensor
    W_xf: Tensor
    W_hf: Tensor
    W_xc: Tensor
    W_hc: Tensor
    W_xo: Tensor
    W_ho: Tensor
    W_ci: Tensor
    W_cf: Tensor
    W_co: Tensor
    b_i: Tensor
    b_f: Tensor
    b_c: Tensor
    b_o: Tensor

    def __post_init__(self):
        hidden, inp = self.W_xi.shape
        for g in GATES:
            if getattr(self, f"W_x{g}").shape != (hidden, inp):
                raise ShapeError(f"W_x{g} must be {hidden}x{inp}")
            if getattr(self, f"W_h{g}").shape != (hidden, hidden):
                raise ShapeError(f"W_h{g} must be {hidden}x{hidden}")
            if getattr(self, f"b_{g}").shape != (hidden,):
                raise ShapeError(f"b_{g} must have length {hidden}")
        for g in ("i", "f", "o"):
            if getattr(self, f"W_c{g}").shape != (hidden,):
                raise ShapeError(f"peephole W_c{g} must have length {hidden}")

    @property
    def input_len(self) -> int:
        return self.W_xi.shape[1]

    @property
    def hidden_len(self) -> int:
        return self.W_xi.shape[0]

    @classmethod
    def build(cls, input_len: int, hidden_len: int, rng: np.random.Generator | None = None,
              forget_bias: float = 1.0) -> "LstmCellParams":
        """Randomly initialised parameters; ``rng=None`` gives all zeros."""
        values = {}
        for g in GATES:
            values[f"W_x{g}"] = (hidden_len, input_len)
            values[f"W_h{g}"] = (hidden_len, hidden_len)
        for g in ("i", "f", "o"):
            values[f"W_c{g}"] = (hidden_len,)
        tensors = {}
        for name, shape in values.items():
            data = np.zeros(shape) if rng is None else glorot(shape, rng)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        for g in GATES:
            b = np.full(hidden_len, forget_bias if (g == "f" and rng is not None) else 0.0)
            tensors[f"b_{g}"] = Tensor(b, requires_grad=True, name=f"b_{g}")
        return cls(**tensors)


@dataclass
class ConvLstmCellParams(_ParamGroup):
    W_xi: Tensor
    W_hi: Tensor
    W_xf: Tensor
    W_hf: Tensor
    W_xc: Tensor
    W_hc: Tensor
    W_xo: Tensor
    W_ho: Tensor
    W_ci: Tensor
    W_cf: Tensor
    W_co: Tensor
    b_i: Tensor
    b_f: Tensor
    b_c: Tensor
    b_o: Tensor

    def __post_init__(self):
        kh, kw, cin, cout = self.W_xi.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
        for g in GATES:
            if getattr(self, f"W_x{g}").shape != (kh, kw, cin, cout):
                raise ShapeError(f"W_x{g} must be {(kh, kw, cin, cout)}")
            if getattr(self, f"W_h{g}").shape != (kh, kw, cout, cout):
                raise ShapeError(f"W_h{g} must be {(kh, kw, cout, cout)}")
            if getattr(self, f"b_{g}").shape != (cout,):
                raise ShapeError(f"b_{g} must have length {cout}")
        grid = self.W_ci.shape
        if len(grid) != 3 or grid[2] != cout:
            raise ShapeError(f"peephole tensors must be (M, N, {cout}), got {grid}")
        for g in ("f", "o"):
            if getattr(self, f"W_c{g}").shape != grid:
                raise ShapeError("peephole tensors must share the hidden-state shape")

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.W_xi.shape[:2]

    @property
    def in_channels(self) -> int:
        return self.W_xi.shape[2]

    @property
    def out_channels(self) -> int:
        return self.W_xi.shape[3]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.W_ci.shape[:2]

    @classmethod
    def build(cls, grid: tuple[int, int], in_channels: int, out_channels: int,
              kernel_size: int = 3, rng: np.random.Generator | None = None,
              forget_bias: float = 1.0) -> "ConvLstmCellParams":
        if kernel_size % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {kernel_size}")
        k = kernel_size
        M, N = grid
        shapes = {}
        for g in GATES:
            shapes[f"W_x{g}"] = (k, k, in_channels, out_channels)
            shapes[f"W_h{g}"] = (k, k, out_channels, out_channels)
        for g in ("i", "f", "o"):
            shapes[f"W_c{g}"] = (M, N, out_channels)
        tensors = {}
        for name, shape in shapes.items():
            data = np.zeros(shape) if rng is None else glorot(shape, rng)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        for g in GATES:
            b = np.full(out_channels, forget_bias if (g == "f" and rng is not None) else 0.0)
            tensors[f"b_{g}"] = Tensor(b, requires_grad=True, name=f"b_{g}")
        return cls(**tensors)


def _gate_update(z: list[Tensor], c_prev: Tensor, p) -> tuple[Tensor, Tensor]:
    """Shared peephole gate arithmetic; ``z`` holds the four pre-activations
    (input path + hidden path + bias) in i, f, c, o order."""
    zi, zf, zc, zo = z
    i = sigmoid(zi + p.W_ci * c_prev)
    f = sigmoid(zf + p.W_cf * c_prev)
    c = f * c_prev + i * tanh(zc)
    o = sigmoid(zo + p.W_co * c)
    h = o * tanh(c)
    return h, c


def lstm_step(x, h_prev, c_prev, p: LstmCellParams) -> tuple[Tensor, Tensor]:
    """One LSTM update with peepholes; returns ``(h_t, c_t)``."""
    x, h_prev, c_prev = as_tensor(x), as_tensor(h_prev), as_tensor(c_prev)
    L, H = p.input_len, p.hidden_len
    if x.shape[-1] != L or h_prev.shape[-1] != H or c_prev.shape != h_prev.shape:
        raise ShapeError(
            f"lstm_step shapes x={x.shape}, h={h_prev.shape}, c={c_prev.shape} "
            f"do not match cell ({L} -> {H})")
    z = [affine(getattr(p, f"W_x{g}"), x, getattr(p, f"b_{g}"))
         + matmul(h_prev, getattr(p, f"W_h{g}").T)
         for g in GATES]
    return _gate_update(z, c_prev, p)


def lstm_forward(xs: Sequence, p: LstmCellParams) -> list[Tensor]:
    """Run the cell over ``xs`` (T inputs) from zero initial state."""
    if len(xs) == 0:
        raise ValueError("lstm_forward needs a non-empty sequence")
    xs = [as_tensor(x) for x in xs]
    H = p.hidden_len
    batch = xs[0].shape[:-1]
    if xs[0].shape[-1] != p.input_len:
        raise ShapeError(f"inputs have length {xs[0].shape[-1]}, cell expects {p.input_len}")
    # input path for every step and gate at once
    Wx = concat([getattr(p, f"W_x{g}") for g in GATES], axis=0)
    bx = concat([getattr(p, f"b_{g}") for g in GATES], axis=0)
    Wh = concat([getattr(p, f"W_h{g}") for g in GATES], axis=0).T
    X = stack(xs, axis=0)
    zx = affine(Wx, reshape(X, (-1, p.input_len)), bx)
    zx = reshape(zx, (len(xs),) + batch + (4 * H,))
    h = Tensor(np.zeros(batch + (H,)))
    c = Tensor(np.zeros(batch + (H,)))
    out = []
    for t in range(len(xs)):
        zt = zx[t] + matmul(h, Wh)
        z = [zt[..., k * H:(k + 1) * H] for k in range(4)]
        h, c = _gate_update(z, c, p)
        out.append(h)
    return out


def convlstm_step(X, H_prev, C_prev, p: ConvLstmCellParams) -> tuple[Tensor, Tensor]:
    """One conv-LSTM update; convolutions on input/hidden, Hadamard peepholes on cell."""
    X, H_prev, C_prev = as_tensor(X), as_tensor(H_prev), as_tensor(C_prev)
    grid, cout = p.grid_shape, p.out_channels
    if (X.shape[-3:-1] != grid or X.shape[-1] != p.in_channels
            or H_prev.shape[-3:] != grid + (cout,) or C_prev.shape != H_prev.shape):
        raise ShapeError(
            f"convlstm_step shapes X={X.shape}, H={H_prev.shape}, C={C_prev.shape} "
            f"do not match cell grid {grid}, channels {p.in_channels} -> {cout}")
    z = [conv2d(X, getattr(p, f"W_x{g}"), getattr(p, f"b_{g}"))
         + conv2d(H_prev, getattr(p, f"W_h{g}"))
         for g in GATES]
    return _gate_update(z, C_prev, p)


def convlstm_forward(Xs: Sequence, p: ConvLstmCellParams) -> list[Tensor]:
    """Run the conv-LSTM cell over a sequence of (M, N, L) tensors from zero state."""
    if len(Xs) == 0:
        raise ValueError("convlstm_forward needs a non-empty sequence")
    Xs = [as_tensor(x) for x in Xs]
    first = Xs[0]
    if first.ndim not in (3, 4) or first.shape[-3:-1] != p.grid_shape or first.shape[-1] != p.in_channels:
        raise ShapeError(f"input {first.shape} does not match cell grid {p.grid_shape}, "
                         f"channels {p.in_channels}")
    M, N = p.grid_shape
    C = p.out_channels
    batch = first.shape[:-3]
    T = len(Xs)
    Wx = concat([getattr(p, f"W_x{g}") for g in GATES], axis=3)
    bx = concat([getattr(p, f"b_{g}") for g in GATES], axis=0)
    Wh = concat([getattr(p, f"W_h{g}") for g in GATES], axis=3)
    X = reshape(stack(Xs, axis=0), (-1, M, N, p.in_channels))
    zx = reshape(conv2d(X, Wx, bx), (T,) + batch + (M, N, 4 * C))
    Hs = Tensor(np.zeros(batch + (M, N, C)))
    Cs = Tensor(np.zeros(batch + (M, N, C)))
    out = []
    for t in range(T):
        zt = zx[t] + conv2d(Hs, Wh)
        z = [zt[..., k * C:(k + 1) * C] for k in range(4)]
        Hs, Cs = _gate_update(z, Cs, p)
        out.append(Hs)
    return out


def expand_dim(m) -> Tensor:
    """(M, N) -> (M, N, 1); a leading batch axis is carried through."""
    m = as_tensor(m)
    return reshape(m, m.shape + (1,))


def squeeze_dim(t) -> Tensor:
    """Inverse of :func:`expand_dim`."""
    t = as_tensor(t)
    if t.shape[-1] != 1:
        raise ShapeError(f"last axis must have extent 1, got {t.shape}")
    return reshape(t, t.shape[:-1])


def repeat_scalar(x, M: int, N: int) -> Tensor:
    """Broadcast a scalar (or a batch of scalars, shape (B, 1)) to (…, M, N, 1)."""
    if M < 1 or N < 1:
        raise ValueError("grid extents must be positive")
    x = as_tensor(x)
    if x.ndim == 0 or x.shape == (1,):
        return broadcast_to(reshape(x, (1, 1, 1)), (M, N, 1))
    if x.ndim == 2 and x.shape[1] == 1:
        B = x.shape[0]
        return broadcast_to(reshape(x, (B, 1, 1, 1)), (B, M, N, 1))
    raise ShapeError(f"repeat_scalar expects a scalar or (B, 1), got {x.shape}")
