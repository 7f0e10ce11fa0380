"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tape records operations while it is the active context; `backward` walks
the records in reverse and accumulates gradients into every tensor that
requires them. With no active tape the same ops run as plain numpy, which
is the fast inference path.

Single dense CPU backend, double precision throughout. A tape is
single-threaded; independent tapes may run on separate threads (the active
tape stack is thread-local).
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError
from .splines import bspline_basis, bspline_basis_and_deriv, bspline_basis_matrix

__all__ = [
    "Tensor", "Tape", "backward", "matmul", "transpose", "add", "sub", "mul",
    "div", "scale", "add_const", "log", "pow_const", "clip_min", "relu",
    "leaky_relu", "silu", "softmax_rows", "layernorm_rows", "concat_columns",
    "slice_columns", "reshape", "reduce_sum", "reduce_mean", "mul_scalar",
    "add_bias", "kan_spline", "bspline_basis",
]

LAYERNORM_EPS = 1e-5


class Tensor:
    """Shape-carrying float64 value node.

    Immutable after creation except for the grad slot, which backward()
    fills. `requires_grad` marks tensors whose gradient should be kept.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


_ACTIVE = threading.local()


class Tape:
    """Ordered record of operations; context manager activates it."""

    def __init__(self):
        self._records: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_ACTIVE, "stack", None)
        if stack is None:
            stack = _ACTIVE.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.stack.pop()

    @staticmethod
    def current() -> "Tape | None":
        stack = getattr(_ACTIVE, "stack", None)
        return stack[-1] if stack else None

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, inputs: tuple, output: Tensor, bwd: Callable) -> None:
        self._records.append((inputs, output, bwd))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d loss / d tensor into .grad for every requires_grad tensor.

        Visits records exactly once, in reverse order; fan-out contributions
        add. Loss must be scalar.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for inputs, output, bwd in reversed(self._records):
            g = grads.get(id(output))
            if g is None:
                continue
            for t, gi in zip(inputs, bwd(g)):
                if gi is None or not t.requires_grad:
                    continue
                tid = id(t)
                if tid in grads:
                    grads[tid] = grads[tid] + gi
                else:
                    grads[tid] = gi
                    holders[tid] = t
        for tid, g in grads.items():
            t = holders[tid]
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _emit(inputs: tuple, out_data: np.ndarray, bwd: Callable) -> Tensor:
    tape = Tape.current()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if tape is not None and needs:
        tape._record(inputs, out, bwd)
    return out


# ---- binary / unary arithmetic ---------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _emit((a, b), ad @ bd, bwd)


def transpose(a: Tensor) -> Tensor:
    return _emit((a,), a.data.T, lambda g: (g.T,))


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _emit((a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _emit((a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise multiply."""
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit((a, b), ad * bd, lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("div", a, b)
    ad, bd = a.data, b.data
    return _emit((a, b), ad / bd, lambda g: (g / bd, -g * ad / (bd * bd)))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit((a,), a.data * c, lambda g: (g * c,))


def add_const(a: Tensor, c: float) -> Tensor:
    return _emit((a,), a.data + c, lambda g: (g,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit((a,), np.log(ad), lambda g: (g / ad,))


def pow_const(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _emit((a,), ad ** p, lambda g: (g * p * ad ** (p - 1.0),))


def clip_min(a: Tensor, c: float) -> Tensor:
    """max(a, c) elementwise; subgradient 0 at the tie."""
    ad = a.data
    return _emit((a,), np.maximum(ad, c), lambda g: (g * (ad > c),))


# ---- activations ------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    ad = a.data
    return _emit((a,), np.maximum(ad, 0.0), lambda g: (g * (ad > 0),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    ad = a.data
    return _emit(
        (a,),
        np.where(ad > 0, ad, slope * ad),
        lambda g: (g * np.where(ad > 0, 1.0, slope),),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x); gradient sigmoid(x) * (1 + x * (1 - sigmoid(x)))."""
    ad = a.data
    s = _sigmoid(ad)
    return _emit((a,), ad * s, lambda g: (g * s * (1.0 + ad * (1.0 - s)),))


# ---- row-wise normalizers ----------------------------------------------------

def softmax_rows(a: Tensor) -> Tensor:
    """Row softmax with per-row max subtraction."""
    ad = a.data
    if np.isnan(ad).any():
        raise NumericError("softmax_rows received NaN input")
    shifted = ad - ad.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit((a,), s, bwd)


def layernorm_rows(a: Tensor) -> Tensor:
    """Parameter-free layer normalization per row, eps guards zero variance."""
    ad = a.data
    mu = ad.mean(axis=-1, keepdims=True)
    var = ad.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    y = (ad - mu) * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _emit((a,), y, bwd)


# ---- structural ops ----------------------------------------------------------

def concat_columns(parts: Sequence[Tensor]) -> Tensor:
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise ShapeError(f"concat_columns row mismatch: {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    edges = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(widths)))

    return _emit(tuple(parts), np.hstack([p.data for p in parts]), bwd)


def slice_columns(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.shape[1]):
        raise ShapeError(f"slice_columns [{start}:{stop}] invalid for shape {a.shape}")
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _emit((a,), a.data[:, start:stop].copy(), bwd)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    old = a.data.shape
    return _emit((a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    ad = a.data
    shape = ad.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _emit((a,), ad.sum(axis=axis), bwd)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    ad = a.data
    shape = ad.shape
    n = ad.size if axis is None else shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape),)

    return _emit((a,), ad.mean(axis=axis), bwd)


def mul_scalar(s: Tensor, a: Tensor) -> Tensor:
    """Scalar tensor times tensor (broadcast)."""
    if s.data.size != 1:
        raise ShapeError(f"mul_scalar needs a scalar first argument, got {s.shape}")
    sd, ad = s.data, a.data

    def bwd(g):
        return np.sum(g * ad).reshape(sd.shape), g * sd

    return _emit((s, a), sd * ad, bwd)


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast add of a length-n bias to an m-by-n matrix."""
    if a.data.ndim != 2 or b.data.shape != (a.shape[1],):
        raise ShapeError(f"add_bias shape mismatch: {a.shape} + {b.shape}")
    return _emit((a, b), a.data + b.data, lambda g: (g, g.sum(axis=0)))


# ---- KAN edge functions ------------------------------------------------------

def kan_spline(
    x: Tensor,
    beta: Tensor,
    gamma: Tensor,
    coeff: Tensor,
    knots: np.ndarray,
    degree: int,
) -> Tensor:
    """One KAN layer: out[k, j] = sum_i beta[j,i]*silu(x[k,i]) + gamma[j,i]*spline_ji(x[k,i]).

    spline_ji(x) = sum_p coeff[j,i,p] * B_p(x) on the shared knot grid,
    inputs clamped to the grid domain.
    """
    n_out, n_in = beta.shape
    if x.data.ndim != 2 or x.shape[1] != n_in:
        raise ShapeError(f"kan_spline input {x.shape} vs in_features {n_in}")
    if gamma.shape != (n_out, n_in) or coeff.shape[:2] != (n_out, n_in):
        raise ShapeError(
            f"kan_spline parameter shapes disagree: beta {beta.shape}, "
            f"gamma {gamma.shape}, coeff {coeff.shape}"
        )
    xd = x.data
    s = _sigmoid(xd)
    base = xd * s
    basis, dbasis = bspline_basis_and_deriv(xd, knots, degree)
    gc = gamma.data[:, :, None] * coeff.data
    out = base @ beta.data.T + np.einsum("kip,jip->kj", basis, gc)

    def bwd(g):
        tmp = np.einsum("kj,kip->jip", g, basis)
        d_coeff = tmp * gamma.data[:, :, None]
        d_gamma = np.einsum("jip,jip->ji", tmp, coeff.data)
        d_beta = g.T @ base
        d_base = s * (1.0 + xd * (1.0 - s))
        u = np.einsum("kj,jip->kip", g, gc)
        d_x = d_base * (g @ beta.data) + np.einsum("kip,kip->ki", u, dbasis)
        return d_x, d_beta, d_gamma, d_coeff

    return _emit((x, beta, gamma, coeff), out, bwd)


def spline_values(x: np.ndarray, coeff_row: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    """Plain (non-taped) evaluation of sum_p coeff[p] * B_p(x); test utility."""
    return bspline_basis_matrix(x, knots, degree) @ coeff_row
