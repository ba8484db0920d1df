"""Dense float64 tensors with a small reverse-mode tape.

Only the primitives the transformer policy needs are provided.  Arrays may
carry leading batch axes; every op acts on the trailing one or two axes and
treats the rest as a stack.  A 2-D operand (a parameter) paired with a
batched operand is shared across the stack, and its gradient is summed over
it.  There is no other broadcasting.

Usage::

    with Tape() as tape:
        p = tape.watch("p", np.ones((1, 3)))
        loss = matmul(p, p, transpose_b=True)
    grads = tape.backward(loss)      # {"p": array([[2., 2., 2.]])}

Operations run eagerly; they are recorded only when a tape is active and at
least one input descends from a watched parameter.
"""

from __future__ import annotations

from contextvars import ContextVar
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ShapeError, TapeError

_active_tape: ContextVar["Tape | None"] = ContextVar("lqrformer_active_tape", default=None)


class Tensor:
    __slots__ = ("data", "name", "tracked")

    def __init__(self, data, name: str | None = None, tracked: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.name = name
        self.tracked = tracked

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of primitive ops plus the parameters it differentiates."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._params: dict[str, Tensor] = {}
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def watch(self, name: str, value) -> Tensor:
        if name in self._params:
            raise TapeError(f"parameter {name!r} already watched")
        t = Tensor(value, name=name, tracked=True)
        self._params[name] = t
        return t

    @property
    def params(self) -> dict[str, Tensor]:
        return dict(self._params)

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        out.tracked = True
        self._nodes.append(_Node(out, parents, backward))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` for every watched parameter.

        Parameters the loss does not depend on get zero gradients.
        """
        if loss.data.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        param_ids = {id(p) for p in self._params.values()}
        if id(loss) not in self._produced and id(loss) not in param_ids:
            raise TapeError("loss was not produced by operations recorded on this tape")

        adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = adj.pop(id(node.out), None)
            if g is None:
                continue
            grads = node.backward(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.tracked:
                    continue
                key = id(parent)
                if key in adj:
                    adj[key] = adj[key] + pg
                else:
                    adj[key] = pg
        return {
            name: np.array(adj[id(p)], dtype=np.float64) if id(p) in adj else np.zeros_like(p.data)
            for name, p in self._params.items()
        }


def _maybe_record(out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = _active_tape.get()
    if tape is not None and any(p.tracked for p in parents):
        tape._record(out, parents, backward)
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a stacked gradient over leading axes down to ``shape``."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead < 0 or g.shape[lead:] != shape:
        raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")
    return g.sum(axis=tuple(range(lead)))


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _matmul_shared(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # one large GEMM instead of a loop of small ones
    return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """``a @ b`` (or ``a @ b^T``) over the last two axes.

    ``b`` may be 2-D while ``a`` is stacked; then ``b`` is shared.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    k_b = b.shape[-1] if transpose_b else b.shape[-2]
    if a.shape[-1] != k_b:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape} (transpose_b={transpose_b})")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch axes differ: {a.shape} x {b.shape}")
    bm = _swap(b.data) if transpose_b else b.data
    shared = b.ndim == 2 and a.ndim > 2
    out = Tensor(_matmul_shared(a.data, bm) if shared else np.matmul(a.data, bm))

    def backward(g):
        bt = b.data if transpose_b else _swap(b.data)
        ga = (_matmul_shared(g, bt) if shared else np.matmul(g, bt)) if a.tracked else None
        gb = None
        if b.tracked:
            if shared:
                a2 = a.data.reshape(-1, a.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                gb = g2.T @ a2 if transpose_b else a2.T @ g2
            else:
                gb = np.matmul(_swap(g), a.data) if transpose_b else np.matmul(_swap(a.data), g)
        return ga, gb

    return _maybe_record(out, (a, b), backward)


def _check_stackable(a: Tensor, b: Tensor, op: str) -> None:
    small, big = (a, b) if a.ndim <= b.ndim else (b, a)
    if big.shape[big.ndim - small.ndim:] != small.shape:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_stackable(a, b, "add")
    out = Tensor(a.data + b.data)

    def backward(g):
        return (
            _reduce_to(g, a.shape) if a.tracked else None,
            _reduce_to(g, b.shape) if b.tracked else None,
        )

    return _maybe_record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_stackable(a, b, "sub")
    out = Tensor(a.data - b.data)

    def backward(g):
        return (
            _reduce_to(g, a.shape) if a.tracked else None,
            -_reduce_to(g, b.shape) if b.tracked else None,
        )

    return _maybe_record(out, (a, b), backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector to every row: ``x + 1 bias^T``."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not match rows of {x.shape}")
    out = Tensor(x.data + bias.data)

    def backward(g):
        return (
            g if x.tracked else None,
            g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.tracked else None,
        )

    return _maybe_record(out, (x, bias), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise product of equally shaped tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def backward(g):
        return (g * b.data if a.tracked else None, g * a.data if b.tracked else None)

    return _maybe_record(out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)
    return _maybe_record(out, (x,), lambda g: (g * c,))


def softmax_rows(x: Tensor) -> Tensor:
    y = kernels.softmax_rows(x.data)
    out = Tensor(y)
    return _maybe_record(out, (x,), lambda g: (kernels.softmax_rows_backward(g, y),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF via erf."""
    out = Tensor(kernels.gelu_forward(x.data))
    return _maybe_record(out, (x,), lambda g: (kernels.gelu_backward(g, x.data),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, rho: float = 1e-5) -> Tensor:
    """Per-row ``gamma * (x - mean) / sqrt(var + rho) + beta`` (population variance)."""
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs rows of length >= 2")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({d},)")
    if rho <= 0:
        raise ValueError("rho must be positive")
    y, xhat, inv_std = kernels.layer_norm_forward(x.data, gamma.data, beta.data, rho)
    out = Tensor(y)

    def backward(g):
        gx, ggamma, gbeta = kernels.layer_norm_backward(g, xhat, inv_std, gamma.data)
        return (
            gx if x.tracked else None,
            ggamma if gamma.tracked else None,
            gbeta if beta.tracked else None,
        )

    return _maybe_record(out, (x, gamma, beta), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat of nothing")
    ax = axis % parts[0].ndim
    out = Tensor(np.concatenate([p.data for p in parts], axis=ax))
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def backward(g):
        grads = []
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.tracked:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(int(lo), int(hi))
                grads.append(g[tuple(idx)])
            else:
                grads.append(None)
        return tuple(grads)

    return _maybe_record(out, parts, backward)


def slice_row(x: Tensor, index: int) -> Tensor:
    """Row ``index`` of the trailing matrix, kept as a 1-row matrix."""
    r = x.shape[-2]
    if not -r <= index < r:
        raise ShapeError(f"row {index} out of range for {x.shape}")
    i = index % r
    out = Tensor(x.data[..., i:i + 1, :])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., i:i + 1, :] = g
        return (gx,)

    return _maybe_record(out, (x,), backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[-1]:
        raise ShapeError(f"columns {start}:{stop} out of range for {x.shape}")
    out = Tensor(x.data[..., start:stop])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return _maybe_record(out, (x,), backward)


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    out = Tensor(np.swapaxes(x.data, axis1, axis2))
    return _maybe_record(out, (x,), lambda g: (np.swapaxes(g, axis1, axis2),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _maybe_record(out, (x,), lambda g: (g.reshape(x.shape),))


def cauchy_mean(r: Tensor, xi: float) -> Tensor:
    """``mean_j ln(1 + ||r_j||^2 / xi^2)`` over the rows of a 2-D residual."""
    if r.ndim != 2:
        raise ShapeError(f"cauchy_mean expects (batch, n), got {r.shape}")
    n_rows = r.shape[0]
    q = np.sum(r.data * r.data, axis=1) / (xi * xi)
    out = Tensor(np.array(np.mean(np.log1p(q))))

    def backward(g):
        coef = (2.0 / (xi * xi * n_rows)) / (1.0 + q)
        return (g * coef[:, None] * r.data,)

    return _maybe_record(out, (r,), backward)
