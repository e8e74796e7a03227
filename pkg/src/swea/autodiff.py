"""Small reverse-mode differentiation engine over dense numpy arrays.

Operations are recorded on a :class:`Tape` while one is active on the current
thread.  ``backward`` replays the tape in reverse creation order, which is a
valid reverse topological order because a node can only consume tensors that
already exist.

Broadcasting is restricted: two operands must have equal shapes, or one of them
is a scalar, or one shape is a trailing suffix of the other (the bias-add case).
Anything else raises :class:`DimensionError`.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "embedding_lookup",
    "exp",
    "gelu",
    "index_add",
    "kl_divergence",
    "layer_norm",
    "log_softmax",
    "matmul",
    "mul",
    "nll_loss",
    "no_grad",
    "reshape",
    "scale",
    "softmax",
    "sub",
    "tensor_sum",
    "transpose",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_state = threading.local()


def _active_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple, output: Tensor, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; operations on tensors that require gradients are
    appended while the tape is active on this thread.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> Tape:
        if not hasattr(_state, "tapes"):
            _state.tapes = []
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def record(self, node: Node) -> None:
        node.output._tape = self
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._tape is self:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = ig if prev is None else prev + ig
                else:
                    inp._accumulate(ig)


class no_grad:
    """Suspend recording on this thread."""

    def __enter__(self):
        if not hasattr(_state, "tapes"):
            _state.tapes = []
        _state.tapes.append(None)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype).reshape(self.data.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(op, inputs, out, vjp))
    return out


def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    if a == b or a == () or b == ():
        return
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return
    raise DimensionError(f"{op}: shapes {a} and {b} are not broadcast-compatible")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _make(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * dinner),)

    return _make("gelu", out, (x,), vjp)


# -- shape ---------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _make("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for rank {x.data.ndim}")
    inv = tuple(np.argsort(axes))
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make("getitem", x.data[index], (x,), vjp)


def index_add(x: Tensor, index, src: Tensor) -> Tensor:
    """Return a copy of ``x`` with ``src`` added at ``x[index]``.

    ``src`` may broadcast over leading axes of the indexed region.
    """
    region = x.data[index]
    _check_broadcast(region.shape, src.shape, "index_add")
    if len(src.shape) > len(region.shape):
        raise DimensionError(f"index_add: source {src.shape} larger than region {region.shape}")
    out = x.data.copy()
    out[index] += src.data
    src_shape = src.shape
    return _make("index_add", out, (x, src), lambda g: (g, _reduce_to(g[index], src_shape)))


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", np.asarray(x.data.sum(axis=axis)), (x,), vjp)


# -- linear algebra --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported forms: 2D @ 2D, ND @ 2D (shared weight), and ND @ ND with equal
    leading batch dimensions.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {ad.shape} @ {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ, {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make("matmul", out, (a, b), vjp)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding_lookup: ids outside [0, {vocab})")
    shape, dtype = table.shape, table.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make("embedding", table.data[ids], (table,), vjp)


# -- normalisation and probabilities -------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({h},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx_hat = g * gain.data
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, _reduce_to(g * xhat, (h,)), _reduce_to(g, (h,))

    return _make("layer_norm", out, (x, gain, bias), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def _log_softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = _log_softmax_np(x.data, axis)
    p = np.exp(out)
    return _make(
        "log_softmax", out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),)
    )


def nll_loss(logprobs: Tensor, target_ids, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-probability of ``target_ids``.

    Targets align with the *final* rows of ``logprobs``: a ``(T, V)`` input with
    ``m <= T`` targets scores rows ``T-m .. T-1``.  Batched input ``(B, T, V)``
    takes targets of shape ``(B, m)``.  Positions equal to ``ignore_index`` are
    excluded from the mean.
    """
    lp = logprobs.data
    tg = np.asarray(target_ids, dtype=np.int64)
    if lp.ndim == 2:
        lp_b, tg_b = lp[None], tg.reshape(1, -1)
    elif lp.ndim == 3:
        lp_b, tg_b = lp, tg.reshape(lp.shape[0], -1) if tg.ndim == 1 else tg
    else:
        raise DimensionError(f"nll_loss expects rank 2 or 3 logprobs, got {lp.shape}")
    if tg_b.shape[0] != lp_b.shape[0]:
        raise DimensionError("nll_loss: batch sizes of logprobs and targets differ")
    B, T, V = lp_b.shape
    m = tg_b.shape[1]
    if m == 0 or m > T:
        raise DimensionError(f"nll_loss: {m} targets for {T} rows")
    keep = np.ones_like(tg_b, dtype=bool) if ignore_index is None else tg_b != ignore_index
    chosen = tg_b[keep]
    if chosen.size and (chosen.min() < 0 or chosen.max() >= V):
        raise IndexError(f"nll_loss: target id outside vocabulary of size {V}")
    count = int(keep.sum())
    if count == 0:
        raise ValueError("nll_loss: every target is ignored")
    bi, ti = np.nonzero(keep)
    rows = ti + (T - m)
    picked = lp_b[bi, rows, tg_b[bi, ti]]
    value = np.asarray(-picked.sum() / count, dtype=lp.dtype)
    shape, dtype = lp.shape, lp.dtype

    def vjp(g):
        full = np.zeros(lp_b.shape, dtype=dtype)
        np.add.at(full, (bi, rows, tg_b[bi, ti]), -g / count)
        return (full.reshape(shape),)

    return _make("nll_loss", value, (logprobs,), vjp)


def kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """``KL(softmax(p) || softmax(q))`` summed over all leading rows.

    ``p`` is treated as a fixed reference: no gradient flows into it.
    """
    if p_logits.shape != q_logits.shape:
        raise DimensionError(f"kl_divergence: shapes {p_logits.shape} and {q_logits.shape} differ")
    log_p = _log_softmax_np(p_logits.data, -1)
    log_q = _log_softmax_np(q_logits.data, -1)
    p = np.exp(log_p)
    q = np.exp(log_q)
    value = np.asarray((p * (log_p - log_q)).sum(), dtype=q_logits.dtype)
    # d/dq_logits of sum p (log p - log q) = q * sum(p) - p, per row
    return _make("kl_divergence", value, (q_logits,), lambda g: (g * (q - p),))


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        if loss.requires_grad:
            loss._accumulate(np.ones_like(loss.data))
            return
        raise ValueError("loss was not recorded on any tape")
    loss._tape.backward(loss)
