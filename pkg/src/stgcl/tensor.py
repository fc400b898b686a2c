"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` (entered with a
``with`` block) when the tape is in train mode and at least one operand needs
a gradient. :func:`backward` replays the tape in exact reverse order.
"""
from __future__ import annotations

import builtins
import math
import threading
from typing import Callable, Sequence

import numpy as np

from .rng import make_rng

__all__ = [
    "Tensor", "Tape", "ShapeError", "NumericError", "TapeError",
    "backward", "current_tape", "as_tensor",
    "add", "sub", "neg", "mul", "matmul", "dilated_causal_conv1d",
    "gated_activation", "relu", "tanh", "sigmoid", "dropout", "batch_norm",
    "sum", "mean", "abs", "log", "exp", "l2_normalize", "concat", "slice",
    "reshape", "transpose", "receptive_field", "masked_logsumexp",
]


class ShapeError(ValueError):
    """Operand shapes are not conformable."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        shown = " and ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


class NumericError(ArithmeticError):
    """A tensor would hold NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of the tape: non-scalar loss, detached graph, double backward."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            else data.astype(np.float64, copy=False)
        if arr.size and not math.isfinite(float(np.add.reduce(arr, axis=None))):
            if not np.isfinite(arr).all():
                raise NumericError(f"non-finite value in tensor{' ' + name if name else ''}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="not a single element")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_state = threading.local()


def current_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Records operations for one forward pass.

    ``mode`` is ``"train"`` or ``"eval"``; eval mode records nothing and makes
    dropout and batch norm behave as at inference time. ``seed`` keys the
    dropout masks drawn while the tape is active.
    """

    def __init__(self, mode: str = "train", seed: int = 0, key: Sequence[int] = ()):
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown tape mode {mode!r}")
        self.mode = mode
        self.seed = seed
        self.key = tuple(key)
        self.nodes: list[_Node] = []
        self.params: dict[str, Tensor] = {}
        self._draws = 0
        self._consumed = False

    @property
    def training(self) -> bool:
        return self.mode == "train"

    def register(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            p.requires_grad = True
            self.params[name] = p

    def next_rng(self, purpose: str) -> np.random.Generator:
        self._draws += 1
        return make_rng(self.seed, purpose, *self.key, self._draws)

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and tape.training and any(t.requires_grad for t in inputs):
        if tape._consumed:
            raise TapeError("tape already consumed by backward; start a new tape")
        out.requires_grad = True
        node = _Node(out, inputs, backward)
        out._node = node
        tape.nodes.append(node)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse-mode sweep; returns gradients for every registered parameter."""
    if loss.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.training:
        raise TapeError("backward requires a train-mode tape")
    if tape._consumed:
        raise TapeError("backward already called on this tape; re-run the forward pass")
    if loss._node is None:
        raise TapeError("loss is detached from the tape (no recorded operations)")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp._node is None:
                leaves[key] = inp
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
    # node <-> output references form cycles; drop them so arrays free immediately
    for node in tape.nodes:
        node.out._node = None
    tape.nodes.clear()
    out = {}
    for name, p in tape.params.items():
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
            p.grad = g
        out[name] = g
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def abs(x: Tensor) -> Tensor:  # noqa: A001
    # subgradient at 0 is 0
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * sign,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NumericError("log of non-positive value")
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def gated_activation(filt: Tensor, gate: Tensor) -> Tensor:
    """tanh(filt) * sigmoid(gate), the WaveNet-style gate."""
    if filt.shape != gate.shape:
        raise ShapeError("gated_activation", filt.shape, gate.shape)
    t = np.tanh(filt.data)
    s = _sigmoid(gate.data)

    def bw(g):
        return g * s * (1.0 - t * t), g * t * s * (1.0 - s)

    return _result(t * s, (filt, gate), bw)


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dims") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), bw)


def receptive_field(kernel_size: int, dilations: Sequence[int]) -> int:
    return 1 + builtins.sum((kernel_size - 1) * d for d in dilations)


def dilated_causal_conv1d(x: Tensor, w: Tensor, dilation: int = 1) -> Tensor:
    """Valid dilated convolution along the time axis of a channel-last tensor.

    ``x`` is ``(..., L, C_in)`` and ``w`` is ``(K, C_in, C_out)``; the output
    has length ``L - (K-1)*dilation`` and position ``t`` reads inputs
    ``t, t+d, ..., t+(K-1)d``, i.e. it only sees the past of its last tap.
    """
    if x.ndim < 2 or w.ndim != 3 or x.shape[-1] != w.shape[1]:
        raise ShapeError("dilated_causal_conv1d", x.shape, w.shape)
    k = w.shape[0]
    span = (k - 1) * dilation
    length = x.shape[-2]
    out_len = length - span
    if out_len < 1:
        raise ShapeError("dilated_causal_conv1d", x.shape, w.shape,
                         detail=f"length {length} shorter than span {span + 1}")
    xd, wd = x.data, w.data
    out = xd[..., 0:out_len, :] @ wd[0]
    for j in range(1, k):
        off = j * dilation
        out = out + xd[..., off:off + out_len, :] @ wd[j]

    def bw(g):
        gx = np.zeros_like(xd)
        gw = np.empty_like(wd)
        c_in, c_out = wd.shape[1], wd.shape[2]
        g2 = g.reshape(-1, c_out)
        for j in range(k):
            off = j * dilation
            gx[..., off:off + out_len, :] += g @ wd[j].T
            gw[j] = xd[..., off:off + out_len, :].reshape(-1, c_in).T @ g2
        return gx, gw

    return _result(out, (x, w), bw)


# -- stochastic / normalization ----------------------------------------------

def dropout(x: Tensor, p: float) -> Tensor:
    """Inverted dropout; identity outside a train-mode tape or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    tape = current_tape()
    if p == 0.0 or tape is None or not tape.training:
        return x
    keep = (tape.next_rng("dropout").random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: dict,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch norm over every axis but the last.

    ``state`` holds ``mean`` and ``var`` running statistics, updated in place
    in train mode and used verbatim in eval mode.
    """
    feat = x.shape[-1]
    if gamma.shape != (feat,) or beta.shape != (feat,):
        raise ShapeError("batch_norm", x.shape, gamma.shape, beta.shape)
    tape = current_tape()
    training = tape is not None and tape.training
    xd = x.data.reshape(-1, feat)
    if training:
        n = xd.shape[0]
        if n < 2:
            raise ShapeError("batch_norm", x.shape, detail="train mode needs batch size >= 2")
        mu = xd.mean(axis=0)
        var = xd.var(axis=0)
        state["mean"] = (1 - momentum) * state["mean"] + momentum * mu
        state["var"] = (1 - momentum) * state["var"] + momentum * var * n / (n - 1)
    else:
        mu, var = state["mean"], state["var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = (xhat * gamma.data + beta.data).reshape(x.shape)
    gd = gamma.data

    def bw(g):
        g2 = g.reshape(-1, feat)
        dgamma = (g2 * xhat).sum(axis=0)
        dbeta = g2.sum(axis=0)
        dxhat = g2 * gd
        if training:
            n = g2.shape[0]
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv
        return dx.reshape(x.shape), dgamma, dbeta

    return _result(out, (x, gamma, beta), bw)


# -- reductions and shape plumbing --------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if (norm == 0).any():
        raise NumericError("l2_normalize of a zero vector")
    y = x.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _result(y, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice(x: Tensor, index) -> Tensor:  # noqa: A001
    """Basic (non-fancy) indexing."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _result(x.data[index], (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _result(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def masked_logsumexp(x: Tensor, mask, axis: int = -1) -> Tensor:
    """``log(sum(exp(x)))`` over entries where ``mask`` is true, max-shifted.

    Every reduced row must keep at least one entry.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=axis).all():
        raise NumericError("masked_logsumexp: a row has no unmasked entries")
    shifted = np.where(mask, x.data, -np.inf)
    c = shifted.max(axis=axis, keepdims=True)
    w = np.exp(shifted - c)
    total = w.sum(axis=axis, keepdims=True)
    out = (np.log(total) + c).squeeze(axis)
    soft = w / total

    def bw(g):
        return (np.expand_dims(g, axis) * soft,)

    return _result(out, (x,), bw)
