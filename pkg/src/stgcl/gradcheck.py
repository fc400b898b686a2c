"""Central finite-difference check of every differentiable op.

Each case builds random inputs, reduces the op's output to a scalar through a
fixed random weighting, and compares the tape's gradient against
``(f(x + h) - f(x - h)) / 2h`` for every input entry.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .contrast import graph_infonce, node_infonce_factorized
from .rng import make_rng
from .tensor import Tape, Tensor

STEP = 1e-5
TOLERANCE = 1e-4
KINK_MARGIN = 0.05


@dataclass
class CaseResult:
    name: str
    max_rel_error: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(-1, 1, shape)
    return np.sign(u) * (KINK_MARGIN + np.abs(u))


def _mask(rng, shape, p=0.7):
    m = rng.random(shape) < p
    m[..., 0] = True
    return m


# Each builder returns (inputs, fn) where fn maps Tensors to a Tensor output.
Builder = Callable[[np.random.Generator], tuple[list[np.ndarray], Callable[..., Tensor]]]


def _unary(op, positive=False, kink=False):
    def build(rng):
        if positive:
            x = rng.uniform(0.2, 1.5, (3, 4))
        elif kink:
            x = _away_from_zero(rng, (3, 4))
        else:
            x = rng.uniform(-1, 1, (3, 4))
        return [x], op
    return build


def _binary(op, shape_b=(4,)):
    def build(rng):
        return [rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, shape_b)], op
    return build


def _matmul(rng):
    return [rng.uniform(-1, 1, (2, 3, 4)), rng.uniform(-1, 1, (4, 5))], T.matmul


def _conv(rng):
    dilation = int(rng.integers(1, 3))
    return ([rng.uniform(-1, 1, (2, 3, 7, 3)), rng.uniform(-1, 1, (2, 3, 4))],
            lambda x, w: T.dilated_causal_conv1d(x, w, dilation))


def _gated(rng):
    return [rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (3, 4))], T.gated_activation


def _dropout(rng):
    return [rng.uniform(-1, 1, (4, 5))], lambda x: T.dropout(x, 0.3)


def _batch_norm(rng):
    def fn(x, g, b):
        state = {"mean": np.zeros(3), "var": np.ones(3)}
        return T.batch_norm(x, g, b, state)
    return [rng.uniform(-1, 1, (5, 3)), rng.uniform(0.5, 1.5, 3), rng.uniform(-1, 1, 3)], fn


def _reduce(op, axis):
    def build(rng):
        return [rng.uniform(-1, 1, (3, 4, 2))], lambda x: op(x, axis=axis)
    return build


def _l2(rng):
    return [_away_from_zero(rng, (3, 4))], T.l2_normalize


def _concat(rng):
    return ([rng.uniform(-1, 1, (2, 3)), rng.uniform(-1, 1, (2, 2))],
            lambda a, b: T.concat([a, b], axis=1))


def _slice(rng):
    return [rng.uniform(-1, 1, (4, 5))], lambda x: T.slice(x, (np.s_[1:3], np.s_[::2]))


def _reshape(rng):
    return [rng.uniform(-1, 1, (3, 4))], lambda x: T.reshape(x, (2, 6))


def _transpose(rng):
    return [rng.uniform(-1, 1, (2, 3, 4))], lambda x: T.transpose(x, (2, 0, 1))


def _logsumexp(rng):
    mask = _mask(rng, (4, 6))
    return [rng.uniform(-1, 1, (4, 6))], lambda x: T.masked_logsumexp(x, mask, axis=1)


def _graph_loss(rng):
    m, d = 6, 4
    allowed = _mask(rng, (m, m), 0.6)
    np.fill_diagonal(allowed, False)
    allowed[np.arange(m), (np.arange(m) + 1) % m] = True
    tau = float(rng.uniform(0.1, 1.0))
    return ([rng.uniform(-1, 1, (m, d)), rng.uniform(-1, 1, (m, d))],
            lambda a, b: graph_infonce(a, b, allowed, tau))


def _node_loss(rng):
    m, n, d = 3, 4, 3
    sp = ~np.eye(n, dtype=bool) & (rng.random((n, n)) < 0.7)
    tp = ~np.eye(m, dtype=bool)
    tau = float(rng.uniform(0.1, 1.0))
    return ([rng.uniform(-1, 1, (m, n, d)), rng.uniform(-1, 1, (m, n, d))],
            lambda a, b: node_infonce_factorized(a, b, sp, tp, tau))


CASES: dict[str, Builder] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub, (3, 1)),
    "mul": _binary(T.mul),
    "neg": _unary(T.neg),
    "relu": _unary(T.relu, kink=True),
    "abs": _unary(T.abs, kink=True),
    "exp": _unary(T.exp),
    "log": _unary(T.log, positive=True),
    "tanh": _unary(T.tanh),
    "sigmoid": _unary(T.sigmoid),
    "gated_activation": _gated,
    "matmul": _matmul,
    "dilated_causal_conv1d": _conv,
    "dropout": _dropout,
    "batch_norm": _batch_norm,
    "sum": _reduce(T.sum, 1),
    "mean": _reduce(T.mean, (0, 2)),
    "l2_normalize": _l2,
    "concat": _concat,
    "slice": _slice,
    "reshape": _reshape,
    "transpose": _transpose,
    "masked_logsumexp": _logsumexp,
    "graph_infonce": _graph_loss,
    "node_infonce_factorized": _node_loss,
}


def _scalar(fn, arrays, weight, tape_seed, grad=False):
    tape = Tape("train", seed=tape_seed)
    with tape:
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*leaves)
        loss = T.sum(out * weight) if out.size > 1 else out
    if not grad:
        return loss.item()
    T.backward(tape, loss)
    return [leaf.grad for leaf in leaves]


def check_case(name: str, instances: int = 20, seed: int = 0, step: float = STEP) -> CaseResult:
    build = CASES[name]
    worst = 0.0
    for i in range(instances):
        rng = make_rng(seed, "gradcheck:" + name, i)
        arrays, fn = build(rng)
        with Tape("eval"):
            out_shape = fn(*[Tensor(a) for a in arrays]).shape
        weight = rng.uniform(-1, 1, out_shape)
        analytic = _scalar(fn, arrays, weight, i, grad=True)
        for k, base in enumerate(arrays):
            numeric = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                shifted = [a.copy() for a in arrays]
                shifted[k][idx] = base[idx] + step
                up = _scalar(fn, shifted, weight, i)
                shifted[k][idx] = base[idx] - step
                down = _scalar(fn, shifted, weight, i)
                numeric[idx] = (up - down) / (2 * step)
            worst = max(worst, relative_error(analytic[k], numeric))
    return CaseResult(name, worst, instances)


def run_gradcheck(instances: int = 20, seed: int = 0, names=None) -> tuple[list[CaseResult], float]:
    """Run every case; returns the results and the wall-clock seconds taken."""
    t0 = time.perf_counter()
    results = [check_case(n, instances, seed) for n in (names or CASES)]
    return results, time.perf_counter() - t0
