"""Cosine similarity, negative filtering and the two InfoNCE variants."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .graph import SensorGraph
from .tensor import Tensor

HALF_DAY_MINUTES = 720.0


class ContrastError(ValueError):
    pass


@dataclass(frozen=True)
class FilterSpec:
    r_f: float = 60.0                 # minutes
    spatial: bool = True
    steps_per_day: int = 288
    interval_minutes: int = 5

    def __post_init__(self):
        if self.r_f < 0:
            raise ContrastError(f"r_f must be >= 0, got {self.r_f}")
        if self.r_f >= HALF_DAY_MINUTES:
            raise ContrastError(
                f"r_f={self.r_f} min is at least half a day; circular time-of-day distance "
                "never exceeds 12 h so every negative would be filtered")


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ContrastError("cosine similarity of a zero vector is undefined")
    return float(u @ v / (nu * nv))


def pairwise_cosine(a, b) -> np.ndarray:
    """``out[i, j] = sim(a[i], b[j])`` for row-stacked vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if (na == 0).any() or (nb == 0).any():
        raise ContrastError("cosine similarity of a zero vector is undefined")
    return (a / na) @ (b / nb).T


def circular_slot_distance(a, b, steps_per_day: int) -> np.ndarray:
    diff = np.abs(np.asarray(a)[..., :, None] - np.asarray(b)[..., None, :]) % steps_per_day
    return np.minimum(diff, steps_per_day - diff)


def temporal_filter(slots, spec: FilterSpec) -> np.ndarray:
    """Boolean ``(M, M)`` matrix: ``allowed[i, j]`` iff j is an acceptable negative for i.

    j qualifies when j != i and the circular time-of-day gap between the two
    start slots, in minutes, exceeds ``r_f``.
    """
    slots = np.asarray(slots, dtype=np.int64)
    if slots.size and (slots.min() < 0 or slots.max() >= spec.steps_per_day):
        raise ContrastError(f"slots must lie in [0, {spec.steps_per_day})")
    gap = circular_slot_distance(slots, slots, spec.steps_per_day) * spec.interval_minutes
    allowed = gap > spec.r_f
    if spec.r_f == 0:
        allowed = np.ones_like(allowed)
    np.fill_diagonal(allowed, False)
    return allowed


def spatial_filter(graph: SensorGraph) -> np.ndarray:
    """Boolean ``(N, N)`` matrix of excluded pairs: first-order neighbors."""
    n = graph.num_nodes
    excluded = np.zeros((n, n), dtype=bool)
    for i, nbrs in enumerate(graph.neighbors):
        excluded[i, list(nbrs)] = True
    return excluded


def spatial_negatives(graph: SensorGraph | None, num_nodes: int, enabled: bool = True) -> np.ndarray:
    """Boolean ``(N, N)`` allowed matrix for same-time-step negatives."""
    allowed = ~np.eye(num_nodes, dtype=bool)
    if enabled and graph is not None:
        allowed &= ~spatial_filter(graph)
    return allowed


def negative_sets(allowed: np.ndarray) -> list[frozenset]:
    return [frozenset(np.flatnonzero(row).tolist()) for row in np.asarray(allowed)]


def _check_tau(tau: float) -> None:
    if tau <= 0:
        raise ContrastError(f"temperature must be positive, got {tau}")


def graph_infonce(z1: Tensor, z2: Tensor, allowed, tau: float, r_f: float | None = None) -> Tensor:
    """Filtered InfoNCE over ``M`` graph summaries.

    ``z1[i]`` is the anchor, ``z2[i]`` its positive, and ``z2[j]`` for
    ``allowed[i, j]`` its negatives. The positive is not in the denominator,
    so the loss can go below zero.
    """
    _check_tau(tau)
    if z1.shape != z2.shape or z1.ndim != 2:
        raise T.ShapeError("graph_infonce", z1.shape, z2.shape)
    m = z1.shape[0]
    if m < 2:
        raise ContrastError("graph-level contrast needs at least 2 instances per batch")
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.shape != (m, m):
        raise T.ShapeError("graph_infonce", allowed.shape, (m, m), detail="negative mask")
    empty = np.flatnonzero(~allowed.any(axis=1))
    if empty.size:
        where = f" at r_f={r_f} min" if r_f is not None else ""
        raise ContrastError(f"anchor {int(empty[0])} has no negatives left after filtering{where}")
    logits = (T.l2_normalize(z1) @ T.transpose(T.l2_normalize(z2), (1, 0))) * (1.0 / tau)
    pos = T.sum(logits * np.eye(m), axis=1)
    return T.mean(T.masked_logsumexp(logits, allowed, axis=1) - pos)


def node_infonce_factorized(z1: Tensor, z2: Tensor, spatial_allowed, temporal_allowed,
                            tau: float, r_f: float | None = None) -> Tensor:
    """Node-level InfoNCE with negatives factorized over space and time.

    For anchor (m, i) the negatives are ``z2[m, j]`` for spatially allowed j
    and ``z2[m', i]`` for temporally allowed m'. Averaged over all M*N anchors.
    """
    _check_tau(tau)
    if z1.shape != z2.shape or z1.ndim != 3:
        raise T.ShapeError("node_infonce_factorized", z1.shape, z2.shape)
    m, n, _ = z1.shape
    if m < 2 and n < 2:
        raise ContrastError("node-level contrast needs M >= 2 or N >= 2")
    sp = np.asarray(spatial_allowed, dtype=bool)
    tp = np.asarray(temporal_allowed, dtype=bool)
    if sp.shape != (n, n) or tp.shape != (m, m):
        raise T.ShapeError("node_infonce_factorized", sp.shape, tp.shape, detail=f"masks for M={m}, N={n}")
    # mask[m, i, :n] spatial part, mask[m, i, n:] temporal part
    mask = np.concatenate([np.broadcast_to(sp, (m, n, n)),
                           np.broadcast_to(tp[:, None, :], (m, n, m))], axis=2)
    empty = np.argwhere(~mask.any(axis=2))
    if empty.size:
        mi, ni = (int(v) for v in empty[0])
        where = f" at r_f={r_f} min" if r_f is not None else ""
        raise ContrastError(f"anchor (instance {mi}, node {ni}) has no negatives left after filtering{where}")
    a = T.l2_normalize(z1)
    b = T.l2_normalize(z2)
    spatial = (a @ T.transpose(b, (0, 2, 1))) * (1.0 / tau)               # (M, N, N)
    a_t = T.transpose(a, (1, 0, 2))
    b_t = T.transpose(b, (1, 0, 2))
    temporal = T.transpose((a_t @ T.transpose(b_t, (0, 2, 1))) * (1.0 / tau), (1, 0, 2))   # (M, N, M)
    pos = T.sum(spatial * np.eye(n), axis=2)
    logits = T.concat([spatial, temporal], axis=2)
    return T.mean(T.masked_logsumexp(logits, mask, axis=2) - pos)
