"""Sensor graph: thresholded Gaussian-kernel adjacency and neighborhoods."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_THRESHOLD = 0.1


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class SensorGraph:
    adjacency: np.ndarray
    normalized: np.ndarray = field(repr=False)
    neighbors: tuple[frozenset, ...] = field(repr=False)

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    @classmethod
    def from_adjacency(cls, adjacency) -> "SensorGraph":
        a = np.array(adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise GraphError(f"adjacency must be square, got shape {a.shape}")
        if not np.isfinite(a).all() or (a < 0).any() or (a > 1).any():
            raise GraphError("adjacency weights must lie in [0, 1]")
        a.setflags(write=False)
        norm = normalize_adjacency(a)
        norm.setflags(write=False)
        pattern = (a > 0) | (a.T > 0)
        np.fill_diagonal(pattern, False)
        nbrs = tuple(frozenset(np.flatnonzero(row).tolist()) for row in pattern)
        return cls(a, norm, nbrs)


def distance_matrix_from_edges(edges, num_nodes: int) -> np.ndarray:
    """Dense distance matrix with ``inf`` for pairs not listed."""
    dist = np.full((num_nodes, num_nodes), np.inf)
    for src, dst, cost in edges:
        src, dst = int(src), int(dst)
        if not (0 <= src < num_nodes and 0 <= dst < num_nodes):
            raise GraphError(f"edge ({src}, {dst}) outside node range 0..{num_nodes - 1}")
        dist[src, dst] = float(cost)
    return dist


def build_adjacency(distances, threshold: float = DEFAULT_THRESHOLD) -> SensorGraph:
    """Gaussian kernel ``exp(-d^2 / sigma^2)`` kept where the weight is >= threshold.

    ``distances`` is an N x N matrix where ``inf``/``nan`` marks a missing
    pair. sigma is the population std of every finite distance supplied
    (diagonal included when given). Self distances are then taken as 0, so
    every node gets self-weight 1.
    """
    d = np.array(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise GraphError(f"distance matrix must be square, got shape {d.shape}")
    d[np.isnan(d)] = np.inf
    if (d < 0).any():
        raise GraphError("negative distance")
    if not 0.0 <= threshold <= 1.0:
        # a distance-scale k here would silently change meaning; refuse it
        raise GraphError(f"threshold applies to kernel weights and must be in [0, 1], got {threshold}")
    provided = d[np.isfinite(d)]
    if provided.size == 0:
        raise GraphError("no finite distances provided")
    sigma = provided.std()
    if sigma == 0:
        raise GraphError("distance standard deviation is zero; kernel width undefined")
    np.fill_diagonal(d, 0.0)
    with np.errstate(over="ignore"):
        w = np.exp(-np.square(d / sigma))
    w[w < threshold] = 0.0
    return SensorGraph.from_adjacency(w)


def normalize_adjacency(adjacency) -> np.ndarray:
    """Row-stochastic random-walk matrix ``D^-1 (A + I)``."""
    a = np.asarray(adjacency, dtype=np.float64)
    a_hat = a + np.eye(a.shape[0])
    deg = a_hat.sum(axis=1, keepdims=True)
    return a_hat / deg


def first_order_neighbors(graph: SensorGraph, node: int) -> frozenset:
    if not 0 <= node < graph.num_nodes:
        raise IndexError(f"node {node} out of range for graph with {graph.num_nodes} nodes")
    return graph.neighbors[node]


def read_edge_list(path, num_nodes: int | None = None) -> np.ndarray:
    """Read a ``from,to,cost`` CSV into a dense distance matrix."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["from", "to", "cost"]:
            raise GraphError(f"{path}: expected header 'from,to,cost', got {','.join(header)!r}")
        edges = [(int(r[0]), int(r[1]), float(r[2])) for r in reader if r]
    if num_nodes is None:
        num_nodes = 1 + max(max(s, t) for s, t, _ in edges) if edges else 0
    return distance_matrix_from_edges(edges, num_nodes)


def write_edge_list(path, distances) -> None:
    d = np.asarray(distances)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["from", "to", "cost"])
        for i, j in zip(*np.nonzero(np.isfinite(d))):
            w.writerow([int(i), int(j), repr(float(d[i, j]))])
