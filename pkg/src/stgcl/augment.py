"""The four STG augmentations and the orthonormal DCT pair they rely on."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import scipy.fft

from .data import InstanceBatch
from .rng import make_rng

METHODS = ("edge_mask", "input_mask", "temporal_shift", "input_smooth")
MASK_VALUE = -1.0


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentSpec:
    method: str = "input_mask"
    r_em: float = 0.1
    r_im: float = 0.01
    r_ts: float = 0.5
    r_is: float = 0.5
    e_is: int = 20

    def __post_init__(self):
        if self.method not in METHODS:
            raise AugmentError(f"unknown augmentation {self.method!r}; expected one of {METHODS}")
        for name in ("r_em", "r_im", "r_ts", "r_is"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise AugmentError(f"{name} must be in [0, 1], got {v}")
        if self.e_is < 0:
            raise AugmentError(f"e_is must be non-negative, got {self.e_is}")

    def to_dict(self) -> dict:
        return asdict(self)


def edge_mask(adjacency: np.ndarray, r_em: float, rng: np.random.Generator) -> np.ndarray:
    """Zero each entry whose uniform draw falls below ``r_em``."""
    a = np.asarray(adjacency, dtype=np.float64)
    keep = rng.random(a.shape) >= r_em
    return np.where(keep, a, 0.0)


def input_mask(x: np.ndarray, r_im: float, rng: np.random.Generator) -> np.ndarray:
    """Replace entries of the (normalized) target channel by -1 with probability ``r_im``."""
    x = np.asarray(x, dtype=np.float64)
    keep = rng.random(x.shape) >= r_im
    return np.where(keep, x, MASK_VALUE)


def temporal_shift(x: np.ndarray, x_next: np.ndarray, alpha) -> np.ndarray:
    """``alpha * x + (1 - alpha) * x_next``; ``alpha`` broadcasts over the leading axis."""
    x = np.asarray(x, dtype=np.float64)
    x_next = np.asarray(x_next, dtype=np.float64)
    if x.shape != x_next.shape:
        raise AugmentError(f"temporal_shift windows differ in shape: {x.shape} vs {x_next.shape}")
    a = np.asarray(alpha, dtype=np.float64)
    a = a.reshape(a.shape + (1,) * (x.ndim - a.ndim))
    return a * x + (1.0 - a) * x_next


def dct(x, axis: int = 0) -> np.ndarray:
    """Orthonormal DCT-II along ``axis``."""
    return scipy.fft.dct(np.asarray(x, dtype=np.float64), type=2, norm="ortho", axis=axis)


def idct(c, axis: int = 0) -> np.ndarray:
    """Inverse of :func:`dct` (orthonormal DCT-III)."""
    return scipy.fft.idct(np.asarray(c, dtype=np.float64), type=2, norm="ortho", axis=axis)


def smoothing_scales(length: int, e_is: int, num_nodes: int, r_is: float,
                     rng: np.random.Generator, adj_norm: np.ndarray | None = None) -> np.ndarray:
    """Random high-frequency scales of shape ``(length - e_is, num_nodes)``.

    Draws are U(r_is, 1) and then mixed over two graph hops. The mix uses the
    rows of the row-stochastic matrix, so every node's scale is a convex
    combination of its neighborhood's draws and stays inside [r_is, 1].
    """
    if e_is > length:
        raise AugmentError(f"e_is={e_is} exceeds sequence length {length}")
    m = rng.uniform(r_is, 1.0, size=(length - e_is, num_nodes))
    if adj_norm is not None:
        two_hop = adj_norm @ adj_norm
        m = m @ two_hop.T
    return m


def smooth_coefficients(full: np.ndarray, scales: np.ndarray, e_is: int) -> np.ndarray:
    """DCT of ``full`` (L x N) with coefficients ``e_is:`` multiplied by ``scales``."""
    coef = dct(full, axis=0)
    coef[e_is:] = coef[e_is:] * scales
    return coef


def input_smooth(full: np.ndarray, e_is: int, r_is: float, rng: np.random.Generator,
                 adj_norm: np.ndarray | None = None, history: int | None = None) -> np.ndarray:
    """Frequency-domain smoothing of a history+future window.

    ``full`` is ``(L, N)``. Returns the first ``history`` steps of the
    reconstruction, or all ``L`` when ``history`` is None.
    """
    full = np.asarray(full, dtype=np.float64)
    length, n = full.shape
    scales = smoothing_scales(length, e_is, n, r_is, rng, adj_norm)
    out = idct(smooth_coefficients(full, scales, e_is), axis=0)
    return out if history is None else out[:history]


def _instance_rng(seed: int, purpose: str, epoch: int, view: int, start: int) -> np.random.Generator:
    return make_rng(seed, purpose, epoch, view, start)


def augment_batch(batch: InstanceBatch, specs: Sequence[AugmentSpec], adjacency: np.ndarray,
                  adj_norm: np.ndarray, seed: int, epoch: int, batch_no: int,
                  view: int = 0) -> tuple[np.ndarray, np.ndarray | None]:
    """Second view of a batch.

    Returns ``(x, adjacency)`` where ``x`` is the augmented ``(M, S, N, 2)``
    input (only the target channel changes) and ``adjacency`` is the masked
    raw adjacency shared by the whole batch, or None if no edge masking ran.
    Per-instance randomness is keyed by the instance's absolute start step.
    """
    x = batch.x.copy()
    target = x[..., 0]
    s = target.shape[1]
    masked_adj = None
    for spec in specs:
        if spec.method == "edge_mask":
            rng = make_rng(seed, "edge_mask", epoch, view, batch_no)
            base = adjacency if masked_adj is None else masked_adj
            masked_adj = edge_mask(base, spec.r_em, rng)
        elif spec.method == "input_mask":
            for i, start in enumerate(batch.starts):
                target[i] = input_mask(target[i], spec.r_im, _instance_rng(seed, "input_mask", epoch, view, start))
        elif spec.method == "temporal_shift":
            alpha = np.array([
                _instance_rng(seed, "temporal_shift", epoch, view, start).uniform(spec.r_ts, 1.0)
                for start in batch.starts
            ])
            alpha = np.where(batch.has_next, alpha, 1.0)
            target[:] = temporal_shift(target, batch.next_x, alpha)
        elif spec.method == "input_smooth":
            for i, start in enumerate(batch.starts):
                full = np.concatenate([target[i], batch.full[i, s:]], axis=0)
                rng = _instance_rng(seed, "input_smooth", epoch, view, start)
                target[i] = input_smooth(full, spec.e_is, spec.r_is, rng, adj_norm, history=s)
    return x, masked_adj
