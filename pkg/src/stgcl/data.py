"""Sensor series: synthesis, I/O, z-score, partitions, windows and batches."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .graph import build_adjacency
from .rng import make_rng

MINUTES_PER_DAY = 1440
STGS_MAGIC = b"STGS"
STGS_VERSION = 1
_STGS_HEADER = struct.Struct("<4sHIIIH")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ZScore:
    mean: float
    std: float

    @classmethod
    def fit(cls, values: np.ndarray) -> "ZScore":
        values = np.asarray(values, dtype=np.float64)
        if values.size == 0:
            raise DataError("cannot fit z-score on an empty train split")
        std = float(values.std())
        if std == 0:
            raise DataError("train split has zero standard deviation")
        return cls(float(values.mean()), std)

    def apply(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z) * self.std + self.mean


def split_counts(total: int, ratios: Sequence[float] = (0.6, 0.2, 0.2),
                 history: int = 12, horizon: int = 12) -> tuple[int, int, int]:
    """Step counts per partition: floor, floor, remainder."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise DataError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    # the epsilon keeps e.g. 0.6 * 1440 from flooring to 863
    train = math.floor(ratios[0] * total + 1e-9)
    val = math.floor(ratios[1] * total + 1e-9)
    test = total - train - val
    need = history + horizon
    for name, n in zip(("train", "val", "test"), (train, val, test)):
        if n < need:
            raise DataError(f"{name} partition has {n} steps, fewer than history+horizon={need}")
    return train, val, test


def window_count(steps: int, history: int = 12, horizon: int = 12) -> int:
    return steps - (history + horizon) + 1


@dataclass
class TimeSeriesDataset:
    series: np.ndarray                       # (T_total, N), original scale
    interval_minutes: int = 5
    steps_per_day: int = 288
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    history: int = 12
    horizon: int = 12
    distances: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=np.float64)
        if self.series.ndim != 2:
            raise DataError(f"series must be (steps, nodes), got shape {self.series.shape}")
        if not np.isfinite(self.series).all():
            raise DataError("series contains non-finite values")
        if self.steps_per_day * self.interval_minutes != MINUTES_PER_DAY:
            raise DataError(
                f"steps_per_day ({self.steps_per_day}) x interval ({self.interval_minutes} min) != 1440")
        self.ratios = tuple(float(r) for r in self.ratios)
        self.counts = split_counts(len(self.series), self.ratios, self.history, self.horizon)
        train = self.series[:self.counts[0]]
        self.scaler = ZScore.fit(train)

    @property
    def num_nodes(self) -> int:
        return self.series.shape[1]

    @property
    def num_steps(self) -> int:
        return self.series.shape[0]

    def bounds(self, name: str) -> tuple[int, int]:
        tr, va, _ = self.counts
        return {"train": (0, tr), "val": (tr, tr + va), "test": (tr + va, self.num_steps)}[name]

    def instances(self, name: str) -> "InstanceSet":
        return make_instances(self, name)


@dataclass
class InstanceBatch:
    x: np.ndarray            # (M, S, N, 2): normalized target, time of day
    y: np.ndarray            # (M, T, N, 1): original scale
    slots: np.ndarray        # (M,) slot within day of the first input step
    starts: np.ndarray       # (M,) absolute index of the first input step
    index: np.ndarray        # (M,) instance index within its partition
    next_x: np.ndarray       # (M, S, N): normalized target one step later
    has_next: np.ndarray     # (M,) bool
    full: np.ndarray         # (M, S+T, N): normalized history and future

    def __len__(self) -> int:
        return len(self.x)


class InstanceSet:
    """All sliding windows of one partition."""

    def __init__(self, dataset: TimeSeriesDataset, start: int, stop: int):
        s, t = dataset.history, dataset.horizon
        if stop - start < s + t:
            raise DataError(f"partition [{start}, {stop}) shorter than history+horizon={s + t}")
        self.dataset = dataset
        self.start, self.stop = start, stop
        self.raw = dataset.series[start:stop]
        self.norm = dataset.scaler.apply(self.raw)
        steps = np.arange(start, stop)
        self.tod = (steps % dataset.steps_per_day) / dataset.steps_per_day
        self.history, self.horizon = s, t
        self._hist = np.arange(s)
        self._full = np.arange(s + t)
        self._fut = np.arange(s, s + t)

    def __len__(self) -> int:
        return window_count(self.stop - self.start, self.history, self.horizon)

    def gather(self, idx) -> InstanceBatch:
        idx = np.asarray(idx, dtype=np.int64)
        n = len(self)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError(f"instance index out of range 0..{n - 1}")
        hist = idx[:, None] + self._hist
        x = np.stack([self.norm[hist], np.broadcast_to(self.tod[hist][..., None], self.norm[hist].shape)],
                     axis=-1)
        y = self.raw[idx[:, None] + self._fut][..., None]
        has_next = idx + 1 < n
        nxt = np.where(has_next, idx + 1, idx)
        return InstanceBatch(
            x=x, y=y,
            slots=(self.start + idx) % self.dataset.steps_per_day,
            starts=self.start + idx,
            index=idx,
            next_x=self.norm[nxt[:, None] + self._hist],
            has_next=has_next,
            full=self.norm[idx[:, None] + self._full],
        )

    def all(self) -> InstanceBatch:
        return self.gather(np.arange(len(self)))


def make_instances(dataset: TimeSeriesDataset, partition: str) -> InstanceSet:
    start, stop = dataset.bounds(partition)
    return InstanceSet(dataset, start, stop)


def batch_iter(instances: InstanceSet, batch_size: int, seed: int = 0, epoch: int = 0,
               shuffle: bool = True, contrast: bool = True) -> Iterator[InstanceBatch]:
    """Yield batches; the permutation is keyed by (seed, epoch), last short batch kept."""
    if batch_size < 1 or (contrast and batch_size < 2):
        raise DataError(f"batch size {batch_size} too small (contrast needs at least 2)")
    n = len(instances)
    order = make_rng(seed, "shuffle", epoch).permutation(n) if shuffle else np.arange(n)
    for lo in range(0, n, batch_size):
        yield instances.gather(order[lo:lo + batch_size])


# -- synthetic data -----------------------------------------------------------

def synth_generate(num_nodes: int = 15, days: int = 30, steps_per_day: int = 48, seed: int = 0,
                   noise_std: float = 4.0, latent_std: float = 12.0, latent_rho: float = 0.92,
                   ratios=(0.6, 0.2, 0.2)) -> TimeSeriesDataset:
    """Traffic-like series on a random geometric sensor graph.

    Node n at absolute step s (slot u = s mod steps_per_day) reads::

        level_n
        + (amp1_n sin(2 pi u / spd + ph1_n) + amp2_n sin(4 pi u / spd + ph2_n))
          * (1 + week_n cos(2 pi s / (7 spd)))
        + latent_std * (A_norm^2 e_s)_n + noise

    where ``e`` is a unit-variance AR(1) process per node, mixed over the
    graph so that neighbors share fluctuations.
    """
    if num_nodes < 2 or days < 3 or steps_per_day < 1 or MINUTES_PER_DAY % steps_per_day:
        raise DataError(f"invalid synth sizes: nodes={num_nodes} days={days} steps_per_day={steps_per_day}")
    rng = make_rng(seed, "synth")
    pos = rng.random((num_nodes, 2)) * 10.0
    dist = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    graph = build_adjacency(dist)
    coef = {
        "level": 100.0 + 20.0 * rng.standard_normal(num_nodes),
        "amp1": 40.0 + 8.0 * rng.standard_normal(num_nodes),
        "ph1": rng.uniform(-0.5, 0.5, num_nodes),
        "amp2": 12.0 + 3.0 * rng.standard_normal(num_nodes),
        "ph2": rng.uniform(-np.pi, np.pi, num_nodes),
        "week": rng.uniform(0.05, 0.2, num_nodes),
    }
    total = days * steps_per_day
    steps = np.arange(total)[:, None]
    u = 2 * np.pi * (steps % steps_per_day) / steps_per_day
    daily = coef["amp1"] * np.sin(u + coef["ph1"]) + coef["amp2"] * np.sin(2 * u + coef["ph2"])
    weekly = 1.0 + coef["week"] * np.cos(2 * np.pi * steps / (7 * steps_per_day))
    series = coef["level"] + daily * weekly
    if latent_std > 0:
        shocks = rng.standard_normal((total, num_nodes))
        e = np.empty_like(shocks)
        e[0] = shocks[0]
        k = math.sqrt(1 - latent_rho ** 2)
        for s in range(1, total):
            e[s] = latent_rho * e[s - 1] + k * shocks[s]
        mix = graph.normalized @ graph.normalized
        series = series + latent_std * e @ mix.T
    if noise_std > 0:
        series = series + noise_std * rng.standard_normal((total, num_nodes))
    interval = MINUTES_PER_DAY // steps_per_day
    return TimeSeriesDataset(series, interval_minutes=interval, steps_per_day=steps_per_day,
                             ratios=tuple(ratios), distances=dist,
                             meta={k: v.tolist() for k, v in coef.items()} | {"seed": seed})


# -- file formats ---------------------------------------------------------------

def write_stgs(path, series: np.ndarray, steps_per_day: int, interval_minutes: int) -> None:
    series = np.ascontiguousarray(series, dtype="<f8")
    t_total, n = series.shape
    with open(path, "wb") as fh:
        fh.write(_STGS_HEADER.pack(STGS_MAGIC, STGS_VERSION, n, t_total, steps_per_day, interval_minutes))
        fh.write(series.tobytes(order="C"))


def read_stgs(path) -> tuple[np.ndarray, int, int]:
    """Return (series, steps_per_day, interval_minutes)."""
    with open(path, "rb") as fh:
        head = fh.read(_STGS_HEADER.size)
        if len(head) != _STGS_HEADER.size:
            raise DataError(f"{path}: truncated header")
        magic, version, n, t_total, spd, interval = _STGS_HEADER.unpack(head)
        if magic != STGS_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        if version != STGS_VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        body = fh.read()
    if len(body) != 8 * n * t_total:
        raise DataError(f"{path}: expected {8 * n * t_total} data bytes, found {len(body)}")
    series = np.frombuffer(body, dtype="<f8").reshape(t_total, n).astype(np.float64)
    return series, spd, interval


def read_series_csv(path) -> tuple[np.ndarray, list[str]]:
    """CSV with a header of node ids and one row per step."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: empty CSV")
        rows = [[float(v) for v in r] for r in reader if r]
    arr = np.array(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != len(header):
        raise DataError(f"{path}: rows do not match header width {len(header)}")
    return arr, [h.strip() for h in header]
