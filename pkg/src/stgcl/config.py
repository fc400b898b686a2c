"""Experiment config file: one JSON document, strictly validated."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentSpec
from .data import TimeSeriesDataset, read_series_csv, read_stgs, synth_generate
from .graph import DEFAULT_THRESHOLD, SensorGraph, build_adjacency, read_edge_list
from .model import EncoderConfig
from .train import TrainConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class SynthConfig:
    nodes: int = 15
    days: int = 30
    steps_per_day: int = 48
    seed: int = 0
    noise_std: float = 4.0
    latent_std: float = 12.0
    latent_rho: float = 0.92


@dataclass
class DatasetConfig:
    path: str | None = None
    format: str = "stgs"
    steps_per_day: int | None = None
    interval_minutes: int | None = None
    synth: SynthConfig | None = None
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    history: int = 12
    horizon: int = 12


@dataclass
class GraphConfig:
    edges: str | None = None
    threshold: float = DEFAULT_THRESHOLD


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=lambda: DatasetConfig(synth=SynthConfig()))
    graph: GraphConfig = field(default_factory=GraphConfig)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        ds = dataclasses.asdict(self.dataset)
        ds["ratios"] = list(self.dataset.ratios)
        return {
            "dataset": ds,
            "graph": dataclasses.asdict(self.graph),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "output_dir": self.output_dir,
        }


def _check_keys(block: dict, cls, where: str, problems: list[str]) -> dict:
    if not isinstance(block, dict):
        problems.append(f"{where}: expected an object")
        return {}
    names = {f.name for f in dataclasses.fields(cls)}
    for key in block:
        if key not in names:
            problems.append(f"{where}.{key}: unknown key")
    return {k: v for k, v in block.items() if k in names}


def _build(cls, kwargs: dict, where: str, problems: list[str]):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{where}: {exc}")
        return None


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a config mapping, reporting every offending key at once."""
    problems: list[str] = []
    top = _check_keys(raw, ExperimentConfig, "config", problems)

    # no dataset block at all means the default synthetic set
    ds_raw = _check_keys(top.get("dataset", {"synth": {}}), DatasetConfig, "dataset", problems)
    synth = None
    if ds_raw.get("synth") is not None:
        synth = _build(SynthConfig, _check_keys(ds_raw["synth"], SynthConfig, "dataset.synth", problems),
                       "dataset.synth", problems)
    ds_raw["synth"] = synth
    if "ratios" in ds_raw:
        ds_raw["ratios"] = tuple(ds_raw["ratios"])
    dataset = _build(DatasetConfig, ds_raw, "dataset", problems)
    if dataset is not None:
        if dataset.synth is None and dataset.path is None:
            problems.append("dataset: one of 'path' or 'synth' is required")
        if dataset.format not in ("stgs", "csv"):
            problems.append(f"dataset.format: expected 'stgs' or 'csv', got {dataset.format!r}")
        if dataset.format == "csv" and dataset.path and (dataset.steps_per_day is None):
            problems.append("dataset.steps_per_day: required for CSV input")

    graph = _build(GraphConfig, _check_keys(top.get("graph", {}), GraphConfig, "graph", problems),
                   "graph", problems)

    model_raw = _check_keys(top.get("model", {}), EncoderConfig, "model", problems)
    if dataset is not None:
        model_raw.setdefault("history", dataset.history)
        model_raw.setdefault("horizon", dataset.horizon)
    model = _build(EncoderConfig, model_raw, "model", problems)

    train_raw = _check_keys(top.get("train", {}), TrainConfig, "train", problems)
    if "augment" in train_raw:
        specs = []
        for i, spec in enumerate(train_raw["augment"]):
            built = _build(AugmentSpec, _check_keys(spec, AugmentSpec, f"train.augment[{i}]", problems),
                           f"train.augment[{i}]", problems)
            if built is not None:
                specs.append(built)
        train_raw["augment"] = specs
    train = _build(TrainConfig, train_raw, "train", problems)

    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(dataset, graph, model, train, top.get("output_dir", "runs/default"))


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"{path}: {exc}"]) from None
    return parse_config(raw)


def build_data(exp: ExperimentConfig, base_dir=None) -> tuple[TimeSeriesDataset, SensorGraph]:
    """Materialize the dataset and sensor graph an experiment describes."""
    ds = exp.dataset
    base = Path(base_dir) if base_dir is not None else Path(".")
    common = dict(ratios=ds.ratios, history=ds.history, horizon=ds.horizon)
    if ds.synth is not None and ds.path is None:
        s = ds.synth
        dataset = synth_generate(s.nodes, s.days, s.steps_per_day, s.seed, s.noise_std,
                                 s.latent_std, s.latent_rho, ds.ratios)
        if (ds.history, ds.horizon) != (12, 12):
            dataset = TimeSeriesDataset(dataset.series, dataset.interval_minutes, dataset.steps_per_day,
                                        distances=dataset.distances, meta=dataset.meta, **common)
    else:
        path = base / ds.path
        if ds.format == "stgs":
            series, spd, interval = read_stgs(path)
        else:
            series, _ = read_series_csv(path)
            spd = ds.steps_per_day
            interval = 1440 // spd
        spd = ds.steps_per_day or spd
        interval = ds.interval_minutes or interval
        dataset = TimeSeriesDataset(series, interval, spd, **common)
    if exp.graph.edges is not None:
        dist = read_edge_list(base / exp.graph.edges, dataset.num_nodes)
    elif dataset.distances is not None:
        dist = dataset.distances
    else:
        raise ConfigError(["graph.edges: required when the dataset carries no distances"])
    graph = build_adjacency(dist, exp.graph.threshold)
    if graph.num_nodes != dataset.num_nodes:
        raise ConfigError([f"graph has {graph.num_nodes} nodes but dataset has {dataset.num_nodes}"])
    return dataset, graph


def array_digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()[:16]
