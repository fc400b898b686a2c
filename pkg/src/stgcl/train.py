"""Training schemes, metrics and run reports."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.stats

from . import __version__
from . import tensor as T
from .augment import AugmentSpec, augment_batch
from .contrast import (HALF_DAY_MINUTES, FilterSpec, graph_infonce, node_infonce_factorized,
                       spatial_negatives, temporal_filter)
from .data import InstanceBatch, TimeSeriesDataset, batch_iter
from .graph import SensorGraph, normalize_adjacency
from .model import (EncoderConfig, ModelParams, decode, encode, project, readout,
                    save_checkpoint)
from .optim import Adam
from .tensor import Tape, Tensor, backward

SCHEMES = ("joint", "pretrain_finetune", "base_only")
LEVELS = ("node", "graph")
LAMBDA_SWEEP = (0.01, 0.05, 0.1, 0.5, 1.0)
MAPE_EPS = 1e-8


class TrainError(ValueError):
    pass


@dataclass
class TrainConfig:
    scheme: str = "joint"
    level: str = "graph"
    lam: float = 0.5
    tau: float = 0.1
    r_f: float = 60.0
    spatial_filter: bool = True
    augment: list[AugmentSpec] = field(default_factory=lambda: [AugmentSpec("input_mask", r_im=0.01)])
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    clip_norm: float | None = 5.0
    seed: int = 0
    patience: int | None = None
    horizons: tuple[int, ...] = (3, 6, 12)
    pretrain_epochs: int = 100
    pretrain_patience: int = 10
    finetune_encoder_lr: float = 1e-4
    finetune_decoder_lr: float = 1e-3
    eval_batch: int = 256

    def __post_init__(self):
        self.augment = [a if isinstance(a, AugmentSpec) else AugmentSpec(**a) for a in self.augment]
        self.horizons = tuple(int(h) for h in self.horizons)
        if self.scheme not in SCHEMES:
            raise TrainError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.level not in LEVELS:
            raise TrainError(f"unknown contrast level {self.level!r}; expected one of {LEVELS}")
        if self.lam < 0:
            raise TrainError(f"lambda must be >= 0, got {self.lam}")
        if self.epochs < 1:
            raise TrainError("epochs must be >= 1")
        if self.tau <= 0:
            raise TrainError(f"tau must be positive, got {self.tau}")
        if not 0 <= self.r_f < HALF_DAY_MINUTES:
            raise TrainError(f"r_f must be in [0, {HALF_DAY_MINUTES:g}) minutes, got {self.r_f}")

    @property
    def uses_contrast(self) -> bool:
        return self.scheme != "base_only" and self.lam > 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = [a.to_dict() for a in self.augment]
        d["horizons"] = list(self.horizons)
        return d


@dataclass
class RunReport:
    seed: int
    config: dict
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    test: dict = field(default_factory=dict)
    pretrain: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    version: str = __version__

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**d)


# -- losses and metrics -------------------------------------------------------------

def prediction_loss(y_hat: Tensor, y) -> Tensor:
    """Mean absolute error over every entry, in original units."""
    y = T.as_tensor(y)
    if y_hat.shape != y.shape:
        raise T.ShapeError("prediction_loss", y_hat.shape, y.shape)
    return T.mean(T.abs(y_hat - y))


def _triple(err: np.ndarray, y: np.ndarray) -> dict:
    support = np.abs(y) > MAPE_EPS
    if not support.any():
        raise TrainError("MAPE undefined: every target is zero")
    return {
        "mae": float(np.mean(np.abs(err))),
        "rmse": float(np.sqrt(np.mean(err * err))),
        "mape": float(np.mean(np.abs(err[support]) / np.abs(y[support])) * 100.0),
    }


def metrics(y_hat, y, horizons: Sequence[int] = (3, 6, 12)) -> dict:
    """MAE / RMSE / MAPE (%) per horizon step and averaged over all steps.

    Arrays are ``(M, T, N[, 1])`` with horizon on axis 1; horizons are 1-based.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise T.ShapeError("metrics", y_hat.shape, y.shape)
    steps = y.shape[1]
    out = {}
    for h in horizons:
        if not 1 <= h <= steps:
            raise TrainError(f"horizon {h} outside 1..{steps}")
        out[f"h{h}"] = _triple(y_hat[:, h - 1] - y[:, h - 1], y[:, h - 1])
    out["average"] = _triple(y_hat - y, y)
    return out


class EarlyStopper:
    """Stop once ``patience`` consecutive updates fail to improve the best value."""

    def __init__(self, patience: int | None):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record ``value``; return True when training should stop."""
        if value < self.best:
            self.best, self.best_epoch, self.bad = value, epoch, 0
            return False
        self.bad += 1
        return self.patience is not None and self.bad >= self.patience


# -- forward helpers -----------------------------------------------------------------

def predict(params: ModelParams, dataset: TimeSeriesDataset, graph: SensorGraph, split: str,
            chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode forecasts for every window of a split: ``(y_hat, y)``."""
    inst = dataset.instances(split)
    preds, targets = [], []
    for lo in range(0, len(inst), chunk):
        batch = inst.gather(np.arange(lo, min(lo + chunk, len(inst))))
        with Tape("eval"):
            preds.append(decode(encode(batch.x, graph.normalized, params), params, dataset.scaler).data)
        targets.append(batch.y)
    return np.concatenate(preds), np.concatenate(targets)


def contrastive_loss(h1: Tensor, h2: Tensor, batch: InstanceBatch, params: ModelParams,
                     cfg: TrainConfig, dataset: TimeSeriesDataset, graph: SensorGraph) -> Tensor:
    fspec = FilterSpec(cfg.r_f, cfg.spatial_filter, dataset.steps_per_day, dataset.interval_minutes)
    temporal = temporal_filter(batch.slots, fspec)
    if cfg.level == "graph":
        z1 = project(readout(h1), params, "proj_graph")
        z2 = project(readout(h2), params, "proj_graph")
        return graph_infonce(z1, z2, temporal, cfg.tau, r_f=cfg.r_f)
    z1 = project(h1, params, "proj_node")
    z2 = project(h2, params, "proj_node")
    spatial = spatial_negatives(graph, h1.shape[1], cfg.spatial_filter)
    return node_infonce_factorized(z1, z2, spatial, temporal, cfg.tau, r_f=cfg.r_f)


def _view(batch: InstanceBatch, cfg: TrainConfig, graph: SensorGraph, epoch: int, batch_no: int,
          view: int) -> tuple[np.ndarray, np.ndarray]:
    x, masked = augment_batch(batch, cfg.augment, graph.adjacency, graph.normalized,
                              cfg.seed, epoch, batch_no, view)
    adj = graph.normalized if masked is None else normalize_adjacency(masked)
    return x, adj


class _RunFiles:
    def __init__(self, out_dir, name: str = "metrics.jsonl"):
        self.dir = Path(out_dir) if out_dir is not None else None
        self.metrics = None
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)
            self.metrics = self.dir / name
            self.metrics.write_text("")

    def log(self, row: dict) -> None:
        if self.metrics is not None:
            with open(self.metrics, "a") as fh:
                fh.write(json.dumps(row) + "\n")


def _context(exc: Exception, epoch: int, batch_no: int) -> Exception:
    exc.args = (f"epoch {epoch} batch {batch_no}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
    return exc


# -- schemes ---------------------------------------------------------------------

def _fit_forecaster(params: ModelParams, opt: Adam, cfg: TrainConfig, dataset: TimeSeriesDataset,
                    graph: SensorGraph, report: RunReport, files: _RunFiles,
                    contrast: bool, trainable: dict[str, Tensor]) -> ModelParams:
    train_set = dataset.instances("train")
    stopper = EarlyStopper(cfg.patience)
    best = None
    for epoch in range(cfg.epochs):
        pred_sum, cl_sum, n_batches = 0.0, 0.0, 0
        for batch_no, batch in enumerate(batch_iter(train_set, cfg.batch_size, cfg.seed, epoch,
                                                    contrast=contrast)):
            try:
                tape = Tape("train", seed=cfg.seed, key=(epoch, batch_no))
                with tape:
                    tape.register(trainable)
                    h1 = encode(batch.x, graph.normalized, params)
                    l_pred = prediction_loss(decode(h1, params, dataset.scaler), batch.y)
                    loss = l_pred
                    if contrast:
                        x2, adj2 = _view(batch, cfg, graph, epoch, batch_no, view=1)
                        h2 = encode(x2, adj2, params)
                        l_cl = contrastive_loss(h1, h2, batch, params, cfg, dataset, graph)
                        loss = l_pred + l_cl * cfg.lam
                        cl_sum += l_cl.item()
                grads = backward(tape, loss)
                opt.step(grads)
            except (ValueError, ArithmeticError, RuntimeError) as exc:
                raise _context(exc, epoch, batch_no)
            pred_sum += l_pred.item()
            n_batches += 1
        y_hat, y = predict(params, dataset, graph, "val", cfg.eval_batch)
        val_mae = float(np.mean(np.abs(y_hat - y)))
        row = {"epoch": epoch, "l_pred": pred_sum / n_batches,
               "l_cl": cl_sum / n_batches if contrast else None, "val_mae": val_mae}
        report.epochs.append(row)
        files.log(row)
        improved = val_mae < stopper.best
        stop = stopper.update(val_mae, epoch)
        if improved:
            best = params.snapshot()
            report.best_epoch = epoch
        if stop:
            break
    params.restore(best)
    return params


def _finish(params: ModelParams, cfg: TrainConfig, dataset: TimeSeriesDataset, graph: SensorGraph,
            report: RunReport, files: _RunFiles, started: float, echo: dict) -> RunReport:
    y_hat, y = predict(params, dataset, graph, "test", cfg.eval_batch)
    report.test = metrics(y_hat, y, cfg.horizons)
    report.wall_clock = time.perf_counter() - started
    if files.dir is not None:
        save_checkpoint(files.dir / "ckpt_best.stgc", params, echo)
        (files.dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    return report


def _echo(cfg: TrainConfig, model: EncoderConfig, extra: dict | None) -> dict:
    echo = dict(extra or {})
    echo["train"] = cfg.to_dict()
    echo["model"] = model.to_dict()
    echo["version"] = __version__
    return echo


def train_joint(cfg: TrainConfig, dataset: TimeSeriesDataset, graph: SensorGraph,
                model: EncoderConfig | None = None, out_dir=None, echo: dict | None = None) -> RunReport:
    """Forecasting with an optional lambda-weighted contrastive term.

    With ``scheme="base_only"`` or ``lam == 0`` the augmented branch is not
    run at all, so both produce the same trace for a given seed.
    """
    if cfg.scheme == "pretrain_finetune":
        raise TrainError("train_joint called with scheme pretrain_finetune")
    started = time.perf_counter()
    model = model or EncoderConfig(history=dataset.history, horizon=dataset.horizon)
    echo = _echo(cfg, model, echo)
    params = ModelParams.init(model, cfg.seed)
    report = RunReport(seed=cfg.seed, config=echo)
    files = _RunFiles(out_dir)
    contrast = cfg.uses_contrast
    opt = Adam(params.tensors, lr=cfg.lr, clip_norm=cfg.clip_norm)
    _fit_forecaster(params, opt, cfg, dataset, graph, report, files, contrast, params.tensors)
    return _finish(params, cfg, dataset, graph, report, files, started, echo)


def pretrain(cfg: TrainConfig, dataset: TimeSeriesDataset, graph: SensorGraph,
             model: EncoderConfig | None = None, out_dir=None,
             echo: dict | None = None) -> tuple[ModelParams, list[dict]]:
    """Contrastive-only training of encoder and projection head.

    Both views are augmented. Early stopping watches the epoch-mean training
    loss; the parameters with the lowest training loss are returned.
    """
    model = model or EncoderConfig(history=dataset.history, horizon=dataset.horizon)
    params = ModelParams.init(model, cfg.seed)
    head = "proj_graph" if cfg.level == "graph" else "proj_node"
    trainable = params.group("enc.", head + ".")
    opt = Adam(trainable, lr=cfg.lr, clip_norm=cfg.clip_norm)
    train_set = dataset.instances("train")
    stopper = EarlyStopper(cfg.pretrain_patience)
    files = _RunFiles(out_dir, "pretrain_metrics.jsonl")
    history, best = [], None
    for epoch in range(cfg.pretrain_epochs):
        total, n_batches = 0.0, 0
        for batch_no, batch in enumerate(batch_iter(train_set, cfg.batch_size, cfg.seed, epoch)):
            try:
                tape = Tape("train", seed=cfg.seed, key=(epoch, batch_no))
                with tape:
                    tape.register(trainable)
                    xa, adja = _view(batch, cfg, graph, epoch, batch_no, view=0)
                    xb, adjb = _view(batch, cfg, graph, epoch, batch_no, view=1)
                    loss = contrastive_loss(encode(xa, adja, params), encode(xb, adjb, params),
                                            batch, params, cfg, dataset, graph)
                opt.step(backward(tape, loss))
            except (ValueError, ArithmeticError, RuntimeError) as exc:
                raise _context(exc, epoch, batch_no)
            total += loss.item()
            n_batches += 1
        row = {"epoch": epoch, "l_cl": total / n_batches}
        history.append(row)
        files.log(row)
        improved = row["l_cl"] < stopper.best
        stop = stopper.update(row["l_cl"], epoch)
        if improved:
            best = params.snapshot()
        if stop:
            break
    params.restore(best)
    if files.dir is not None:
        save_checkpoint(files.dir / "pretrain_best.stgc", params, _echo(cfg, model, echo))
    return params, history


def finetune(pretrained: ModelParams, cfg: TrainConfig, dataset: TimeSeriesDataset, graph: SensorGraph,
             out_dir=None, echo: dict | None = None, pretrain_history: list[dict] | None = None) -> RunReport:
    """Forecasting from a pretrained encoder with a fresh decoder.

    The projection head is dropped. Encoder and decoder get their own
    learning rates; an encoder rate of 0 freezes the encoder entirely.
    """
    started = time.perf_counter()
    model = pretrained.config
    echo = _echo(cfg, model, echo)
    params = ModelParams.init(model, cfg.seed)
    params.restore(pretrained.snapshot(), prefixes=("enc.",))
    encoder, decoder = params.group("enc."), params.group("dec.")
    if cfg.finetune_encoder_lr < 0:
        raise TrainError("finetune encoder lr must be >= 0")
    if cfg.finetune_encoder_lr == 0:
        trainable = dict(decoder)
        overrides = {}
    else:
        trainable = encoder | decoder
        overrides = {k: cfg.finetune_encoder_lr for k in encoder}
    opt = Adam(trainable, lr=cfg.finetune_decoder_lr, clip_norm=cfg.clip_norm, lr_overrides=overrides)
    report = RunReport(seed=cfg.seed, config=echo, pretrain=list(pretrain_history or []))
    files = _RunFiles(out_dir)
    _fit_forecaster(params, opt, cfg, dataset, graph, report, files, False, trainable)
    report.config["finetune_param_groups"] = sorted({k.split(".")[0] for k in opt.params})
    return _finish(params, cfg, dataset, graph, report, files, started, echo)


def run(cfg: TrainConfig, dataset: TimeSeriesDataset, graph: SensorGraph,
        model: EncoderConfig | None = None, out_dir=None, echo: dict | None = None) -> RunReport:
    """Dispatch on ``cfg.scheme``."""
    if cfg.scheme == "pretrain_finetune":
        params, history = pretrain(cfg, dataset, graph, model, out_dir, echo)
        return finetune(params, cfg, dataset, graph, out_dir, echo, history)
    return train_joint(cfg, dataset, graph, model, out_dir, echo)


# -- significance ------------------------------------------------------------------

def mean_std(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def format_mean_std(values: Sequence[float], digits: int = 2) -> str:
    m, s = mean_std(values)
    return f"{m:.{digits}f}±{s:.{digits}f}"


def welch_t_test(a: Sequence[float], b: Sequence[float]) -> dict:
    """Two-sample Welch t-test with explicit handling of zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise TrainError("significance test needs at least 2 runs per arm")
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    if se2 == 0:
        if ma == mb:
            return {"t": 0.0, "p": 1.0, "df": float("nan"), "degenerate": True}
        return {"t": math.copysign(math.inf, ma - mb), "p": 0.0, "df": float("nan"), "degenerate": True}
    t = (ma - mb) / math.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    p = float(2.0 * scipy.stats.t.sf(abs(t), df))
    return {"t": float(t), "p": min(p, 1.0), "df": float(df), "degenerate": False}


def significance_report(runs_a: Sequence[RunReport], runs_b: Sequence[RunReport],
                        keys: Sequence[str] | None = None) -> dict:
    """Welch test per test metric between two arms of per-seed reports."""
    if len(runs_a) < 2 or len(runs_b) < 2:
        raise TrainError("significance test needs at least 2 seeds per arm")
    keys = keys or [f"{h}.{m}" for h in runs_a[0].test for m in ("mae", "rmse", "mape")]
    out = {}
    for key in keys:
        h, m = key.split(".")
        va = [r.test[h][m] for r in runs_a]
        vb = [r.test[h][m] for r in runs_b]
        out[key] = {"a": format_mean_std(va), "b": format_mean_std(vb), **welch_t_test(va, vb)}
    return out
