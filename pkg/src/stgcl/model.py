"""GWN-style encoder, linear decoder, readout and projection heads."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from . import tensor as T
from .data import ZScore
from .rng import make_rng
from .tensor import Tensor, receptive_field

CKPT_MAGIC = b"STGC"
CKPT_VERSION = 1
HEADS = ("proj_graph", "proj_node")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    history: int = 12
    horizon: int = 12
    in_features: int = 2
    hidden: int = 16
    kernel_size: int = 2
    dilations: tuple[int, ...] = (1, 2, 4, 4)
    diffusion_steps: int = 2
    dropout: float = 0.3
    decoder_hidden: int = 64

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.hidden < 1 or self.decoder_hidden < 1:
            raise ModelError("hidden widths must be >= 1")
        if self.diffusion_steps < 0:
            raise ModelError("diffusion_steps must be >= 0")
        if not self.dilations:
            raise ModelError("at least one layer is required")
        if self.receptive_field < self.history:
            raise ModelError(f"receptive field {self.receptive_field} does not cover history {self.history}")

    @classmethod
    def graph_wavenet(cls) -> "EncoderConfig":
        """Graph WaveNet sizes: 8 layers, dilations 1,2 repeated, D=32, K=2."""
        return cls(hidden=32, dilations=(1, 2, 1, 2, 1, 2, 1, 2), diffusion_steps=2,
                   dropout=0.3, decoder_hidden=512)

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.kernel_size, self.dilations)

    @property
    def num_layers(self) -> int:
        return len(self.dilations)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d


def _shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, k = cfg.hidden, cfg.kernel_size
    shapes = {"enc.start.w": (cfg.in_features, d), "enc.start.b": (d,)}
    for layer in range(cfg.num_layers):
        p = f"enc.{layer}"
        shapes |= {
            f"{p}.filter.w": (k, d, d), f"{p}.filter.b": (d,),
            f"{p}.gate.w": (k, d, d), f"{p}.gate.b": (d,),
            f"{p}.skip.w": (d, d), f"{p}.skip.b": (d,),
            f"{p}.gconv.b": (d,),
        }
        for hop in range(cfg.diffusion_steps + 1):
            shapes[f"{p}.gconv.{hop}.w"] = (d, d)
    shapes |= {
        "dec.1.w": (d, cfg.decoder_hidden), "dec.1.b": (cfg.decoder_hidden,),
        "dec.2.w": (cfg.decoder_hidden, cfg.horizon), "dec.2.b": (cfg.horizon,),
    }
    for head in HEADS:
        shapes |= {
            f"{head}.1.w": (d, d), f"{head}.1.b": (d,),
            f"{head}.bn.gamma": (d,), f"{head}.bn.beta": (d,),
            f"{head}.2.w": (d, d), f"{head}.2.b": (d,),
        }
    return shapes


def _fan_in(name: str, shapes: dict[str, tuple[int, ...]]) -> int:
    shape = shapes[name]
    weight = name[:-2] + ".w"
    if name.endswith(".w"):
        return int(np.prod(shape[:-1]))
    if name.endswith(".b") and weight in shapes:
        return int(np.prod(shapes[weight][:-1]))
    return shape[-1]


@dataclass
class ModelParams:
    config: EncoderConfig
    tensors: dict[str, Tensor]
    bn: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def init(cls, config: EncoderConfig, seed: int = 0) -> "ModelParams":
        shapes = _shapes(config)
        tensors = {}
        for name, shape in shapes.items():
            if name.endswith(".gamma"):
                arr = np.ones(shape)
            elif name.endswith(".beta"):
                arr = np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(_fan_in(name, shapes))
                arr = make_rng(seed, "init:" + name).uniform(-bound, bound, size=shape)
            tensors[name] = Tensor(arr, requires_grad=True, name=name)
        bn = {f"{h}.bn": {"mean": np.zeros(config.hidden), "var": np.ones(config.hidden)} for h in HEADS}
        return cls(config, tensors, bn)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def group(self, *prefixes: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefixes)}

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        tensors = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()}
        bn = {k: {s: v.copy() for s, v in st.items()} for k, st in self.bn.items()}
        return ModelParams(self.config, tensors, bn)

    def snapshot(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.tensors.items()}
        for k, st in self.bn.items():
            for s, v in st.items():
                out[f"bn:{k}:{s}"] = v.copy()
        return out

    def restore(self, snap: dict[str, np.ndarray], prefixes: Iterable[str] | None = None) -> None:
        prefixes = tuple(prefixes) if prefixes is not None else None
        for key, arr in snap.items():
            if key.startswith("bn:"):
                _, name, stat = key.split(":")
                if prefixes is None or name.startswith(prefixes):
                    self.bn[name][stat] = arr.copy()
                continue
            if prefixes is not None and not key.startswith(prefixes):
                continue
            if key not in self.tensors or self.tensors[key].shape != arr.shape:
                raise ModelError(f"checkpoint block {key} does not match model shape")
            self.tensors[key].data = arr.copy()


def parameter_count(config: EncoderConfig) -> int:
    return sum(int(np.prod(s)) for s in _shapes(config).values())


# -- forward passes ----------------------------------------------------------------

def _linear(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return x @ params[prefix + ".w"] + params[prefix + ".b"]


def _graph_mix(x: Tensor, adj: Tensor) -> Tensor:
    """Apply the (N, N) propagation matrix to the node axis of ``(M, N, L, D)``."""
    m, n, length, d = x.shape
    flat = T.reshape(x, (m, n, length * d))
    return T.reshape(adj @ flat, (m, n, length, d))


def encode(x, adj_norm, params: ModelParams) -> Tensor:
    """Encoder: ``(M, S, N, F)`` inputs to ``(M, N, D)`` representations.

    Dropout follows the active tape's mode. ``adj_norm`` is the row-normalized
    propagation matrix (pass the masked one for an edge-masked view).
    """
    cfg = params.config
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[1] != cfg.history or x.shape[3] != cfg.in_features:
        raise ModelError(f"encoder expects (M, {cfg.history}, N, {cfg.in_features}) input, got {x.shape}")
    adj = T.as_tensor(adj_norm)
    n = x.shape[2]
    if adj.shape != (n, n):
        raise ModelError(f"adjacency {adj.shape} does not match {n} nodes")
    h = T.transpose(x, (0, 2, 1, 3))
    pad = cfg.receptive_field - cfg.history
    if pad:
        h = T.concat([Tensor(np.zeros((h.shape[0], n, pad, cfg.in_features))), h], axis=2)
    h = _linear(h, params, "enc.start")
    skip = None
    for layer, dilation in enumerate(cfg.dilations):
        p = f"enc.{layer}"
        residual = h
        filt = T.dilated_causal_conv1d(h, params[p + ".filter.w"], dilation) + params[p + ".filter.b"]
        gate = T.dilated_causal_conv1d(h, params[p + ".gate.w"], dilation) + params[p + ".gate.b"]
        z = T.gated_activation(filt, gate)
        s = _linear(z[:, :, -1, :], params, p + ".skip")
        skip = s if skip is None else skip + s
        out = z @ params[p + ".gconv.0.w"]
        hop = z
        for k in range(1, cfg.diffusion_steps + 1):
            hop = _graph_mix(hop, adj)
            out = out + hop @ params[f"{p}.gconv.{k}.w"]
        out = T.dropout(out + params[p + ".gconv.b"], cfg.dropout)
        length = out.shape[2]
        h = out + residual[:, :, residual.shape[2] - length:, :]
    return T.relu(skip)


def decode(h: Tensor, params: ModelParams, scaler: ZScore) -> Tensor:
    """``(M, N, D)`` to original-scale forecasts ``(M, T, N, 1)``."""
    cfg = params.config
    if h.ndim != 3 or h.shape[2] != cfg.hidden:
        raise ModelError(f"decoder expects (M, N, {cfg.hidden}), got {h.shape}")
    y = _linear(T.relu(_linear(h, params, "dec.1")), params, "dec.2")
    m, n, horizon = y.shape
    y = T.reshape(T.transpose(y, (0, 2, 1)), (m, horizon, n, 1))
    return y * scaler.std + scaler.mean


def readout(h: Tensor) -> Tensor:
    """Sum over nodes: ``(M, N, D) -> (M, D)``."""
    return T.sum(h, axis=1)


def project(features: Tensor, params: ModelParams, head: str = "proj_graph") -> Tensor:
    """linear -> batch norm -> relu -> linear, width preserved."""
    if head not in HEADS:
        raise ModelError(f"unknown projection head {head!r}")
    shape = features.shape
    flat = T.reshape(features, (-1, shape[-1])) if features.ndim != 2 else features
    z = _linear(flat, params, head + ".1")
    z = T.batch_norm(z, params[head + ".bn.gamma"], params[head + ".bn.beta"], params.bn[head + ".bn"])
    z = _linear(T.relu(z), params, head + ".2")
    return T.reshape(z, shape) if features.ndim != 2 else z


# -- checkpoint file ---------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, config_echo: dict | None = None) -> None:
    """Write the STGC layout.

    magic ``STGC`` | u16 version | u32 json length | json config echo |
    u32 block count | per block: u16 name length, name, u8 ndim,
    u32 dims..., little-endian float64 data.
    """
    echo = dict(config_echo or {})
    echo.setdefault("model", params.config.to_dict())
    blob = json.dumps(echo, sort_keys=True).encode("utf-8")
    blocks = params.snapshot()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHI", CKPT_MAGIC, CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        magic, version, n = struct.unpack_from("<4sHI", buf, 0)
        if magic != CKPT_MAGIC:
            raise ModelError(f"{path}: bad magic {magic!r}")
        if version != CKPT_VERSION:
            raise ModelError(f"{path}: unsupported checkpoint version {version}")
        off = struct.calcsize("<4sHI")
        echo = json.loads(buf[off:off + n].decode("utf-8"))
        off += n
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        blocks = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + ln].decode("utf-8")
            off += ln
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            blocks[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).copy()
            off += 8 * size
    except struct.error as exc:
        raise ModelError(f"{path}: truncated checkpoint ({exc})") from None
    cfg_dict = dict(echo["model"])
    cfg_dict["dilations"] = tuple(cfg_dict["dilations"])
    params = ModelParams.init(EncoderConfig(**cfg_dict), seed=0)
    params.restore(blocks)
    return params, echo
