"""Subject encoder, affect encoder and decoder of the disentangling autoencoder."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, ICState, Tensor
from .mocap import TOPOLOGY
from .optim import load_checkpoint, save_checkpoint

ConvSpec = Tuple[int, int, int]  # (out channels, kernel, stride)


@dataclass
class ModelConfig:
    in_channels: int = 45
    length: int = 128
    encoder: Tuple[ConvSpec, ...] = ((64, 7, 2), (96, 5, 2), (128, 3, 2))
    subject_dim: int = 32
    affect_dim: int = 16
    dropout: float = 0.1
    masked_joints: Tuple[int, ...] = (TOPOLOGY.root,)

    def validate(self) -> None:
        if self.subject_dim < 2 or self.affect_dim < 2:
            raise ValueError("code dimensions must be >= 2")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        t = self.length
        for _, _, s in self.encoder:
            if t % s:
                raise ValueError("sequence length must be divisible by every encoder stride")
            t //= s
        if t < 1:
            raise ValueError("encoder reduces the sequence to nothing")

    @property
    def bottleneck_length(self) -> int:
        t = self.length
        for _, _, s in self.encoder:
            t //= s
        return t

    def input_mask(self) -> np.ndarray:
        """Channel mask zeroing joints that carry no signal (the root after centring)."""
        mask = np.ones((self.in_channels, 1))
        for j in self.masked_joints:
            mask[3 * j:3 * j + 3] = 0.0
        return mask

    def to_json(self) -> dict:
        d = asdict(self)
        d["encoder"] = [list(x) for x in self.encoder]
        d["masked_joints"] = list(self.masked_joints)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        if "encoder" in d:
            d["encoder"] = tuple(tuple(int(v) for v in x) for x in d["encoder"])
        if "masked_joints" in d:
            d["masked_joints"] = tuple(int(v) for v in d["masked_joints"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


def _padding(kernel: int) -> int:
    return (kernel - 1) // 2


@dataclass
class ModelParams:
    config: ModelConfig
    weights: Dict[str, np.ndarray]
    stats: Dict[str, ICState] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.weights.items()},
                           {k: s.copy() for k, s in self.stats.items()})

    def tensors(self) -> Dict[str, np.ndarray]:
        """Flat name -> array view including running statistics (for checkpoints)."""
        out = dict(self.weights)
        for name, st in self.stats.items():
            out[f"{name}.running_mean"] = st.mean
            out[f"{name}.running_var"] = st.var
        return out

    def save(self, path) -> None:
        save_checkpoint(path, self.tensors())

    @classmethod
    def load(cls, path, config: ModelConfig) -> "ModelParams":
        flat = load_checkpoint(path)
        weights, stats = {}, {}
        for name, arr in flat.items():
            if name.endswith(".running_mean"):
                base = name[: -len(".running_mean")]
                stats[base] = ICState(arr, flat[base + ".running_var"])
            elif not name.endswith(".running_var"):
                weights[name] = arr
        params = cls(config, weights, stats)
        expected = init_params(config, 0)
        if set(expected.weights) != set(weights) or set(expected.stats) != set(stats):
            raise ValueError(f"{path}: checkpoint does not match model config")
        return params


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, rng_seed: int) -> ModelParams:
    """Fan-in scaled uniform initialisation, deterministic per seed."""
    config.validate()
    rng = np.random.default_rng(rng_seed)
    w: Dict[str, np.ndarray] = {}
    stats: Dict[str, ICState] = {}
    for enc, dim in (("es", config.subject_dim), ("ea", config.affect_dim)):
        c = config.in_channels
        for i, (out, k, _) in enumerate(config.encoder):
            w[f"{enc}.conv{i}.w"] = _uniform(rng, (out, c, k), c * k)
            stats[f"{enc}.ic{i}"] = ICState.fresh(out)
            c = out
        w[f"{enc}.fc.w"] = _uniform(rng, (dim, c), c)
        w[f"{enc}.fc.b"] = _uniform(rng, (dim,), c)
    code = config.subject_dim + config.affect_dim
    top = config.encoder[-1][0]
    t0 = config.bottleneck_length
    w["dec.fc.w"] = _uniform(rng, (top * t0, code), code)
    w["dec.fc.b"] = _uniform(rng, (top * t0,), code)
    chans = [spec[0] for spec in config.encoder][::-1][1:] + [config.in_channels]
    kernels = [spec[1] for spec in config.encoder][::-1]
    c = top
    for i, (out, k) in enumerate(zip(chans, kernels)):
        w[f"dec.conv{i}.w"] = _uniform(rng, (out, c, k), c * k)
        if i < len(chans) - 1:
            stats[f"dec.ic{i}"] = ICState.fresh(out)
        else:
            w[f"dec.conv{i}.b"] = _uniform(rng, (out,), c * k)
        c = out
    return ModelParams(config, w, stats)


class Forward:
    """Builds model computations on one graph, sharing parameter nodes."""

    def __init__(self, params: ModelParams, mode: str = "eval", rng_seed: int = 0,
                 graph: Optional[Graph] = None):
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        self.params = params
        self.config = params.config
        self.mode = mode
        self.graph = graph or Graph()
        self._seed = np.random.default_rng(rng_seed)
        self.feature_maps: Dict[str, Tensor] = {}

    def p(self, name: str) -> Tensor:
        return self.graph.param(name, self.params.weights[name])

    def _ic(self, x: Tensor, name: str) -> Tensor:
        seed = int(self._seed.integers(2 ** 63 - 1))
        return ad.ic_layer(x, self.params.stats[name], self.config.dropout, self.mode, seed)

    def as_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        x = np.asarray(x, dtype=np.float64)
        expect = (self.config.in_channels, self.config.length)
        if x.shape[-2:] != expect or x.ndim not in (2, 3):
            raise ValueError(f"expected input of shape (N x) {expect}, got {x.shape}")
        return self.graph.input(x)

    def encode(self, which: str, x) -> Tensor:
        """Unit-norm code from encoder ``'es'`` (subject) or ``'ea'`` (affect)."""
        h = self.as_input(x)
        mask = self.graph.constant(np.broadcast_to(self.config.input_mask(), h.shape))
        h = ad.mul(h, mask)
        for i, (_, k, s) in enumerate(self.config.encoder):
            h = ad.conv1d(h, self.p(f"{which}.conv{i}.w"), s, _padding(k))
            h = ad.relu(self._ic(h, f"{which}.ic{i}"))
        self.feature_maps[which] = h
        code = ad.dense(ad.time_mean(h), self.p(f"{which}.fc.w"), self.p(f"{which}.fc.b"))
        return ad.l2_normalize(code)

    def decode(self, s_code: Tensor, a_code: Tensor) -> Tensor:
        cfg = self.config
        if s_code.shape[-1] != cfg.subject_dim or a_code.shape[-1] != cfg.affect_dim:
            raise ValueError(f"code dims {s_code.shape[-1]}/{a_code.shape[-1]} do not match "
                             f"config {cfg.subject_dim}/{cfg.affect_dim}")
        if s_code.shape[:-1] != a_code.shape[:-1]:
            raise ValueError("subject and affect codes must have the same batch shape")
        batched = len(s_code.shape) == 2
        z = ad.concat([s_code, a_code], axis=-1)
        h = ad.dense(z, self.p("dec.fc.w"), self.p("dec.fc.b"))
        top = cfg.encoder[-1][0]
        t0 = cfg.bottleneck_length
        h = ad.reshape(h, (s_code.shape[0], top, t0) if batched else (top, t0))
        h = ad.relu(h)
        strides = [spec[2] for spec in cfg.encoder][::-1]
        kernels = [spec[1] for spec in cfg.encoder][::-1]
        last = len(strides) - 1
        for i, (s, k) in enumerate(zip(strides, kernels)):
            h = ad.upsample(h, s)
            h = ad.conv1d(h, self.p(f"dec.conv{i}.w"), 1, _padding(k))
            if i < last:
                h = ad.relu(self._ic(h, f"dec.ic{i}"))
        return ad.channel_bias(h, self.p(f"dec.conv{last}.b"))


def _run(params: ModelParams, fn, mode: str = "eval", rng_seed: int = 0):
    fw = Forward(params, mode, rng_seed)
    return fn(fw).data.copy()


def encode_subject(params: ModelParams, x, mode: str = "eval", rng_seed: int = 0) -> np.ndarray:
    return _run(params, lambda fw: fw.encode("es", x), mode, rng_seed)


def encode_affect(params: ModelParams, x, mode: str = "eval", rng_seed: int = 0) -> np.ndarray:
    return _run(params, lambda fw: fw.encode("ea", x), mode, rng_seed)


def decode(params: ModelParams, s_code, a_code, mode: str = "eval", rng_seed: int = 0) -> np.ndarray:
    def fn(fw):
        return fw.decode(fw.graph.input(s_code), fw.graph.input(a_code))
    return _run(params, fn, mode, rng_seed)


def reconstruct(params: ModelParams, x, mode: str = "eval") -> np.ndarray:
    def fn(fw):
        return fw.decode(fw.encode("es", x), fw.encode("ea", x))
    return _run(params, fn, mode)


def cross_reconstruct(params: ModelParams, x_a, x_b, mode: str = "eval") -> Tuple[np.ndarray, np.ndarray]:
    """For ``x_a`` of (i, j) and ``x_b`` of (k, l) return (x^_{k,j}, x^_{i,l})."""
    fw = Forward(params, mode)
    xa = fw.as_input(x_a)
    xb = fw.as_input(x_b)
    s_a, a_a = fw.encode("es", xa), fw.encode("ea", xa)
    s_b, a_b = fw.encode("es", xb), fw.encode("ea", xb)
    kj = fw.decode(s_b, a_a)
    il = fw.decode(s_a, a_b)
    return kj.data.copy(), il.data.copy()


def batched(fn, x: np.ndarray, batch: int = 256) -> np.ndarray:
    """Apply an (N x ...) -> (N x ...) eval function in chunks."""
    x = np.asarray(x)
    return np.concatenate([fn(x[i:i + batch]) for i in range(0, len(x), batch)], axis=0)
