"""Reconstruction, cross-reconstruction and triplet losses, the cross-subject
batch sampler and the training loop."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .model import Forward, ModelConfig, ModelParams, init_params
from .optim import AdamState, adam_step
from .preprocessing import GaitCycle

log = logging.getLogger(__name__)

COMPONENTS = ("l_rec", "l_cross", "l_trip_s", "l_trip_a")


@dataclass
class LossWeights:
    rec: float = 1.0
    cross: float = 1.0
    trip_s: float = 0.1
    trip_a: float = 0.1
    margin: float = 0.2

    def validate(self) -> None:
        ws = (self.rec, self.cross, self.trip_s, self.trip_a)
        if min(ws) < 0 or max(ws) <= 0:
            raise ValueError("loss weights must be non-negative with at least one positive")
        if self.margin <= 0:
            raise ValueError("triplet margin must be positive")

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.rec, self.cross, self.trip_s, self.trip_a)

    @classmethod
    def from_json(cls, d: dict) -> "LossWeights":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown loss keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class CrossBatch:
    """``x`` stacks four blocks of ``B`` cycles: x_ij, x_kl, x_kj, x_il.

    Triplet rows index into that stack as (anchor, positive, negative).
    """

    x: np.ndarray
    subjects: np.ndarray
    affects: np.ndarray
    subject_triplets: np.ndarray
    affect_triplets: np.ndarray
    source_index: np.ndarray

    @property
    def size(self) -> int:
        return self.x.shape[0] // 4

    def block(self, k: int) -> np.ndarray:
        b = self.size
        return self.x[k * b:(k + 1) * b]

    @property
    def x_a(self):
        return self.block(0)

    @property
    def x_b(self):
        return self.block(1)

    @property
    def gt_kj(self):
        return self.block(2)

    @property
    def gt_il(self):
        return self.block(3)


def label_codes(cycles: Sequence[GaitCycle]) -> Tuple[np.ndarray, np.ndarray, List[str], List[str]]:
    subjects = sorted({c.subject_id for c in cycles})
    affects = sorted({c.affect for c in cycles})
    s = np.array([subjects.index(c.subject_id) for c in cycles], dtype=np.int64)
    a = np.array([affects.index(c.affect) for c in cycles], dtype=np.int64)
    return s, a, subjects, affects


class CrossSampler:
    """Draws cross-subject pairs with i != k and j != l plus their ground truths."""

    def __init__(self, cycles: Sequence[GaitCycle]):
        self.cycles = cycles
        self.s, self.a, self.subject_names, self.affect_names = label_codes(cycles)
        if len(self.subject_names) < 2 or len(self.affect_names) < 2:
            raise ValueError("cross-subject sampling needs at least 2 subjects and 2 affects")
        self.pools: Dict[Tuple[int, int], np.ndarray] = {}
        for idx, key in enumerate(zip(self.s, self.a)):
            self.pools.setdefault((int(key[0]), int(key[1])), []).append(idx)
        self.pools = {k: np.array(v) for k, v in self.pools.items()}
        missing = [(self.subject_names[i], self.affect_names[j])
                   for i in range(len(self.subject_names)) for j in range(len(self.affect_names))
                   if (i, j) not in self.pools]
        if missing:
            raise ValueError(f"dataset lacks cycles for (subject, affect) pairs: {missing}")
        self.labels = sorted(self.pools)
        self.stack = np.stack([c.tensor for c in cycles])

    def sample(self, batch_size: int, rng_seed: int) -> CrossBatch:
        rng = np.random.default_rng(rng_seed)
        blocks = [[], [], [], []]
        for _ in range(batch_size):
            i, j = self.labels[rng.integers(len(self.labels))]
            partners = [(k, l) for (k, l) in self.labels if k != i and l != j]
            k, l = partners[rng.integers(len(partners))]
            for block, key in zip(blocks, ((i, j), (k, l), (k, j), (i, l))):
                pool = self.pools[key]
                block.append(int(pool[rng.integers(len(pool))]))
        index = np.array(blocks[0] + blocks[1] + blocks[2] + blocks[3])
        B = batch_size
        r = np.arange(B)
        a_, b_, kj, il = r, r + B, r + 2 * B, r + 3 * B
        # anchor, positive (same subject), negative (other subject, same affect)
        subj = np.concatenate([np.stack(t, axis=1) for t in
                               ((a_, il, kj), (b_, kj, il), (kj, b_, a_), (il, a_, b_))])
        # anchor, positive (same affect, other subject), negative (same subject, other affect)
        aff = np.concatenate([np.stack(t, axis=1) for t in
                              ((a_, kj, il), (b_, il, kj), (kj, a_, b_), (il, b_, a_))])
        return CrossBatch(self.stack[index], self.s[index], self.a[index], subj, aff, index)


def sample_cross_batch(dataset: Sequence[GaitCycle], batch_size: int, rng_seed: int) -> CrossBatch:
    return CrossSampler(dataset).sample(batch_size, rng_seed)


# ---------------------------------------------------------------------------
# losses


def triplet_value(anchor: np.ndarray, positive: np.ndarray, negative: np.ndarray, margin: float) -> float:
    """Batch mean of ``max(0, |a - p| - |a - n| + margin)``."""
    a, p, n = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (anchor, positive, negative))
    d_ap = np.linalg.norm(a - p, axis=1)
    d_an = np.linalg.norm(a - n, axis=1)
    return float(np.maximum(0.0, d_ap - d_an + margin).mean())


loss_triplet = triplet_value


def triplet_graph(codes: Tensor, triplets: np.ndarray, margin: float) -> Tensor:
    anc = ad.take(codes, triplets[:, 0])
    pos = ad.take(codes, triplets[:, 1])
    neg = ad.take(codes, triplets[:, 2])
    d_ap = ad.row_norm(ad.sub(anc, pos))
    d_an = ad.row_norm(ad.sub(anc, neg))
    gap = ad.sub(d_ap, d_an)
    shifted = ad.add(gap, gap.graph.constant(np.full(gap.shape, margin)))
    return ad.mean(ad.relu(shifted))


@dataclass
class LossGraph:
    forward: Forward
    total: Tensor
    parts: Dict[str, Tensor]

    def breakdown(self) -> Dict[str, float]:
        out = {k: float(v.data) for k, v in self.parts.items()}
        out["total"] = float(self.total.data)
        return out


def build_loss_graph(params: ModelParams, batch: CrossBatch, weights: LossWeights,
                     mode: str = "train", rng_seed: int = 0) -> LossGraph:
    weights.validate()
    fw = Forward(params, mode, rng_seed)
    g = fw.graph
    B = batch.size
    x = g.input(batch.x, requires_grad=False)
    s = fw.encode("es", x)
    a = fw.encode("ea", x)
    r = np.arange(B)
    # decode x^_ij, x^_kl, x^_kj (subject of b, affect of a), x^_il (subject of a, affect of b)
    s_idx = np.concatenate([r, r + B, r + B, r])
    a_idx = np.concatenate([r, r + B, r, r + B])
    out = fw.decode(ad.take(s, s_idx), ad.take(a, a_idx))
    recon = ad.take(out, np.arange(2 * B))
    l_rec = ad.mse(recon, g.constant(batch.x[:2 * B]))
    l_cross = ad.add(ad.mse(ad.take(out, r + 2 * B), g.constant(batch.gt_kj)),
                     ad.mse(ad.take(out, r + 3 * B), g.constant(batch.gt_il)))
    l_ts = triplet_graph(s, batch.subject_triplets, weights.margin)
    l_ta = triplet_graph(a, batch.affect_triplets, weights.margin)
    parts = {"l_rec": l_rec, "l_cross": l_cross, "l_trip_s": l_ts, "l_trip_a": l_ta}
    total = ad.weighted_sum([l_rec, l_cross, l_ts, l_ta], weights.as_tuple())
    return LossGraph(fw, total, parts)


def total_loss(params: ModelParams, batch: CrossBatch, weights: LossWeights,
               mode: str = "eval", rng_seed: int = 0) -> Tuple[float, Dict[str, float]]:
    """Weighted loss and its components (running statistics are not touched)."""
    work = params if mode == "eval" else ModelParams(params.config, params.weights,
                                                     {k: s.copy() for k, s in params.stats.items()})
    lg = build_loss_graph(work, batch, weights, mode, rng_seed)
    bd = lg.breakdown()
    return bd["total"], bd


def loss_rec(params: ModelParams, cycles: np.ndarray, mode: str = "eval") -> float:
    """Mean squared error of self-reconstruction over a batch (N x 45 x 128)."""
    x = np.asarray(cycles, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if len(x) == 0:
        raise ValueError("empty batch")
    fw = Forward(params, mode)
    xin = fw.as_input(x)
    out = fw.decode(fw.encode("es", xin), fw.encode("ea", xin))
    return float(ad.mse(out, fw.graph.constant(x)).data)


def loss_cross(params: ModelParams, batch: CrossBatch, mode: str = "eval") -> float:
    fw = Forward(params, mode)
    xa = fw.as_input(batch.x_a)
    xb = fw.as_input(batch.x_b)
    s_a, a_a = fw.encode("es", xa), fw.encode("ea", xa)
    s_b, a_b = fw.encode("es", xb), fw.encode("ea", xb)
    kj = fw.decode(s_b, a_a)
    il = fw.decode(s_a, a_b)
    return float(ad.mse(kj, fw.graph.constant(batch.gt_kj)).data
                 + ad.mse(il, fw.graph.constant(batch.gt_il)).data)


def loss_and_grads(params: ModelParams, batch: CrossBatch, weights: LossWeights,
                   mode: str = "train", rng_seed: int = 0):
    lg = build_loss_graph(params, batch, weights, mode, rng_seed)
    tape = ad.backprop(lg.forward.graph, lg.total)
    return lg.breakdown(), tape.param_grads()


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainSettings:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 7
    steps_per_epoch: Optional[int] = 4

    @classmethod
    def from_json(cls, d: dict) -> "TrainSettings":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class TrainReport:
    epochs: List[Dict[str, float]] = field(default_factory=list)
    wall_clock: float = 0.0
    seed: int = 0
    config_hash: str = ""

    def column(self, name: str) -> np.ndarray:
        return np.array([e[name] for e in self.epochs])

    def write_csv(self, path) -> None:
        cols = ("epoch",) + COMPONENTS + ("total",)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for e in self.epochs:
                w.writerow([e["epoch"]] + [repr(float(e[c])) for c in cols[1:]])


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: ModelParams, report: TrainReport):
        super().__init__(message)
        self.last_good = last_good
        self.report = report


def config_hash(config: ModelConfig, weights: LossWeights, settings: TrainSettings) -> str:
    blob = json.dumps({"model": config.to_json(), "loss": asdict(weights), "train": asdict(settings)},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def train(dataset: Sequence[GaitCycle], config: Optional[ModelConfig] = None,
          weights: Optional[LossWeights] = None, epochs: Optional[int] = None,
          rng_seed: Optional[int] = None, settings: Optional[TrainSettings] = None,
          checkpoint_path=None, progress: bool = False) -> Tuple[ModelParams, TrainReport]:
    """Train the autoencoder on preprocessed cycles.

    One epoch is ``steps_per_epoch`` Adam steps (default 4, i.e. 64 cross
    pairs). ``None`` sizes the epoch so every cycle appears once as a pair
    member on average.
    """
    config = config or ModelConfig()
    weights = weights or LossWeights()
    weights.validate()
    settings = settings or TrainSettings()
    if epochs is not None:
        settings = TrainSettings(**{**asdict(settings), "epochs": epochs})
    if rng_seed is not None:
        settings = TrainSettings(**{**asdict(settings), "seed": rng_seed})
    sampler = CrossSampler(dataset)
    steps = settings.steps_per_epoch or max(1, math.ceil(len(dataset) / (2 * settings.batch_size)))
    params = init_params(config, settings.seed)
    adam = AdamState()
    rng = np.random.default_rng([settings.seed, 101])
    report = TrainReport(seed=settings.seed, config_hash=config_hash(config, weights, settings))
    start = time.perf_counter()
    for epoch in range(1, settings.epochs + 1):
        sums = dict.fromkeys(COMPONENTS + ("total",), 0.0)
        for _ in range(steps):
            batch_seed, drop_seed = (int(v) for v in rng.integers(2 ** 63 - 1, size=2))
            batch = sampler.sample(settings.batch_size, batch_seed)
            last_good = params.copy()
            try:
                bd, grads = loss_and_grads(params, batch, weights, "train", drop_seed)
                if not all(math.isfinite(v) for v in bd.values()):
                    raise NonFiniteError(f"non-finite loss {bd}")
                adam_step(params.weights, grads, adam, settings.lr, settings.betas, settings.eps)
            except NonFiniteError as exc:
                if checkpoint_path is not None:
                    last_good.save(checkpoint_path)
                report.wall_clock = time.perf_counter() - start
                raise TrainingDiverged(f"epoch {epoch}: {exc}", last_good, report) from exc
            for k in sums:
                sums[k] += bd[k]
        row = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}}
        report.epochs.append(row)
        if progress and (epoch == 1 or epoch % 10 == 0):
            log.info("epoch %d total %.4f rec %.4f cross %.4f trip_s %.4f trip_a %.4f", epoch,
                     row["total"], row["l_rec"], row["l_cross"], row["l_trip_s"], row["l_trip_a"])
    report.wall_clock = time.perf_counter() - start
    if checkpoint_path is not None:
        params.save(checkpoint_path)
    return params, report


def encode_all(params: ModelParams, x: np.ndarray, which: str = "ea", batch: int = 256) -> np.ndarray:
    """Eval-mode codes for an (N x 45 x 128) stack."""
    out = []
    for i in range(0, len(x), batch):
        fw = Forward(params, "eval")
        out.append(fw.encode(which, x[i:i + batch]).data.copy())
    return np.concatenate(out) if out else np.zeros((0, getattr(params.config, f"{'affect' if which == 'ea' else 'subject'}_dim")))
