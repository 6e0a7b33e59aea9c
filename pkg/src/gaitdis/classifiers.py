"""Baseline and latent-space classifiers, the stratified fold protocol and metrics."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, ICState, Tensor
from .mocap import AFFECTS, TOPOLOGY, SkeletonTopology
from .model import ModelParams
from .optim import AdamState, adam_step, load_checkpoint, save_checkpoint
from .preprocessing import GaitCycle, renormalize
from .training import encode_all

log = logging.getLogger(__name__)

MODELS = ("knn-man", "svm-man", "svm-xyz", "cnn-xyz", "ae-xyz")
PRIVACY_MODELS = ("svm-xyz", "svm-enc", "cnn-enc", "svm-xyz-shuffled")

# (a, b, c) chains; the angle is measured at b
ANGLE_CHAINS = (
    ("l_hip", "l_kne", "l_ank"), ("r_hip", "r_kne", "r_ank"),
    ("l_shl", "l_elb", "l_wrist"), ("r_shl", "r_elb", "r_wrist"),
    ("l_hip", "l_shl", "l_elb"), ("r_hip", "r_shl", "r_elb"),
    ("torso", "l_hip", "l_kne"), ("torso", "r_hip", "r_kne"),
)
SPEED_JOINTS = ("l_wrist", "r_wrist", "l_ank", "r_ank")
STATS = ("mean", "std", "min", "max")


def thread_count() -> int:
    """Worker cap from ``GAITDIS_THREADS`` (default: available cores)."""
    raw = os.environ.get("GAITDIS_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"GAITDIS_THREADS must be a positive integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# manual features


def feature_names() -> List[str]:
    names = ["angle_" + "_".join(ch) for ch in ANGLE_CHAINS]
    names += [f"speed_{j}" for j in SPEED_JOINTS]
    return [f"{n}_{s}" for n in names for s in STATS]


def joint_angles(frames: np.ndarray, chain: Tuple[str, str, str],
                 topology: SkeletonTopology = TOPOLOGY) -> np.ndarray:
    a, b, c = (frames[:, topology.index(n)] for n in chain)
    u, v = a - b, c - b
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    bad = (nu < 1e-12) | (nv < 1e-12)
    if bad.any():
        warnings.warn(f"degenerate chain {'-'.join(chain)}: angle set to pi on {int(bad.sum())} frames")
    cos = np.einsum("ij,ij->i", u, v) / np.where(bad, 1.0, nu * nv)
    ang = np.arccos(np.clip(cos, -1.0, 1.0))
    ang[bad] = math.pi
    return ang


def joint_speed(frames: np.ndarray, joint: str, topology: SkeletonTopology = TOPOLOGY) -> np.ndarray:
    """Per-frame displacement magnitude (cyclic, so there is one value per frame)."""
    p = frames[:, topology.index(joint)]
    return np.linalg.norm(np.roll(p, -1, axis=0) - p, axis=1)


def _stats(x: np.ndarray) -> List[float]:
    return [float(x.mean()), float(x.std()), float(x.min()), float(x.max())]


def extract_manual_features(geometry: np.ndarray, topology: SkeletonTopology = TOPOLOGY) -> np.ndarray:
    """48 statistics of key angles and joint speeds for one normalized cycle (T x 15 x 3)."""
    geometry = np.asarray(geometry, dtype=np.float64)
    feats: List[float] = []
    for chain in ANGLE_CHAINS:
        feats += _stats(joint_angles(geometry, chain, topology))
    for joint in SPEED_JOINTS:
        feats += _stats(joint_speed(geometry, joint, topology))
    return np.array(feats)


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        sd = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(sd < 1e-12, 1.0, sd))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


# ---------------------------------------------------------------------------
# KNN and linear SVM


def knn_classify(train_x: np.ndarray, train_y: np.ndarray, k: int, query: np.ndarray) -> np.ndarray:
    """Majority vote of the ``k`` nearest (Euclidean) training points for each query row.

    Ties go to the label with the smallest summed distance, then the smallest label.
    """
    train_x = np.atleast_2d(np.asarray(train_x, dtype=np.float64))
    train_y = np.asarray(train_y)
    if len(train_x) == 0:
        raise ValueError("knn: empty training set")
    if not 1 <= k <= len(train_x):
        raise ValueError(f"knn: k={k} must lie in [1, {len(train_x)}]")
    single = np.asarray(query).ndim == 1
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    d2 = (q ** 2).sum(1)[:, None] + (train_x ** 2).sum(1)[None, :] - 2 * q @ train_x.T
    dist = np.sqrt(np.maximum(d2, 0.0))
    labels = np.unique(train_y)
    out = []
    for row in dist:
        nn = np.argsort(row, kind="stable")[:k]
        best = None
        for lab in labels:
            hit = train_y[nn] == lab
            if not hit.any():
                continue
            key = (-int(hit.sum()), float(row[nn][hit].sum()), lab)
            if best is None or key < best:
                best = key
        out.append(best[2])
    out = np.array(out)
    return out[0] if single else out


@dataclass
class SvmConfig:
    epochs: int = 60
    lr: float = 0.05
    reg: float = 1e-3
    batch: int = 32


@dataclass
class SvmModel:
    classes: np.ndarray
    w: np.ndarray  # classes x features
    b: np.ndarray

    def margins(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x) @ self.w.T + self.b


def svm_train(x: np.ndarray, y: np.ndarray, epochs: int = 60, lr: float = 0.05, reg: float = 1e-3,
              seed: int = 0, batch: int = 32) -> SvmModel:
    """One-vs-rest L2-regularized hinge models by minibatch subgradient descent."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("svm: need at least 2 classes")
    n, d = x.shape
    target = np.where(y[:, None] == classes[None, :], 1.0, -1.0)
    w = np.zeros((len(classes), d))
    b = np.zeros(len(classes))
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        rate = lr / math.sqrt(1.0 + epoch)
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            xb, tb = x[idx], target[idx]
            active = (tb * (xb @ w.T + b)) < 1.0
            coef = np.where(active, tb, 0.0)
            w -= rate * (reg * w - coef.T @ xb / len(idx))
            b -= rate * (-coef.sum(axis=0) / len(idx))
    return SvmModel(classes, w, b)


def svm_predict(model: SvmModel, query: np.ndarray) -> np.ndarray:
    """Label with the largest margin (ties go to the first class)."""
    single = np.asarray(query).ndim == 1
    out = model.classes[np.argmax(model.margins(np.asarray(query, dtype=np.float64)), axis=1)]
    return out[0] if single else out


# ---------------------------------------------------------------------------
# CNN classifiers


@dataclass
class CnnConfig:
    n_classes: int = 4
    channels: Tuple[int, ...] = (32, 32)
    kernels: Tuple[int, ...] = (7, 5)
    hidden: int = 32
    dropout: float = 0.1
    stride: int = 2
    norm: bool = True
    epochs: int = 30
    latent_epochs: int = 150
    batch: int = 32
    lr: float = 1e-3


@dataclass
class CnnParams:
    config: CnnConfig
    kind: str  # "raw" or "latent"
    weights: Dict[str, np.ndarray]
    stats: Dict[str, ICState] = field(default_factory=dict)


def _glorot(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def cnn_init(kind: str, in_shape: Tuple[int, ...], config: CnnConfig, seed: int) -> CnnParams:
    rng = np.random.default_rng(seed)
    w: Dict[str, np.ndarray] = {}
    stats: Dict[str, ICState] = {}
    if kind == "raw":
        c = in_shape[0]
        for i, (out, k) in enumerate(zip(config.channels, config.kernels)):
            w[f"conv{i}.w"] = _glorot(rng, (out, c, k), c * k)
            stats[f"ic{i}"] = ICState.fresh(out)
            c = out
        w["fc.w"] = _glorot(rng, (config.n_classes, c), c)
        w["fc.b"] = np.zeros(config.n_classes)
    elif kind == "latent":
        d = in_shape[0]
        w["h.w"] = _glorot(rng, (config.hidden, d), d)
        w["h.b"] = np.zeros(config.hidden)
        w["fc.w"] = _glorot(rng, (config.n_classes, config.hidden), config.hidden)
        w["fc.b"] = np.zeros(config.n_classes)
    else:
        raise ValueError(f"unknown classifier kind {kind!r}")
    return CnnParams(config, kind, w, stats)


def cnn_logits(params: CnnParams, x, mode: str = "eval", rng_seed: int = 0,
               graph: Optional[Graph] = None, requires_grad: bool = False):
    """Build the classifier on ``graph``; ``x`` may be an array or a tensor of that graph.

    Returns ``(graph, logits, last_feature_map)``; the feature map is ``None``
    for the dense head.
    """
    if isinstance(x, Tensor):
        g, h = x.graph, x
    else:
        g = graph or Graph()
        h = g.input(np.asarray(x, dtype=np.float64), requires_grad=requires_grad)
    p = lambda name: g.param(name, params.weights[name])  # noqa: E731
    seeds = np.random.default_rng(rng_seed)
    fmap = None
    if params.kind == "raw":
        for i, k in enumerate(params.config.kernels):
            h = ad.conv1d(h, p(f"conv{i}.w"), params.config.stride, (k - 1) // 2)
            if params.config.norm:
                h = ad.ic_layer(h, params.stats[f"ic{i}"], params.config.dropout, mode,
                                int(seeds.integers(2 ** 63 - 1)))
            h = ad.relu(h)
        fmap = h
        h = ad.time_mean(h)
    else:
        h = ad.relu(ad.dense(h, p("h.w"), p("h.b")))
    return g, ad.dense(h, p("fc.w"), p("fc.b")), fmap


def _check_labels(y: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.dtype.kind not in "iu" or (len(y) and (y.min() < 0 or y.max() >= n_classes)):
        raise ValueError(f"labels must be integers in [0, {n_classes})")
    return y.astype(np.int64)


def cnn_classifier_train(inputs: np.ndarray, labels: np.ndarray, config: Optional[CnnConfig] = None,
                         seed: int = 0, epochs: Optional[int] = None) -> CnnParams:
    """Cross-entropy training with Adam; raw (N x C x T) inputs get the conv head,
    code vectors (N x D) the dense head."""
    config = config or CnnConfig()
    x = np.asarray(inputs, dtype=np.float64)
    y = _check_labels(labels, config.n_classes)
    kind = "raw" if x.ndim == 3 else "latent"
    params = cnn_init(kind, x.shape[1:], config, seed)
    n_epochs = epochs if epochs is not None else (config.epochs if kind == "raw" else config.latent_epochs)
    rng = np.random.default_rng([seed, 1])
    adam = AdamState()
    for _ in range(n_epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), config.batch):
            idx = order[start:start + config.batch]
            g, logits, _ = cnn_logits(params, x[idx], "train", int(rng.integers(2 ** 63 - 1)))
            loss = ad.softmax_cross_entropy(logits, y[idx])
            tape = ad.backprop(g, loss)
            adam_step(params.weights, tape.param_grads(), adam, config.lr)
    return params


def cnn_classifier_predict(params: CnnParams, inputs: np.ndarray, batch: int = 256) -> np.ndarray:
    """Softmax class scores (rows sum to 1)."""
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == (2 if params.kind == "raw" else 1)
    if single:
        x = x[None]
    out = np.concatenate([ad.softmax(cnn_logits(params, x[i:i + batch])[1].data)
                          for i in range(0, len(x), batch)])
    return out[0] if single else out


# ---------------------------------------------------------------------------
# folds and metrics


@dataclass
class FoldSplit:
    folds: List[np.ndarray]

    def train_test(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        test = self.folds[k]
        train = np.sort(np.concatenate([f for i, f in enumerate(self.folds) if i != k]))
        return train, test


def stratified_kfold(groups: Sequence, n_folds: int = 5, seed: int = 0) -> FoldSplit:
    """Round-robin each group's items over the folds after a seeded shuffle.

    ``groups`` holds one hashable stratum per item (e.g. (subject, affect)).
    The starting fold rotates between groups so fold totals stay balanced.
    """
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    rng = np.random.default_rng(seed)
    members: Dict = {}
    for i, key in enumerate(groups):
        members.setdefault(key, []).append(i)
    folds: List[List[int]] = [[] for _ in range(n_folds)]
    offset = 0
    for key in sorted(members, key=repr):
        idx = rng.permutation(members[key])
        if len(idx) < n_folds:
            warnings.warn(f"group {key!r} has {len(idx)} items for {n_folds} folds")
        for r, i in enumerate(idx):
            folds[(offset + r) % n_folds].append(int(i))
        offset += len(idx)
    return FoldSplit([np.array(sorted(f), dtype=np.int64) for f in folds])


@dataclass
class EvalReport:
    labels: List[str]
    confusion: np.ndarray  # rows = truth, columns = prediction
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray

    @property
    def accuracy(self) -> np.ndarray:
        """Per-class accuracy, reported as recall."""
        return self.recall

    @property
    def macro_accuracy(self) -> float:
        return float(self.recall.mean())

    @property
    def macro_precision(self) -> float:
        return float(self.precision.mean())

    @property
    def macro_f1(self) -> float:
        return float(self.f1.mean())

    @property
    def overall_accuracy(self) -> float:
        return float(100.0 * np.trace(self.confusion) / self.confusion.sum())


def evaluate(predictions: Sequence[int], truths: Sequence[int], labels: Sequence[str]) -> EvalReport:
    """Percent metrics per class from integer predictions and truths."""
    p = np.asarray(predictions, dtype=np.int64)
    t = np.asarray(truths, dtype=np.int64)
    if len(p) != len(t):
        raise ValueError("predictions and truths differ in length")
    if len(p) == 0:
        raise ValueError("cannot evaluate an empty prediction set")
    c = len(labels)
    conf = np.zeros((c, c), dtype=np.int64)
    np.add.at(conf, (t, p), 1)
    tp = np.diag(conf).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        pre = np.where(conf.sum(0) > 0, tp / conf.sum(0), 0.0) * 100
        rec = np.where(conf.sum(1) > 0, tp / conf.sum(1), 0.0) * 100
        f1 = np.where(pre + rec > 0, 2 * pre * rec / (pre + rec), 0.0)
    return EvalReport(list(labels), conf, pre, rec, f1)


@dataclass
class CrossValReport:
    model: str
    labels: List[str]
    folds: List[EvalReport]
    pooled: EvalReport

    @property
    def fold_accuracies(self) -> np.ndarray:
        return np.array([f.macro_accuracy for f in self.folds])

    @property
    def mean_accuracy(self) -> float:
        return float(self.fold_accuracies.mean())

    @property
    def std_accuracy(self) -> float:
        return float(self.fold_accuracies.std())

    def rows(self) -> List[List]:
        rows = []
        for k, f in enumerate(self.folds):
            for i, lab in enumerate(self.labels):
                rows.append([k, lab, f.accuracy[i], f.precision[i], f.recall[i], f.f1[i]])
            rows.append([k, "macro", f.macro_accuracy, f.macro_precision, f.macro_accuracy, f.macro_f1])
        for stat, fn in (("mean", np.mean), ("std", np.std)):
            for i, lab in enumerate(self.labels):
                rows.append([stat, lab] + [float(fn([getattr(f, m)[i] for f in self.folds]))
                                           for m in ("accuracy", "precision", "recall", "f1")])
            rows.append([stat, "macro"] + [float(fn([getattr(f, m) for f in self.folds]))
                                           for m in ("macro_accuracy", "macro_precision",
                                                     "macro_accuracy", "macro_f1")])
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fold", "class", "acc", "pre", "rec", "f1"])
            for r in self.rows():
                w.writerow(r[:2] + [f"{v:.6f}" for v in r[2:]])

    def write_confusion_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["truth\\pred"] + self.labels)
            for lab, row in zip(self.labels, self.pooled.confusion):
                w.writerow([lab] + [int(v) for v in row])


# ---------------------------------------------------------------------------
# benchmark protocol


@dataclass
class EvalSettings:
    folds: int = 5
    knn_k: int = 5
    svm: SvmConfig = field(default_factory=SvmConfig)
    cnn: CnnConfig = field(default_factory=CnnConfig)

    @classmethod
    def from_json(cls, d: dict) -> "EvalSettings":
        d = dict(d)
        d.pop("models", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown eval keys: {sorted(unknown)}")
        out = cls(**{k: v for k, v in d.items() if k not in ("svm", "cnn")})
        if "svm" in d:
            out.svm = _strict(SvmConfig, d["svm"], "eval.svm")
        if "cnn" in d:
            cnn = dict(d["cnn"])
            for key in ("channels", "kernels"):
                if key in cnn:
                    cnn[key] = tuple(cnn[key])
            out.cnn = _strict(CnnConfig, cnn, "eval.cnn")
        return out

    def to_json(self) -> dict:
        d = asdict(self)
        d["cnn"]["channels"] = list(self.cnn.channels)
        d["cnn"]["kernels"] = list(self.cnn.kernels)
        return d


def _strict(cls, d: dict, where: str):
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown {where} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class FoldData:
    """Per-fold inputs after refitting limb means on the training part."""

    train: np.ndarray
    test: np.ndarray
    xyz: np.ndarray          # N x 45 x 128
    manual: np.ndarray       # N x 48
    codes: Optional[np.ndarray]


def _fold_data(cycles: Sequence[GaitCycle], split: FoldSplit, k: int,
               ae_params: Optional[ModelParams], need_manual: bool) -> FoldData:
    train, test = split.train_test(k)
    refit, _ = renormalize(cycles, train)
    xyz = np.stack([c.tensor for c in refit])
    manual = (np.stack([extract_manual_features(c.geometry) for c in refit])
              if need_manual else np.zeros((len(refit), 0)))
    codes = encode_all(ae_params, xyz, "ea") if ae_params is not None else None
    return FoldData(train, test, xyz, manual, codes)


def _predict(model: str, fd: FoldData, y: np.ndarray, settings: EvalSettings, seed: int,
             n_classes: int) -> np.ndarray:
    tr, te = fd.train, fd.test
    if model in ("knn-man", "svm-man"):
        sc = Standardizer.fit(fd.manual[tr])
        xtr, xte = sc(fd.manual[tr]), sc(fd.manual[te])
        if model == "knn-man":
            return knn_classify(xtr, y[tr], settings.knn_k, xte)
        return svm_predict(svm_train(xtr, y[tr], seed=seed, **asdict(settings.svm)), xte)
    if model in ("svm-xyz", "svm-xyz-shuffled"):
        flat = fd.xyz.reshape(len(fd.xyz), -1)
        sc = Standardizer.fit(flat[tr])
        return svm_predict(svm_train(sc(flat[tr]), y[tr], seed=seed, **asdict(settings.svm)), sc(flat[te]))
    if model == "svm-enc":
        return svm_predict(svm_train(fd.codes[tr], y[tr], seed=seed, **asdict(settings.svm)), fd.codes[te])
    cfg = CnnConfig(**{**asdict(settings.cnn), "n_classes": n_classes})
    if model == "cnn-xyz":
        params = cnn_classifier_train(fd.xyz[tr], y[tr], cfg, seed)
        return np.argmax(cnn_classifier_predict(params, fd.xyz[te]), axis=1)
    if model in ("ae-xyz", "cnn-enc"):
        params = cnn_classifier_train(fd.codes[tr], y[tr], cfg, seed)
        return np.argmax(cnn_classifier_predict(params, fd.codes[te]), axis=1)
    raise ValueError(f"unknown model {model!r}")


def _cross_validate(cycles: Sequence[GaitCycle], models: Sequence[str], labels: Sequence[str],
                    y: Dict[str, np.ndarray], ae_params: Optional[ModelParams], seed: int,
                    settings: EvalSettings) -> Dict[str, CrossValReport]:
    split = stratified_kfold([(c.subject_id, c.affect) for c in cycles], settings.folds, seed)
    need_manual = any(m.endswith("-man") for m in models)

    def run_fold(k: int) -> Dict[str, np.ndarray]:
        fd = _fold_data(cycles, split, k, ae_params, need_manual)
        return {m: np.asarray(_predict(m, fd, y[m], settings, seed + k, len(labels)))
                for m in models}

    with ThreadPoolExecutor(max_workers=min(thread_count(), settings.folds)) as pool:
        preds = list(pool.map(run_fold, range(settings.folds)))
    out = {}
    for m in models:
        reports = [evaluate(preds[k][m], y[m][split.folds[k]], labels) for k in range(settings.folds)]
        pooled = evaluate(np.concatenate([preds[k][m] for k in range(settings.folds)]),
                          np.concatenate([y[m][f] for f in split.folds]), labels)
        out[m] = CrossValReport(m, list(labels), reports, pooled)
        log.info("%s: %.2f +- %.2f", m, out[m].mean_accuracy, out[m].std_accuracy)
    return out


def affect_labels(cycles: Sequence[GaitCycle]) -> np.ndarray:
    return np.array([AFFECTS.index(c.affect) for c in cycles], dtype=np.int64)


def subject_labels(cycles: Sequence[GaitCycle]) -> Tuple[np.ndarray, List[str]]:
    names = sorted({c.subject_id for c in cycles})
    return np.array([names.index(c.subject_id) for c in cycles], dtype=np.int64), names


def run_benchmark(cycles: Sequence[GaitCycle], ae_params: Optional[ModelParams],
                  models: Sequence[str] = MODELS, seed: int = 0,
                  settings: Optional[EvalSettings] = None) -> Dict[str, CrossValReport]:
    """Affect recognition with every requested model under one 5-fold split."""
    settings = settings or EvalSettings()
    unknown = set(models) - set(MODELS)
    if unknown:
        raise ValueError(f"unknown models: {sorted(unknown)}")
    if "ae-xyz" in models and ae_params is None:
        raise ValueError("ae-xyz needs a trained autoencoder checkpoint")
    y = affect_labels(cycles)
    return _cross_validate(cycles, models, AFFECTS, {m: y for m in models}, ae_params, seed, settings)


def privacy_eval(cycles: Sequence[GaitCycle], ae_params: ModelParams, seed: int = 0,
                 settings: Optional[EvalSettings] = None,
                 models: Sequence[str] = PRIVACY_MODELS) -> Dict[str, CrossValReport]:
    """Subject identification from raw cycles, from affect codes, and a shuffled-label control."""
    settings = settings or EvalSettings()
    y, names = subject_labels(cycles)
    ys = {m: y for m in models}
    if "svm-xyz-shuffled" in models:
        ys["svm-xyz-shuffled"] = np.random.default_rng([seed, 2]).permutation(y)
    return _cross_validate(cycles, models, names, ys, ae_params, seed, settings)


# ---------------------------------------------------------------------------
# persistence


def save_classifier(params: CnnParams, path) -> None:
    """GDAE tensors plus a ``<path>.json`` sidecar with the head kind and config."""
    tensors = dict(params.weights)
    for name, st in params.stats.items():
        tensors[f"{name}.running_mean"] = st.mean
        tensors[f"{name}.running_var"] = st.var
    save_checkpoint(path, tensors)
    cfg = asdict(params.config)
    cfg["channels"] = list(params.config.channels)
    cfg["kernels"] = list(params.config.kernels)
    Path(str(path) + ".json").write_text(json.dumps({"kind": params.kind, "config": cfg},
                                                    indent=2, sort_keys=True) + "\n")


def load_classifier(path) -> CnnParams:
    meta = json.loads(Path(str(path) + ".json").read_text())
    cfg = dict(meta["config"])
    cfg["channels"] = tuple(cfg["channels"])
    cfg["kernels"] = tuple(cfg["kernels"])
    flat = load_checkpoint(path)
    weights, stats = {}, {}
    for name, arr in flat.items():
        if name.endswith(".running_mean"):
            base = name[: -len(".running_mean")]
            stats[base] = ICState(arr, flat[base + ".running_var"])
        elif not name.endswith(".running_var"):
            weights[name] = arr
    return CnnParams(_strict(CnnConfig, cfg, "classifier"), meta["kind"], weights, stats)
