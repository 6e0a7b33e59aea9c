"""Guided Grad-CAM attributions for affect classification and their
aggregation into per-joint contributions and body-part activation curves."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Graph
from .classifiers import (CnnConfig, CnnParams, FoldSplit, affect_labels, cnn_classifier_predict,
                          cnn_classifier_train, cnn_logits, stratified_kfold)
from .mocap import AFFECTS, AXES, TOPOLOGY, SkeletonTopology, mirror_permutation
from .model import Forward, ModelParams
from .training import encode_all

log = logging.getLogger(__name__)

BODY_GROUPS: Dict[str, Tuple[str, ...]] = {
    "upper": ("head", "torso", "l_shl", "r_shl", "l_elb", "r_elb", "l_wrist", "r_wrist"),
    "mid": ("l_hip", "r_hip"),
    "lower": ("l_kne", "r_kne", "l_ank", "r_ank"),
}
AXIS_RETAIN_SHARE = 0.15
SPLITS = ("all", "correct", "incorrect")


class UnsupportedModelError(ValueError):
    """The classifier path has no convolutional layer to build a CAM from."""


@dataclass
class AffectPath:
    """A classifier over cycles: either a raw CNN, or the affect encoder
    followed by a dense head on its codes."""

    classifier: CnnParams
    encoder: Optional[ModelParams] = None

    def build(self, x: np.ndarray):
        """Return (graph, input tensor, last conv feature map, logits) in eval mode."""
        g = Graph()
        xin = g.input(np.asarray(x, dtype=np.float64))
        if self.encoder is not None:
            fw = Forward(self.encoder, "eval", graph=g)
            code = fw.encode("ea", xin)
            _, logits, _ = cnn_logits(self.classifier, code)
            return g, xin, fw.feature_maps["ea"], logits
        if self.classifier.kind != "raw":
            raise UnsupportedModelError("a dense-only classifier has no convolutional layer for Grad-CAM")
        _, logits, fmap = cnn_logits(self.classifier, xin)
        return g, xin, fmap, logits

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.build(x)[3].data, axis=-1)


@dataclass
class AttributionMap:
    """Attribution values laid out like the model input (45 signals x 128 frames)."""

    values: np.ndarray
    predicted: int
    true: int

    @property
    def correct(self) -> bool:
        return self.predicted == self.true

    @property
    def frames_major(self) -> np.ndarray:
        """The same values as frames x signals (128 x 45)."""
        return self.values.T


def _one_hot(logits: np.ndarray, target: np.ndarray) -> np.ndarray:
    seed = np.zeros_like(logits)
    seed[np.arange(len(logits)), target] = 1.0
    return seed


def _batch(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 2 else (x, False)


def _targets(target, n: int, n_classes: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(target, dtype=np.int64), (n,)).copy()
    if t.min() < 0 or t.max() >= n_classes:
        raise ValueError(f"target class must lie in [0, {n_classes})")
    return t


def cam_from_features(features: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """ReLU of the feature channels weighted by their time-averaged gradients (C x T -> T)."""
    weights = grads.mean(axis=-1, keepdims=True)
    return np.maximum((weights * features).sum(axis=-2), 0.0)


def grad_cam(path: AffectPath, x: np.ndarray, target) -> np.ndarray:
    """Coarse class-activation heatmap over the last conv layer's time axis.

    The class score is the pre-softmax logit of ``target``.
    """
    xb, single = _batch(x)
    g, _, fmap, logits = path.build(xb)
    t = _targets(target, len(xb), logits.shape[-1])
    tape = ad.backprop(g, logits, _one_hot(logits.data, t))
    cam = cam_from_features(fmap.data, tape[fmap])
    return cam[0] if single else cam


def upsample_heatmap(cam: np.ndarray, length: int) -> np.ndarray:
    """Linear interpolation of a coarse heatmap onto ``length`` frames (end points aligned)."""
    cam = np.asarray(cam, dtype=np.float64)
    src = np.linspace(0.0, 1.0, cam.shape[-1])
    dst = np.linspace(0.0, 1.0, length)
    if cam.ndim == 1:
        return np.interp(dst, src, cam)
    return np.stack([np.interp(dst, src, row) for row in cam])


def combine_attribution(guided: np.ndarray, cam: np.ndarray) -> np.ndarray:
    """Guided gradients (.. x C x T) times the upsampled heatmap broadcast over signals."""
    fine = upsample_heatmap(cam, guided.shape[-1])
    return guided * fine[..., None, :]


def guided_grad_cam(path: AffectPath, x: np.ndarray, target, labels=None):
    """Attribution maps for ``x`` (45 x 128 or N x 45 x 128) towards ``target``.

    Returns an :class:`AttributionMap` (or a list for batched input).
    """
    xb, single = _batch(x)
    g, xin, fmap, logits = path.build(xb)
    t = _targets(target, len(xb), logits.shape[-1])
    seed = _one_hot(logits.data, t)
    cam = cam_from_features(fmap.data, ad.backprop(g, logits, seed)[fmap])
    guided = ad.guided_backprop_gradients(g, logits, seed)[xin]
    values = combine_attribution(guided, cam)
    pred = np.argmax(logits.data, axis=-1)
    truth = t if labels is None else np.broadcast_to(np.asarray(labels), (len(xb),))
    maps = [AttributionMap(values[i], int(pred[i]), int(truth[i])) for i in range(len(xb))]
    return maps[0] if single else maps


def normalize_sample(values: np.ndarray) -> np.ndarray:
    """Min-max normalize absolute attributions to [0, 1]; a constant map becomes zeros."""
    a = np.abs(np.asarray(values, dtype=np.float64))
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def joint_summaries(normalized: np.ndarray, topology: SkeletonTopology = TOPOLOGY) -> np.ndarray:
    """Mean over each joint's three signals and all frames (45 x T -> 15)."""
    v = np.asarray(normalized, dtype=np.float64)
    return v.reshape(len(topology.joint_names), 3, -1).mean(axis=(1, 2))


@dataclass
class GlobalAttributionReport:
    classes: List[str]
    joints: List[str]
    # split -> class x joint percentages
    percentages: Dict[str, np.ndarray]
    counts: Dict[str, np.ndarray]
    # split -> class x group x axis x frame mean normalized attribution
    curves: Dict[str, np.ndarray]
    # class x group x axis
    retained: np.ndarray
    groups: List[str] = field(default_factory=lambda: list(BODY_GROUPS))


def aggregate_global(maps: Sequence[AttributionMap], classes: Sequence[str] = AFFECTS,
                     topology: SkeletonTopology = TOPOLOGY) -> GlobalAttributionReport:
    """Per-class joint percentages and body-part curves, grouped by the true class.

    Percentages are summed joint scalars over the class's samples divided by
    the summed scalars of all joints, times 100.
    """
    n_c, n_j = len(classes), len(topology.joint_names)
    groups = list(BODY_GROUPS)
    length = None
    sums = {s: np.zeros((n_c, n_j)) for s in SPLITS}
    counts = {s: np.zeros(n_c, dtype=np.int64) for s in SPLITS}
    curve_sums: Dict[str, np.ndarray] = {}
    signal_sets = [[[3 * topology.index(j) + a for j in BODY_GROUPS[g]] for a in range(3)] for g in groups]
    for m in maps:
        norm = normalize_sample(m.values)
        if length is None:
            length = norm.shape[-1]
            curve_sums = {s: np.zeros((n_c, len(groups), 3, length)) for s in SPLITS}
        js = joint_summaries(norm, topology)
        curves = np.array([[norm[idx].mean(axis=0) for idx in per_axis] for per_axis in signal_sets])
        for s in ("all", "correct" if m.correct else "incorrect"):
            sums[s][m.true] += js
            counts[s][m.true] += 1
            curve_sums[s][m.true] += curves
    missing = [classes[c] for c in range(n_c) if counts["all"][c] == 0]
    if missing:
        raise ValueError(f"no attribution maps for classes {missing}")
    pct, curves_out = {}, {}
    for s in SPLITS:
        total = sums[s].sum(axis=1, keepdims=True)
        if s == "all" and np.any(total == 0):
            warnings.warn("class with zero total activation: percentages reported as 0")
        pct[s] = np.divide(sums[s] * 100.0, total, out=np.zeros_like(sums[s]), where=total > 0)
        n = counts[s][:, None, None, None]
        curves_out[s] = np.divide(curve_sums[s], n, out=np.zeros_like(curve_sums[s]), where=n > 0)
    mass = curves_out["all"].sum(axis=-1)
    share = np.divide(mass, mass.sum(axis=-1, keepdims=True), out=np.zeros_like(mass),
                      where=mass.sum(axis=-1, keepdims=True) > 0)
    return GlobalAttributionReport(list(classes), list(topology.joint_names), pct, counts,
                                   curves_out, share >= AXIS_RETAIN_SHARE, groups)


# ---------------------------------------------------------------------------
# dataset-level attribution


@dataclass
class ExplainSettings:
    folds: int = 5
    batch: int = 64
    per_sample: bool = False

    @classmethod
    def from_json(cls, d: dict) -> "ExplainSettings":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown explain keys: {sorted(unknown)}")
        return cls(**d)


def attribute(path: AffectPath, x: np.ndarray, labels: np.ndarray, batch: int = 64) -> List[AttributionMap]:
    """Attribute each cycle towards its predicted class (the class the model explains)."""
    out: List[AttributionMap] = []
    for i in range(0, len(x), batch):
        xb = x[i:i + batch]
        pred = path.predict(xb)
        out += guided_grad_cam(path, xb, pred, labels[i:i + batch])
    return out


def explain_cross_validated(cycles, ae_params: ModelParams, seed: int = 0,
                            settings: Optional[ExplainSettings] = None,
                            cnn: Optional[CnnConfig] = None) -> Tuple[List[AttributionMap], np.ndarray]:
    """Attribute every cycle with the AE-xyz classifier trained on the other folds.

    Returns the maps in fold order and the matching cycle indices.
    """
    settings = settings or ExplainSettings()
    cnn = cnn or CnnConfig()
    y = affect_labels(cycles)
    x = np.stack([c.tensor for c in cycles])
    codes = encode_all(ae_params, x, "ea")
    split = stratified_kfold([(c.subject_id, c.affect) for c in cycles], settings.folds, seed)
    maps: List[AttributionMap] = []
    order: List[np.ndarray] = []
    for k in range(settings.folds):
        train, test = split.train_test(k)
        clf = cnn_classifier_train(codes[train], y[train], cnn, seed + k)
        maps += attribute(AffectPath(clf, ae_params), x[test], y[test], settings.batch)
        order.append(test)
    return maps, np.concatenate(order)


# ---------------------------------------------------------------------------
# mirror harness


def mirror_signals(x: np.ndarray, topology: SkeletonTopology = TOPOLOGY) -> np.ndarray:
    """Swap left/right joints and negate the lateral (x) axis of 45-signal data."""
    perm = mirror_permutation(topology)
    chans = np.array([3 * perm[j] + a for j in range(len(perm)) for a in range(3)])
    sign = np.tile([-1.0, 1.0, 1.0], len(perm))[:, None]
    x = np.asarray(x, dtype=np.float64)
    return x[..., chans, :] * sign


def mirror_first_layer(w: np.ndarray, topology: SkeletonTopology = TOPOLOGY) -> np.ndarray:
    """Input-side kernels (C_out x 45 x K) that see mirrored data as the originals saw the data."""
    return mirror_signals(w, topology)


# ---------------------------------------------------------------------------
# outputs


def emit_attribution_report(report: GlobalAttributionReport, out_dir) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "joint_contributions.csv", out / "bodypart_curves.csv"]
    with open(paths[0], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "joint", "pct", "pct_correct", "pct_incorrect", "n", "n_correct", "n_incorrect"])
        for c, cls in enumerate(report.classes):
            for j, joint in enumerate(report.joints):
                w.writerow([cls, joint] + [repr(float(report.percentages[s][c, j])) for s in SPLITS]
                           + [int(report.counts[s][c]) for s in SPLITS])
    with open(paths[1], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "group", "axis", "frame", "value", "value_correct", "retained"])
        for c, cls in enumerate(report.classes):
            for g, group in enumerate(report.groups):
                for a, axis in enumerate(AXES):
                    for t in range(report.curves["all"].shape[-1]):
                        w.writerow([cls, group, axis, t, repr(float(report.curves["all"][c, g, a, t])),
                                    repr(float(report.curves["correct"][c, g, a, t])),
                                    int(report.retained[c, g, a])])
    from .plots import attribution_bars, bodypart_curves
    paths.append(attribution_bars(report, out / "joint_contributions.svg"))
    paths.append(bodypart_curves(report, out / "bodypart_curves.svg"))
    return paths


def read_joint_contributions(path) -> Dict[Tuple[str, str], Dict[str, float]]:
    with open(path, newline="") as fh:
        return {(r["class"], r["joint"]): {k: float(r[k]) for k in ("pct", "pct_correct", "pct_incorrect")}
                for r in csv.DictReader(fh)}


def write_attribution_maps(maps: Sequence[AttributionMap], index: np.ndarray, path) -> None:
    """Per-sample maps as a compressed array archive (for ``--per-sample``)."""
    np.savez_compressed(path, values=np.stack([m.values for m in maps]), index=np.asarray(index),
                        predicted=np.array([m.predicted for m in maps]),
                        true=np.array([m.true for m in maps]))


def latent_pca(codes: np.ndarray, dims: int = 2) -> np.ndarray:
    """Project codes on their leading principal axes (signs fixed so the largest loading is positive)."""
    c = np.asarray(codes, dtype=np.float64)
    centred = c - c.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    vt = vt[:dims]
    signs = np.sign(vt[np.arange(len(vt)), np.argmax(np.abs(vt), axis=1)])
    return centred @ (vt * signs[:, None]).T
