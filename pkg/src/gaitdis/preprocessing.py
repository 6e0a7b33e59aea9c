"""Raw motion -> normalised 128-frame gait cycles.

Order of operations: heel-strike detection on the SSA-smoothed right-ankle
acceleration, segmentation, displacement removal, rotation removal, bone
normalisation, resampling, per-cycle z-scoring.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.signal import find_peaks

from .mocap import TOPOLOGY, DatasetManifest, MotionSequence, SkeletonTopology

log = logging.getLogger(__name__)

CYCLE_LEN = 128
UP = np.array([0.0, 0.0, 1.0])
ZSCORE_EPS = 1e-8


class NoGaitCycleError(ValueError):
    """Fewer than two heel strikes were found."""


class DegeneratePoseError(ValueError):
    """The hip line cannot define a facing direction."""


@dataclass(frozen=True)
class SsaParams:
    window: int
    components: int = 2

    @classmethod
    def for_frame_rate(cls, frame_rate: float, components: int = 2) -> "SsaParams":
        return cls(max(2, int(round(frame_rate / 3))), components)

    def validate(self, length: Optional[int] = None) -> None:
        if self.window < 2 or not 1 <= self.components <= self.window:
            raise ValueError(f"invalid SSA parameters {self}")
        if length is not None and length < 2 * self.window:
            raise ValueError(f"series of length {length} too short for SSA window {self.window}")


@dataclass
class GaitCycle:
    tensor: np.ndarray            # 45 x 128, z-scored; channel = 3 * joint + axis
    subject_id: str
    affect: str
    source: Tuple[str, int, int]  # (sequence id, start frame, end frame exclusive)
    norm_mean: float
    norm_std: float
    geometry: np.ndarray          # 128 x 15 x 3 after bone normalisation, before z-score
    aligned: np.ndarray           # N x 15 x 3 after rotation removal, before bone normalisation

    @property
    def frames(self) -> np.ndarray:
        """The z-scored cycle as 128 x 15 x 3."""
        return self.tensor.T.reshape(CYCLE_LEN, 15, 3)


# ---------------------------------------------------------------------------
# SSA


def ssa_smooth(series, params: SsaParams) -> np.ndarray:
    """Reconstruct a series from its leading ``components`` SSA eigentriples."""
    x = np.asarray(series, dtype=np.float64)
    n = x.size
    params.validate(n)
    if np.ptp(x) == 0:
        return x.copy()
    L = params.window
    traj = np.lib.stride_tricks.sliding_window_view(x, L).T  # L x K
    _, vecs = np.linalg.eigh(traj @ traj.T)
    u = vecs[:, ::-1][:, :params.components]
    approx = u @ (u.T @ traj)
    # diagonal averaging (Hankelisation)
    out = np.zeros(n)
    counts = np.zeros(n)
    K = traj.shape[1]
    for i in range(L):
        out[i:i + K] += approx[i]
        counts[i:i + K] += 1
    return out / counts


# ---------------------------------------------------------------------------
# segmentation


def ankle_acceleration(frames: np.ndarray, joint: int) -> np.ndarray:
    """Magnitude of the second central difference; entry ``i`` belongs to frame ``i + 1``."""
    p = frames[:, joint, :]
    acc = p[2:] - 2 * p[1:-1] + p[:-2]
    return np.sqrt((acc * acc).sum(axis=1))


def detect_heel_strikes(motion: MotionSequence, ssa: Optional[SsaParams] = None,
                        topology: SkeletonTopology = TOPOLOGY) -> List[int]:
    """Frame indices of right heel strikes (minima of smoothed ankle acceleration)."""
    if motion.n_frames < 3:
        raise NoGaitCycleError(f"{motion.seq_id}: need at least 3 frames")
    ssa = ssa or SsaParams.for_frame_rate(motion.frame_rate)
    acc = ankle_acceleration(motion.frames, topology.index("r_ank"))
    if acc.size < 2 * ssa.window:
        raise NoGaitCycleError(f"{motion.seq_id}: sequence too short for SSA window {ssa.window}")
    smooth = ssa_smooth(acc, ssa)
    span = np.ptp(smooth)
    if span <= 1e-12 * max(1.0, float(np.abs(smooth).max())):
        raise NoGaitCycleError(f"{motion.seq_id}: no complete gait cycle (flat acceleration)")
    minima, _ = find_peaks(-smooth, distance=max(1, int(round(0.4 * motion.frame_rate))),
                           prominence=0.1 * span)
    strikes = [int(m) + 1 for m in minima]
    if len(strikes) < 2:
        raise NoGaitCycleError(f"{motion.seq_id}: no complete gait cycle ({len(strikes)} minima)")
    return strikes


def segment_cycles(motion: MotionSequence, strikes: Sequence[int]) -> List[Tuple[int, int, np.ndarray]]:
    """One ``(start, end, frames)`` per consecutive strike pair, end exclusive."""
    return [(int(a), int(b), motion.frames[a:b]) for a, b in zip(strikes[:-1], strikes[1:])]


# ---------------------------------------------------------------------------
# geometric normalisation


def remove_displacement(frames: np.ndarray, root: int = TOPOLOGY.root) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    return frames - frames[:, root:root + 1, :]


def facing_basis(left_hip: np.ndarray, right_hip: np.ndarray) -> np.ndarray:
    """Per-frame rotation matrices (T x 3 x 3) whose rows are (right, facing, up)."""
    hip = left_hip - right_hip
    norm = np.linalg.norm(hip, axis=1)
    if np.any(norm < 1e-12):
        raise DegeneratePoseError("left and right hip coincide")
    l_hp = hip / norm[:, None]
    if np.any(np.abs(l_hp @ UP) > 0.99):
        raise DegeneratePoseError("hip line is nearly vertical")
    facing = np.cross(l_hp, UP)
    facing /= np.linalg.norm(facing, axis=1)[:, None]
    right = np.cross(facing, UP)
    basis = np.stack([right, facing, np.broadcast_to(UP, right.shape)], axis=1)
    return basis


def remove_rotation(frames: np.ndarray, topology: SkeletonTopology = TOPOLOGY) -> np.ndarray:
    """Rotate every frame about the vertical so the walker faces +y, right hip toward +x."""
    frames = np.asarray(frames, dtype=np.float64)
    basis = facing_basis(frames[:, topology.left_hip], frames[:, topology.right_hip])
    return np.einsum("tij,tkj->tki", basis, frames)


def limb_lengths(frames: np.ndarray, topology: SkeletonTopology = TOPOLOGY) -> np.ndarray:
    """T x n_limbs lengths in ``topology.limbs`` order."""
    p = np.array([l[0] for l in topology.limbs])
    c = np.array([l[1] for l in topology.limbs])
    return np.linalg.norm(frames[:, c] - frames[:, p], axis=2)


def mean_limb_lengths(cycles: Iterable[np.ndarray], topology: SkeletonTopology = TOPOLOGY) -> np.ndarray:
    """Mean length of every limb over all frames of ``cycles``."""
    total = np.zeros(len(topology.limbs))
    count = 0
    for frames in cycles:
        lengths = limb_lengths(frames, topology)
        total += lengths.sum(axis=0)
        count += lengths.shape[0]
    if count == 0:
        raise ValueError("no frames to compute limb means from")
    return total / count


def normalize_bones(frames: np.ndarray, mean_lengths: np.ndarray,
                    topology: SkeletonTopology = TOPOLOGY) -> np.ndarray:
    """Rescale limbs, parent before child, to ``mean_lengths`` keeping directions."""
    frames = np.asarray(frames, dtype=np.float64)
    out = frames.copy()
    index = {limb: i for i, limb in enumerate(topology.limbs)}
    for limb in topology.ordered_limbs():
        p, c = limb
        vec = frames[:, c] - frames[:, p]
        length = np.linalg.norm(vec, axis=1)
        bad = np.flatnonzero(length < 1e-12)
        if bad.size:
            raise ValueError(f"zero-length limb {topology.limb_name(limb)} at frame {int(bad[0])}")
        alpha = mean_lengths[index[limb]] / length
        out[:, c] = alpha[:, None] * vec + out[:, p]
    return out


def resample_cycle(frames: np.ndarray, target_len: int = CYCLE_LEN) -> np.ndarray:
    """Linear interpolation onto ``target_len`` frames; endpoints kept exactly."""
    frames = np.asarray(frames, dtype=np.float64)
    n = frames.shape[0]
    if n < 2:
        raise ValueError("need at least 2 frames to resample")
    if n == target_len:
        return frames.copy()
    pos = np.linspace(0.0, n - 1.0, target_len)
    lo = np.minimum(np.floor(pos).astype(int), n - 2)
    frac = (pos - lo).reshape((-1,) + (1,) * (frames.ndim - 1))
    out = (1.0 - frac) * frames[lo] + frac * frames[lo + 1]
    out[0] = frames[0]
    out[-1] = frames[-1]
    return out


def zscore(tensor: np.ndarray) -> Tuple[np.ndarray, float, float]:
    """Per-cycle scalar standardisation; returns (tensor, mean, std)."""
    tensor = np.asarray(tensor, dtype=np.float64)
    mu = float(tensor.mean())
    sd = float(tensor.std())
    return (tensor - mu) / max(sd, ZSCORE_EPS), mu, sd


def to_channels(frames: np.ndarray) -> np.ndarray:
    """T x 15 x 3 -> 45 x T."""
    return np.asarray(frames).reshape(frames.shape[0], -1).T.copy()


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class AlignedCycle:
    """A segmented cycle after displacement and rotation removal."""

    frames: np.ndarray
    subject_id: str
    affect: str
    source: Tuple[str, int, int]


@dataclass
class PipelineResult:
    cycles: List[GaitCycle]
    mean_lengths: Optional[np.ndarray]
    errors: Dict[str, str] = field(default_factory=dict)


class PipelineError(ValueError):
    def __init__(self, errors: Dict[str, str]):
        self.errors = errors
        lines = "; ".join(f"{k}: {v}" for k, v in sorted(errors.items()))
        super().__init__(f"preprocessing failed for {len(errors)} sequence(s): {lines}")


def align_sequence(motion: MotionSequence, ssa: Optional[SsaParams] = None,
                   topology: SkeletonTopology = TOPOLOGY) -> List[AlignedCycle]:
    strikes = detect_heel_strikes(motion, ssa, topology)
    out = []
    for start, end, frames in segment_cycles(motion, strikes):
        frames = remove_rotation(remove_displacement(frames, topology.root), topology)
        out.append(AlignedCycle(frames, motion.subject_id, motion.affect, (motion.seq_id, start, end)))
    return out


def finish_cycle(aligned: AlignedCycle, mean_lengths: np.ndarray,
                 topology: SkeletonTopology = TOPOLOGY) -> GaitCycle:
    """Bone normalisation, resampling and z-scoring of one aligned cycle."""
    geometry = resample_cycle(normalize_bones(aligned.frames, mean_lengths, topology))
    tensor, mu, sd = zscore(to_channels(geometry))
    return GaitCycle(tensor, aligned.subject_id, aligned.affect, aligned.source, mu, sd,
                     geometry, aligned.frames)


def renormalize(cycles: Sequence[GaitCycle], train_index: Optional[Sequence[int]] = None,
                topology: SkeletonTopology = TOPOLOGY) -> Tuple[List[GaitCycle], np.ndarray]:
    """Refit limb means on ``cycles[train_index]`` and redo the final stages for all cycles."""
    idx = range(len(cycles)) if train_index is None else train_index
    means = mean_limb_lengths((cycles[i].aligned for i in idx), topology)
    out = [finish_cycle(AlignedCycle(c.aligned, c.subject_id, c.affect, c.source), means, topology)
           for c in cycles]
    return out, means


def preprocess_pipeline(data: Union[DatasetManifest, Sequence[MotionSequence]],
                        ssa: Optional[SsaParams] = None,
                        split: Optional[Iterable[str]] = None,
                        topology: Optional[SkeletonTopology] = None,
                        mean_lengths: Optional[np.ndarray] = None,
                        strict: bool = True) -> PipelineResult:
    """Run the full pipeline over a manifest or in-memory sequences.

    ``split`` names the sequence ids whose cycles define the mean limb lengths
    (all sequences when omitted); ``mean_lengths`` overrides that fit. Errors
    are collected per sequence and raised together when ``strict``.
    """
    if isinstance(data, DatasetManifest):
        topology = topology or data.skeleton
        seqs = data.load_sequences()
    else:
        seqs = list(data)
    topology = topology or TOPOLOGY
    errors: Dict[str, str] = {}
    aligned: List[AlignedCycle] = []
    for seq in seqs:
        try:
            aligned.extend(align_sequence(seq, ssa, topology))
        except ValueError as exc:
            errors[seq.seq_id] = str(exc)
    if errors and strict:
        raise PipelineError(errors)
    if not aligned:
        return PipelineResult([], mean_lengths, errors)
    if mean_lengths is None:
        train = set(split) if split is not None else None
        chosen = [a.frames for a in aligned if train is None or a.source[0] in train]
        mean_lengths = mean_limb_lengths(chosen, topology)
    cycles = [finish_cycle(a, mean_lengths, topology) for a in aligned]
    return PipelineResult(cycles, mean_lengths, errors)


def preprocess_known_cycle(frames: np.ndarray, mean_lengths: np.ndarray,
                           topology: SkeletonTopology = TOPOLOGY) -> np.ndarray:
    """Normalise a cycle whose boundaries are already known; returns 45 x 128."""
    aligned = remove_rotation(remove_displacement(frames, topology.root), topology)
    geometry = resample_cycle(normalize_bones(aligned, mean_lengths, topology))
    return zscore(to_channels(geometry))[0]


# ---------------------------------------------------------------------------
# cycle store: one CSV per cycle (the model input, 128 frames x 45 signals),
# an index JSON with provenance and normalization records, and .npy arrays
# holding the pre-z-score geometry needed to refit limb means per fold


def _cycle_header(topology: SkeletonTopology) -> List[str]:
    return ["frame"] + [f"{j}_{a}" for j in topology.joint_names for a in "xyz"]


def save_cycles(cycles: Sequence[GaitCycle], out_dir, mean_lengths: Optional[np.ndarray] = None,
                topology: SkeletonTopology = TOPOLOGY) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not cycles:
        raise ValueError("no cycles to save")
    header = ",".join(_cycle_header(topology))
    index = []
    for i, c in enumerate(cycles):
        name = f"cycle_{i:05d}.csv"
        rows = [header] + [",".join([str(t)] + [repr(float(v)) for v in c.tensor[:, t]])
                           for t in range(c.tensor.shape[1])]
        (out / name).write_text("\n".join(rows) + "\n")
        index.append({"file": name, "subject_id": c.subject_id, "affect": c.affect,
                      "source": list(c.source), "norm_mean": c.norm_mean, "norm_std": c.norm_std})
    offsets = np.cumsum([0] + [len(c.aligned) for c in cycles])
    np.save(out / "geometry.npy", np.stack([c.geometry for c in cycles]))
    np.save(out / "aligned.npy", np.concatenate([c.aligned for c in cycles]))
    np.save(out / "aligned_offsets.npy", offsets)
    doc = {"cycles": index, "skeleton": topology.to_json(),
           "mean_limb_lengths": None if mean_lengths is None else [float(v) for v in mean_lengths]}
    (out / "cycles.json").write_text(json.dumps(doc, indent=1) + "\n")
    return out


def load_cycles(cycle_dir) -> List[GaitCycle]:
    d = Path(cycle_dir)
    if not (d / "cycles.json").is_file():
        raise FileNotFoundError(f"{d}: not a cycle directory (cycles.json missing)")
    index = json.loads((d / "cycles.json").read_text())["cycles"]
    geometry = np.load(d / "geometry.npy")
    aligned = np.load(d / "aligned.npy")
    offsets = np.load(d / "aligned_offsets.npy")
    if not len(index) == len(geometry) == len(offsets) - 1:
        raise ValueError(f"{d}: inconsistent cycle store")
    out = []
    for i, e in enumerate(index):
        tensor = np.loadtxt(d / e["file"], delimiter=",", skiprows=1, ndmin=2)[:, 1:].T
        if tensor.shape != (45, CYCLE_LEN):
            raise ValueError(f"{d / e['file']}: expected {CYCLE_LEN} rows of 45 signals")
        out.append(GaitCycle(np.ascontiguousarray(tensor), e["subject_id"], e["affect"],
                             (e["source"][0], int(e["source"][1]), int(e["source"][2])),
                             float(e["norm_mean"]), float(e["norm_std"]), geometry[i],
                             aligned[offsets[i]:offsets[i + 1]]))
    return out
