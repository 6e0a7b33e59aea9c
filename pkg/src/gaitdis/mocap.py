"""Skeleton topology, motion CSV/manifest I/O and the synthetic gait generator.

Axes: z up, y initial facing direction, x to the walker's right. Units are
metres and seconds.

The generator builds every trajectory as a sum of independent parts::

    joint(t) = rest_pose + subject_offsets[i] + subject_sway[i](t)
               + gait[j](t) + smooth_noise(t)

where ``gait[j]`` collects everything that depends on the affect (cadence,
stride, arm swing, posture flexion, pelvis translation). Subject terms do not
depend on the affect, so with the noise switched off
``x[i, j](t) - x[i, l](t) == gait[j](t) - gait[l](t)`` for every subject.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter1d

JOINT_NAMES: Tuple[str, ...] = (
    "head", "torso",
    "l_shl", "r_shl", "l_elb", "r_elb", "l_wrist", "r_wrist",
    "c_hip", "l_hip", "r_hip", "l_kne", "r_kne", "l_ank", "r_ank",
)
AFFECTS: Tuple[str, ...] = ("angry", "happy", "neutral", "sad")
AXES = ("x", "y", "z")


class ParseError(ValueError):
    """Malformed motion or manifest file."""


@dataclass(frozen=True)
class SkeletonTopology:
    joint_names: Tuple[str, ...]
    limbs: Tuple[Tuple[int, int], ...]
    root: int
    left_hip: int
    right_hip: int

    def __post_init__(self):
        n = len(self.joint_names)
        if n != 15:
            raise ValueError(f"skeleton must have 15 joints, got {n}")
        children = [c for _, c in self.limbs]
        if len(set(children)) != len(children) or self.root in children:
            raise ValueError("limbs must form a tree rooted at the root joint")
        if len(self.limbs) != n - 1:
            raise ValueError("limb set does not span every joint")
        reached = {self.root}
        for p, c in self.ordered_limbs():
            reached.add(c)
        if len(reached) != n:
            raise ValueError("limbs do not connect every joint to the root")

    def index(self, name: str) -> int:
        return self.joint_names.index(name)

    def ordered_limbs(self) -> List[Tuple[int, int]]:
        """Limbs with every parent visited before its children."""
        out, frontier = [], [self.root]
        while frontier:
            nxt = []
            for p in frontier:
                for limb in self.limbs:
                    if limb[0] == p:
                        out.append(limb)
                        nxt.append(limb[1])
            frontier = nxt
        return out

    def limb_name(self, limb: Tuple[int, int]) -> str:
        return f"{self.joint_names[limb[0]]}->{self.joint_names[limb[1]]}"

    def to_json(self) -> dict:
        return {"joint_names": list(self.joint_names), "limbs": [list(l) for l in self.limbs],
                "root": self.root, "left_hip": self.left_hip, "right_hip": self.right_hip}

    @classmethod
    def from_json(cls, d: dict) -> "SkeletonTopology":
        return cls(tuple(d["joint_names"]), tuple(tuple(l) for l in d["limbs"]),
                   int(d["root"]), int(d["left_hip"]), int(d["right_hip"]))


def default_topology() -> SkeletonTopology:
    j = {n: i for i, n in enumerate(JOINT_NAMES)}
    pairs = [
        ("c_hip", "torso"), ("torso", "head"),
        ("torso", "l_shl"), ("l_shl", "l_elb"), ("l_elb", "l_wrist"),
        ("torso", "r_shl"), ("r_shl", "r_elb"), ("r_elb", "r_wrist"),
        ("c_hip", "l_hip"), ("l_hip", "l_kne"), ("l_kne", "l_ank"),
        ("c_hip", "r_hip"), ("r_hip", "r_kne"), ("r_kne", "r_ank"),
    ]
    return SkeletonTopology(JOINT_NAMES, tuple((j[a], j[b]) for a, b in pairs),
                            j["c_hip"], j["l_hip"], j["r_hip"])


TOPOLOGY = default_topology()


def mirror_permutation(topology: SkeletonTopology = TOPOLOGY) -> np.ndarray:
    """Joint index permutation swapping every ``l_``/``r_`` pair."""
    names = topology.joint_names
    perm = []
    for n in names:
        if n.startswith("l_"):
            perm.append(names.index("r_" + n[2:]))
        elif n.startswith("r_"):
            perm.append(names.index("l_" + n[2:]))
        else:
            perm.append(names.index(n))
    return np.array(perm)


@dataclass
class MotionSequence:
    frames: np.ndarray  # T x 15 x 3, metres
    frame_rate: float
    subject_id: str
    affect: str
    seq_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[1:] != (15, 3):
            raise ValueError(f"frames must be T x 15 x 3, got {self.frames.shape}")
        if self.frames.shape[0] < 2:
            raise ValueError("a motion sequence needs at least 2 frames")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("motion frames must be finite")
        if self.affect not in AFFECTS:
            raise ValueError(f"unknown affect {self.affect!r}")
        if not self.frame_rate > 0:
            raise ValueError("frame_rate must be positive")
        if not self.seq_id:
            self.seq_id = f"{self.subject_id}_{self.affect}"

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


# ---------------------------------------------------------------------------
# CSV / JSON


def csv_header(topology: SkeletonTopology = TOPOLOGY) -> List[str]:
    return ["frame"] + [f"{n}_{a}" for n in topology.joint_names for a in AXES]


def write_motion_csv(seq: MotionSequence, path, topology: SkeletonTopology = TOPOLOGY) -> None:
    """Write ``path`` (wide CSV) and its ``.json`` sidecar."""
    frames = np.asarray(seq.frames)
    if frames.ndim != 3 or frames.shape[0] == 0:
        raise ValueError("refusing to write an empty motion sequence")
    path = Path(path)
    flat = frames.reshape(frames.shape[0], -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(topology))
        for t, row in enumerate(flat):
            w.writerow([t] + [repr(float(v)) for v in row])
    sidecar = {"subject_id": seq.subject_id, "affect": seq.affect,
               "frame_rate": seq.frame_rate, "skeleton": topology.to_json()}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def parse_motion_csv(path, subject_id: Optional[str] = None, affect: Optional[str] = None,
                     frame_rate: Optional[float] = None) -> MotionSequence:
    """Read a wide motion CSV; labels come from the sidecar unless given."""
    path = Path(path)
    meta = {}
    side = path.with_suffix(".json")
    if side.exists():
        meta = json.loads(side.read_text())
    topology = SkeletonTopology.from_json(meta["skeleton"]) if "skeleton" in meta else TOPOLOGY
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    cols = {}
    for name in csv_header(topology)[1:]:
        if name not in header:
            raise ParseError(f"{path}: missing column {name}")
        cols[name] = header.index(name)
    order = [cols[n] for n in csv_header(topology)[1:]]
    data = np.empty((len(rows) - 1, len(order)))
    for r, row in enumerate(rows[1:], start=2):
        try:
            data[r - 2] = [float(row[c]) for c in order]
        except (ValueError, IndexError) as exc:
            raise ParseError(f"{path}: row {r}: non-numeric or missing cell ({exc})") from None
    seq_subject = subject_id if subject_id is not None else meta.get("subject_id")
    seq_affect = affect if affect is not None else meta.get("affect")
    rate = frame_rate if frame_rate is not None else meta.get("frame_rate")
    if seq_subject is None or seq_affect is None or rate is None:
        raise ParseError(f"{path}: subject_id/affect/frame_rate not given and no sidecar found")
    return MotionSequence(data.reshape(len(data), 15, 3), float(rate), str(seq_subject),
                          str(seq_affect), seq_id=path.stem)


@dataclass
class ManifestEntry:
    file: str
    subject_id: str
    affect: str


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    skeleton: SkeletonTopology = TOPOLOGY
    provenance: str = ""

    def pairs(self) -> set:
        return {(e.subject_id, e.affect) for e in self.entries}

    def to_json(self) -> dict:
        return {"entries": [asdict(e) for e in self.entries], "skeleton": self.skeleton.to_json(),
                "provenance": self.provenance}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from None
        entries = [ManifestEntry(str(e["file"]), str(e["subject_id"]), str(e["affect"]))
                   for e in d["entries"]]
        for e in entries:
            if not Path(e.file).is_absolute():
                e.file = str(path.parent / e.file)
        skel = SkeletonTopology.from_json(d["skeleton"]) if "skeleton" in d else TOPOLOGY
        return cls(entries, skel, d.get("provenance", ""))

    def load_sequences(self) -> List[MotionSequence]:
        return [parse_motion_csv(e.file, e.subject_id, e.affect) for e in self.entries]


# ---------------------------------------------------------------------------
# synthetic gait

REST_POSE = np.array([
    [0.00, 0.00, 1.70],   # head
    [0.00, 0.00, 1.35],   # torso
    [-0.19, 0.00, 1.45],  # l_shl
    [0.19, 0.00, 1.45],   # r_shl
    [-0.22, 0.00, 1.17],  # l_elb
    [0.22, 0.00, 1.17],   # r_elb
    [-0.24, 0.03, 0.92],  # l_wrist
    [0.24, 0.03, 0.92],   # r_wrist
    [0.00, 0.00, 0.95],   # c_hip
    [-0.10, 0.00, 0.92],  # l_hip
    [0.10, 0.00, 0.92],   # r_hip
    [-0.11, 0.03, 0.50],  # l_kne
    [0.11, 0.03, 0.50],   # r_kne
    [-0.12, 0.00, 0.08],  # l_ank
    [0.12, 0.00, 0.08],   # r_ank
])


@dataclass
class AffectParams:
    stride_scale: float
    arm_swing: float     # wrist swing amplitude, metres
    flexion: float       # forward lean of the upper body, metres at head height
    cadence: float       # gait cycles per second
    bounce: float = 0.02  # pelvis vertical bob amplitude, metres


DEFAULT_AFFECT_PARAMS: Dict[str, AffectParams] = {
    "angry": AffectParams(1.15, 0.20, 0.03, 1.10, 0.025),
    "happy": AffectParams(1.12, 0.22, -0.02, 1.05, 0.030),
    "neutral": AffectParams(1.00, 0.15, 0.00, 0.95, 0.020),
    "sad": AffectParams(0.80, 0.08, 0.08, 0.80, 0.012),
}


@dataclass
class SynthConfig:
    n_subjects: int = 6
    n_affects: int = 4
    cycles_per_pair: int = 40
    frame_rate: float = 60.0
    noise_std: float = 0.005
    rng_seed: int = 7
    bone_scale_range: Tuple[float, float] = (0.9, 1.1)
    phase_offset_range: Tuple[float, float] = (0.0, 2 * math.pi)
    style_amplitude_range: Tuple[float, float] = (0.02, 0.05)
    sway_amplitude: float = 0.01
    sway_frequency: float = 0.23
    stride_length: float = 0.15
    affects: Dict[str, AffectParams] = field(default_factory=lambda: dict(DEFAULT_AFFECT_PARAMS))

    def validate(self) -> None:
        if self.n_affects != 4:
            raise ValueError("n_affects is fixed at 4")
        if self.n_subjects < 1 or self.cycles_per_pair < 1:
            raise ValueError("n_subjects and cycles_per_pair must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")
        lo, hi = self.bone_scale_range
        if not 0 < lo <= hi:
            raise ValueError("bone scales must be > 0")
        if self.style_amplitude_range[0] < 0 or self.sway_amplitude < 0:
            raise ValueError("amplitudes must be >= 0")
        for name, p in self.affects.items():
            if name not in AFFECTS:
                raise ValueError(f"unknown affect {name!r}")
            if min(p.stride_scale, p.cadence) <= 0 or min(p.arm_swing, p.bounce) < 0:
                raise ValueError(f"affect {name}: scales must be > 0")
        if set(self.affects) != set(AFFECTS):
            raise ValueError("parameters required for every affect")

    def to_json(self) -> dict:
        d = asdict(self)
        d["bone_scale_range"] = list(self.bone_scale_range)
        d["phase_offset_range"] = list(self.phase_offset_range)
        d["style_amplitude_range"] = list(self.style_amplitude_range)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth keys: {sorted(unknown)}")
        if "affects" in d:
            d["affects"] = {k: AffectParams(**v) for k, v in d["affects"].items()}
        for key in ("bone_scale_range", "phase_offset_range", "style_amplitude_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SubjectParams:
    subject_id: str
    bone_scale: float
    phase_offset: float
    style_amplitude: float
    offsets: np.ndarray  # 15 x 3, static posture deviation


class SynthGait:
    """Deterministic synthetic walker population for a :class:`SynthConfig`."""

    def __init__(self, cfg: SynthConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng([cfg.rng_seed, 0])
        self.subjects: List[SubjectParams] = []
        for s in range(cfg.n_subjects):
            scale = rng.uniform(*cfg.bone_scale_range)
            phase = rng.uniform(*cfg.phase_offset_range)
            amp = rng.uniform(*cfg.style_amplitude_range)
            direction = rng.normal(size=(15, 3))
            direction[TOPOLOGY.root] = 0.0
            direction /= np.sqrt((direction ** 2).sum(axis=1).mean() + 1e-300) if amp else 1.0
            offsets = (scale - 1.0) * REST_POSE + amp * direction
            self.subjects.append(SubjectParams(f"s{s:02d}", scale, phase, amp, offsets))
        self.affects = list(AFFECTS)

    # -- components -------------------------------------------------------
    def n_frames(self, affect: str) -> int:
        cad = self.cfg.affects[affect].cadence
        return int(math.ceil((self.cfg.cycles_per_pair + 2) / cad * self.cfg.frame_rate))

    def times(self, affect: str, n_frames: Optional[int] = None) -> np.ndarray:
        n = self.n_frames(affect) if n_frames is None else n_frames
        return np.arange(n) / self.cfg.frame_rate

    def gait_phase(self, affect: str, t: np.ndarray) -> np.ndarray:
        """Right-leg phase; heel strike at multiples of 2*pi, first at half a period."""
        return 2 * math.pi * self.cfg.affects[affect].cadence * t - math.pi

    def affect_component(self, affect: str, t: np.ndarray) -> np.ndarray:
        """Everything that depends on the affect (T x 15 x 3)."""
        p = self.cfg.affects[affect]
        j = {n: i for i, n in enumerate(JOINT_NAMES)}
        phi_r = self.gait_phase(affect, t)
        phi_l = phi_r + math.pi
        out = np.zeros((t.size, 15, 3))
        stride = self.cfg.stride_length * p.stride_scale
        speed = 4.0 * stride * p.cadence
        bob = p.bounce * np.cos(2 * phi_r)
        # whole body translates forward and bobs
        out[:, :, 1] += (speed * t)[:, None]
        out[:, :, 2] += bob[:, None]
        for side, phi in (("r", phi_r), ("l", phi_l)):
            # ankle loop: |acceleration| ~ |sin(phi/2)|, minimum at heel strike
            fwd = stride * (np.cos(phi) - np.cos(2 * phi) / 4)
            up = stride * (np.sin(phi) - np.sin(2 * phi) / 4)
            out[:, j[f"{side}_ank"], 1] += fwd
            out[:, j[f"{side}_ank"], 2] += up - bob + stride * 0.75
            out[:, j[f"{side}_kne"], 1] += 0.5 * fwd + 0.04 * p.stride_scale * np.sin(phi)
            out[:, j[f"{side}_kne"], 2] += 0.5 * (up - bob) + 0.3 * stride
            # arms swing opposite to the same-side leg
            swing = -np.cos(phi)
            out[:, j[f"{side}_wrist"], 1] += p.arm_swing * swing
            out[:, j[f"{side}_wrist"], 2] += 0.15 * p.arm_swing * (1 - np.cos(2 * phi))
            out[:, j[f"{side}_elb"], 1] += 0.45 * p.arm_swing * swing
        # posture flexion: forward lean grows with height above the pelvis
        height = np.clip(REST_POSE[:, 2] - REST_POSE[j["c_hip"], 2], 0.0, None)
        lean = p.flexion * height / (REST_POSE[j["head"], 2] - REST_POSE[j["c_hip"], 2])
        out[:, :, 1] += lean[None, :]
        out[:, j["head"], 2] -= 0.5 * p.flexion
        # pelvis yaw oscillation, larger for longer strides
        yaw = 0.05 * p.stride_scale * np.sin(phi_r)
        for side, sign in (("l", -1.0), ("r", 1.0)):
            half = abs(REST_POSE[j[f"{side}_hip"], 0])
            out[:, j[f"{side}_hip"], 0] += sign * half * (np.cos(yaw) - 1)
            out[:, j[f"{side}_hip"], 1] += sign * half * np.sin(yaw)
        return out

    def subject_component(self, subject: int, t: np.ndarray) -> np.ndarray:
        sp = self.subjects[subject]
        out = np.broadcast_to(REST_POSE + sp.offsets, (t.size, 15, 3)).copy()
        sway = self.cfg.sway_amplitude * np.sin(2 * math.pi * self.cfg.sway_frequency * t + sp.phase_offset)
        for name in ("head", "torso", "l_shl", "r_shl"):
            out[:, JOINT_NAMES.index(name), 0] += sway
        return out

    def noise(self, subject: int, affect: str, n_frames: int) -> np.ndarray:
        if self.cfg.noise_std == 0:
            return np.zeros((n_frames, 15, 3))
        rng = np.random.default_rng([self.cfg.rng_seed, 1, subject, AFFECTS.index(affect)])
        white = rng.normal(size=(n_frames, 15, 3))
        sigma = 0.15 * self.cfg.frame_rate
        smooth = gaussian_filter1d(white, sigma, axis=0, mode="nearest")
        # analytic std of unit white noise after the (normalised) gaussian kernel
        radius = int(4.0 * sigma + 0.5)
        x = np.arange(-radius, radius + 1)
        k = np.exp(-0.5 * (x / sigma) ** 2)
        k /= k.sum()
        return smooth * (self.cfg.noise_std / math.sqrt((k * k).sum()))

    # -- public --------------------------------------------------------------
    def clean(self, subject: int, affect: str, n_frames: Optional[int] = None) -> np.ndarray:
        t = self.times(affect, n_frames)
        return self.subject_component(subject, t) + self.affect_component(affect, t)

    def sequence(self, subject: int, affect: str) -> MotionSequence:
        n = self.n_frames(affect)
        frames = self.clean(subject, affect, n) + self.noise(subject, affect, n)
        sid = self.subjects[subject].subject_id
        return MotionSequence(frames, self.cfg.frame_rate, sid, affect, seq_id=f"{sid}_{affect}")

    def cycle_bounds(self, affect: str, cycle_index: int) -> Tuple[int, int]:
        """Frame range [start, end) of the true gait cycle ``cycle_index``."""
        cad = self.cfg.affects[affect].cadence
        fr = self.cfg.frame_rate
        start = int(math.ceil((cycle_index + 0.5) / cad * fr))
        end = int(math.ceil((cycle_index + 1.5) / cad * fr))
        return start, end

    def subject_index(self, subject) -> int:
        if isinstance(subject, (int, np.integer)):
            if not 0 <= subject < len(self.subjects):
                raise ValueError(f"unknown subject index {subject}")
            return int(subject)
        for i, sp in enumerate(self.subjects):
            if sp.subject_id == subject:
                return i
        raise ValueError(f"unknown subject {subject!r}")


def synth_generate(cfg: SynthConfig) -> Tuple[List[MotionSequence], DatasetManifest, SynthGait]:
    """One multi-cycle walk per (subject, affect) pair, plus its manifest."""
    gen = SynthGait(cfg)
    seqs = [gen.sequence(s, a) for s in range(cfg.n_subjects) for a in AFFECTS]
    manifest = DatasetManifest(
        [ManifestEntry(f"{q.seq_id}.csv", q.subject_id, q.affect) for q in seqs],
        TOPOLOGY,
        f"synthetic gait, seed={cfg.rng_seed}, {cfg.n_subjects} subjects x 4 affects, "
        f"{cfg.cycles_per_pair} cycles/pair, noise_std={cfg.noise_std}",
    )
    return seqs, manifest, gen


def exact_cross_target(gen: SynthGait, subject, affect: str,
                       cycle_index: Optional[int] = None) -> MotionSequence:
    """Noise-free trajectory of ``subject`` walking with ``affect``.

    With ``cycle_index`` the frames of that true gait cycle are returned,
    otherwise the full sequence.
    """
    if affect not in AFFECTS:
        raise ValueError(f"unknown affect {affect!r}")
    k = gen.subject_index(subject)
    frames = gen.clean(k, affect)
    sid = gen.subjects[k].subject_id
    if cycle_index is not None:
        if not 0 <= cycle_index < gen.cfg.cycles_per_pair + 1:
            raise ValueError(f"cycle index {cycle_index} out of range")
        start, end = gen.cycle_bounds(affect, cycle_index)
        frames = frames[start:end]
    return MotionSequence(frames, gen.cfg.frame_rate, sid, affect,
                          seq_id=f"{sid}_{affect}_target" + ("" if cycle_index is None else f"_{cycle_index}"))


def write_dataset(seqs: Sequence[MotionSequence], manifest: DatasetManifest, out_dir) -> Path:
    """Write every sequence plus ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for seq in seqs:
        write_motion_csv(seq, out / f"{seq.seq_id}.csv", manifest.skeleton)
    manifest.save(out / "manifest.json")
    return out / "manifest.json"
