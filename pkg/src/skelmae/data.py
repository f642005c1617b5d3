"""Skeleton sequences: NTU ingestion, preprocessing, synthetic actions, splits."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NUM_JOINTS = 25
COORD_DIM = 3

# Standard NTU RGB+D 25-joint kinematic tree, zero-based (child, parent).
NTU_BONES: tuple[tuple[int, int], ...] = (
    (0, 1), (1, 20), (2, 20), (3, 2), (4, 20), (5, 4), (6, 5), (7, 6),
    (8, 20), (9, 8), (10, 9), (11, 10), (12, 0), (13, 12), (14, 13), (15, 14),
    (16, 0), (17, 16), (18, 17), (19, 18), (21, 22), (22, 7), (23, 24), (24, 11),
)

# Neutral standing pose in meters, indexed like the NTU joints.
NTU_BASE_POSE = np.array([
    [0.00, 0.00, 3.00],    # 0  spine base
    [0.00, 0.30, 3.00],    # 1  spine mid
    [0.00, 0.62, 3.00],    # 2  neck
    [0.00, 0.75, 3.00],    # 3  head
    [-0.18, 0.52, 3.00],   # 4  left shoulder
    [-0.30, 0.28, 3.00],   # 5  left elbow
    [-0.36, 0.05, 3.00],   # 6  left wrist
    [-0.38, -0.02, 3.00],  # 7  left hand
    [0.18, 0.52, 3.00],    # 8  right shoulder
    [0.30, 0.28, 3.00],    # 9  right elbow
    [0.36, 0.05, 3.00],    # 10 right wrist
    [0.38, -0.02, 3.00],   # 11 right hand
    [-0.10, -0.02, 3.00],  # 12 left hip
    [-0.12, -0.45, 3.00],  # 13 left knee
    [-0.13, -0.85, 3.00],  # 14 left ankle
    [-0.13, -0.90, 2.90],  # 15 left foot
    [0.10, -0.02, 3.00],   # 16 right hip
    [0.12, -0.45, 3.00],   # 17 right knee
    [0.13, -0.85, 3.00],   # 18 right ankle
    [0.13, -0.90, 2.90],   # 19 right foot
    [0.00, 0.55, 3.00],    # 20 spine shoulder
    [-0.40, -0.08, 3.00],  # 21 left hand tip
    [-0.34, -0.03, 2.97],  # 22 left thumb
    [0.40, -0.08, 3.00],   # 23 right hand tip
    [0.34, -0.03, 2.97],   # 24 right thumb
])


class SkeletonFormatError(ValueError):
    """A skeleton file could not be parsed."""


@dataclass(frozen=True)
class SkeletonSequence:
    """A T x J x D array of joint coordinates plus optional metadata."""

    frames: np.ndarray
    label: int | None = None
    subject_id: int | None = None

    def __post_init__(self):
        arr = np.array(self.frames, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"frames must be a non-empty T x J x D array, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "frames", arr)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_joints(self) -> int:
        return self.frames.shape[1]

    @property
    def coord_dim(self) -> int:
        return self.frames.shape[2]

    def to_dict(self) -> dict:
        T, J, D = self.frames.shape
        return {"T": T, "J": J, "D": D, "label": self.label, "subject_id": self.subject_id,
                "frames": self.frames.tolist()}

    @classmethod
    def from_dict(cls, obj: dict) -> "SkeletonSequence":
        frames = np.array(obj["frames"], dtype=np.float64)
        expected = (obj["T"], obj["J"], obj["D"])
        if frames.shape != tuple(expected):
            raise SkeletonFormatError(f"frames shape {frames.shape} does not match declared {expected}")
        return cls(frames, label=obj.get("label"), subject_id=obj.get("subject_id"))


def save_sequence(seq: SkeletonSequence, path: str | Path) -> None:
    # json writes floats with repr(), so the round trip is exact
    Path(path).write_text(json.dumps(seq.to_dict()))


def load_sequence(path: str | Path) -> SkeletonSequence:
    return SkeletonSequence.from_dict(json.loads(Path(path).read_text()))


def load_ntu_skeleton(path: str | Path, label: int | None = None) -> SkeletonSequence:
    """Parse an NTU RGB+D ``.skeleton`` text file, keeping the first body.

    Frames that contain no body are dropped. Only the first three fields of
    each joint line (camera-space x, y, z) are used.
    """
    lines = Path(path).read_text().splitlines()
    pos = 0

    def next_line() -> tuple[int, list[str]]:
        nonlocal pos
        while pos < len(lines) and not lines[pos].strip():
            pos += 1
        if pos >= len(lines):
            raise SkeletonFormatError(f"{path}: unexpected end of file after line {pos}")
        pos += 1
        return pos, lines[pos - 1].split()

    def read_int() -> int:
        lineno, parts = next_line()
        try:
            return int(parts[0])
        except (IndexError, ValueError):
            raise SkeletonFormatError(f"{path}:{lineno}: expected an integer, got {' '.join(parts)!r}")

    n_frames = read_int()
    frames = []
    for _ in range(n_frames):
        n_bodies = read_int()
        first = None
        for b in range(n_bodies):
            next_line()  # body info
            n_joints = read_int()
            joints = []
            for _ in range(n_joints):
                lineno, parts = next_line()
                if len(parts) < 3:
                    raise SkeletonFormatError(
                        f"{path}:{lineno}: joint line needs at least 3 fields, got {len(parts)}"
                    )
                try:
                    joints.append([float(v) for v in parts[:3]])
                except ValueError:
                    raise SkeletonFormatError(f"{path}:{lineno}: non-numeric joint coordinates")
            if b == 0:
                first = joints
        if first:
            frames.append(first)
    if not frames:
        raise SkeletonFormatError(f"{path}: zero parsable frames")
    if len({len(f) for f in frames}) != 1:
        raise SkeletonFormatError(f"{path}: joint count varies between frames")
    if label is None:
        label = ntu_label_from_name(Path(path).name)
    return SkeletonSequence(np.array(frames), label=label, subject_id=_ntu_field(Path(path).name, "P"))


def _ntu_field(name: str, key: str) -> int | None:
    m = re.search(key + r"(\d{3})", name)
    return int(m.group(1)) if m else None


def ntu_label_from_name(name: str) -> int | None:
    """``S001C001P001R001A007.skeleton`` -> 6 (action ids are one-based)."""
    action = _ntu_field(name, "A")
    return None if action is None else action - 1


def clip_or_pad(seq: SkeletonSequence, target_T: int) -> SkeletonSequence:
    """Uniformly subsample long sequences; repeat the last frame of short ones."""
    if target_T < 1:
        raise ValueError("target_T must be >= 1")
    T = seq.num_frames
    if T > target_T:
        idx = (np.arange(target_T) * T) // target_T
    else:
        idx = np.minimum(np.arange(target_T), T - 1)
    return replace(seq, frames=seq.frames[idx])


def normalize(seq: SkeletonSequence, root_joint: int = 0) -> SkeletonSequence:
    """Translate so the root joint of frame 0 sits at the origin."""
    if not 0 <= root_joint < seq.num_joints:
        raise ValueError(f"root_joint {root_joint} out of range for {seq.num_joints} joints")
    return replace(seq, frames=seq.frames - seq.frames[0, root_joint])


@dataclass(frozen=True)
class Dataset:
    sequences: tuple[SkeletonSequence, ...]
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "sequences", tuple(self.sequences))
        for s in self.sequences:
            if s.label is not None and not 0 <= s.label < self.class_count:
                raise ValueError(f"label {s.label} outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    @property
    def labels(self) -> np.ndarray:
        if any(s.label is None for s in self.sequences):
            raise ValueError("dataset contains unlabeled sequences")
        return np.array([s.label for s in self.sequences], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.sequences[i] for i in indices), self.class_count)

    def stack(self) -> np.ndarray:
        return np.stack([s.frames for s in self.sequences])


@dataclass(frozen=True)
class SyntheticActionSpec:
    """Per-class sinusoidal joint motion on top of a shared base pose.

    ``moving_joints[c]``, ``amplitude[c]``, ``frequency[c]`` (cycles per
    clip), ``phase[c]`` and ``direction[c]`` are aligned per moving joint of
    class ``c``. Each sample additionally draws a phase offset within
    ``+-phase_jitter`` and an amplitude factor within ``1 +- amplitude_jitter``.
    """

    class_count: int
    base_pose: np.ndarray
    moving_joints: tuple[tuple[int, ...], ...]
    amplitude: tuple[tuple[float, ...], ...]
    frequency: tuple[tuple[float, ...], ...]
    phase: tuple[tuple[float, ...], ...]
    direction: tuple[tuple[tuple[float, float, float], ...], ...]
    noise_sigma: float = 0.01
    phase_jitter: float = 0.0
    amplitude_jitter: float = 0.0
    seed: int = 0

    @property
    def joints_per_body(self) -> int:
        return int(np.asarray(self.base_pose).shape[0])

    @classmethod
    def default(cls, class_count: int = 4, seed: int = 0, noise_sigma: float = 0.01,
                joints_per_moving_class: int = 3, phase_jitter: float = 0.5,
                amplitude_jitter: float = 0.2) -> "SyntheticActionSpec":
        """Draw distinct class motions from ``seed`` over the NTU base pose."""
        if class_count < 2:
            raise ValueError("class_count must be >= 2")
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5EED])))
        limbs = [7, 11, 3, 15, 19, 6, 10, 14, 18, 1, 13, 17, 21, 23]
        joints, amps, freqs, phases, dirs = [], [], [], [], []
        for c in range(class_count):
            picked = rng.choice(limbs, size=joints_per_moving_class, replace=False)
            d = rng.normal(size=(joints_per_moving_class, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            joints.append(tuple(int(j) for j in picked))
            amps.append(tuple(float(a) for a in rng.uniform(0.15, 0.35, joints_per_moving_class)))
            # under one cycle per clip: one motion arc, like a clipped action
            freqs.append(tuple(float(f) for f in rng.uniform(0.3, 0.9, joints_per_moving_class)))
            phases.append(tuple(float(p) for p in rng.uniform(0, 2 * np.pi, joints_per_moving_class)))
            dirs.append(tuple(tuple(float(v) for v in row) for row in d))
        return cls(class_count, NTU_BASE_POSE.copy(), tuple(joints), tuple(amps), tuple(freqs),
                   tuple(phases), tuple(dirs), noise_sigma=noise_sigma, phase_jitter=phase_jitter,
                   amplitude_jitter=amplitude_jitter, seed=seed)

    def to_dict(self) -> dict:
        return {
            "class_count": self.class_count,
            "base_pose": np.asarray(self.base_pose).tolist(),
            "moving_joints": [list(j) for j in self.moving_joints],
            "amplitude": [list(a) for a in self.amplitude],
            "frequency": [list(f) for f in self.frequency],
            "phase": [list(p) for p in self.phase],
            "direction": [[list(v) for v in d] for d in self.direction],
            "noise_sigma": self.noise_sigma,
            "phase_jitter": self.phase_jitter,
            "amplitude_jitter": self.amplitude_jitter,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "SyntheticActionSpec":
        """Accept either a full spec or ``{"class_count", "seed", ...}`` shorthand."""
        if "moving_joints" not in obj:
            keys = {"class_count", "seed", "noise_sigma", "joints_per_moving_class",
                    "phase_jitter", "amplitude_jitter"}
            return cls.default(**{k: v for k, v in obj.items() if k in keys})
        return cls(
            class_count=int(obj["class_count"]),
            base_pose=np.array(obj["base_pose"], dtype=np.float64),
            moving_joints=tuple(tuple(int(j) for j in js) for js in obj["moving_joints"]),
            amplitude=tuple(tuple(map(float, a)) for a in obj["amplitude"]),
            frequency=tuple(tuple(map(float, f)) for f in obj["frequency"]),
            phase=tuple(tuple(map(float, p)) for p in obj["phase"]),
            direction=tuple(tuple(tuple(map(float, v)) for v in d) for d in obj["direction"]),
            noise_sigma=float(obj.get("noise_sigma", 0.0)),
            phase_jitter=float(obj.get("phase_jitter", 0.0)),
            amplitude_jitter=float(obj.get("amplitude_jitter", 0.0)),
            seed=int(obj.get("seed", 0)),
        )


def synthetic_sample(spec: SyntheticActionSpec, index: int, T: int) -> SkeletonSequence:
    """Sample ``index`` of the synthetic stream; its label is ``index % class_count``."""
    label = index % spec.class_count
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, index])))
    pose = np.asarray(spec.base_pose, dtype=np.float64)
    frames = np.broadcast_to(pose, (T,) + pose.shape).copy()
    t = np.arange(T) / T
    dphase = rng.uniform(-spec.phase_jitter, spec.phase_jitter) if spec.phase_jitter else 0.0
    gain = 1.0 + (rng.uniform(-spec.amplitude_jitter, spec.amplitude_jitter) if spec.amplitude_jitter else 0.0)
    for j, a, f, p, d in zip(spec.moving_joints[label], spec.amplitude[label], spec.frequency[label],
                             spec.phase[label], spec.direction[label]):
        wave = gain * a * np.sin(2 * np.pi * f * t + p + dphase)
        frames[:, j, :] += wave[:, None] * np.asarray(d)[None, :]
    if spec.noise_sigma > 0:
        frames += rng.normal(scale=spec.noise_sigma, size=frames.shape)
    return SkeletonSequence(frames, label=label)


def generate_synthetic(spec: SyntheticActionSpec, n_per_class: int, T: int) -> Dataset:
    if spec.class_count < 2:
        raise ValueError("class_count must be >= 2")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    n = n_per_class * spec.class_count
    return Dataset(tuple(synthetic_sample(spec, i, T) for i in range(n)), spec.class_count)


def _by_class(ds: Dataset) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(ds.labels):
        groups.setdefault(int(lab), []).append(i)
    return groups


def split(ds: Dataset, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Per-class stratified train/test split.

    The total test size is ``round(test_fraction * N)``, spread across classes
    by largest remainder; every class keeps at least one sample on each side.
    """
    if len(ds) == 0:
        raise ValueError("cannot split an empty dataset")
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    groups = _by_class(ds)
    small = [c for c, idx in groups.items() if len(idx) < 2]
    if small:
        raise ValueError(f"classes {small} have fewer than 2 samples")
    classes = sorted(groups)
    exact = {c: test_fraction * len(groups[c]) for c in classes}
    quota = {c: math.floor(exact[c]) for c in classes}
    leftover = int(round(test_fraction * len(ds))) - sum(quota.values())
    for c in sorted(classes, key=lambda c: (-(exact[c] - quota[c]), c))[:max(leftover, 0)]:
        quota[c] += 1
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5B17])))
    train, test = [], []
    for c in classes:
        idx = np.array(groups[c])
        perm = idx[rng.permutation(len(idx))]
        k = min(max(quota[c], 1), len(idx) - 1)
        test.extend(perm[:k].tolist())
        train.extend(perm[k:].tolist())
    return ds.subset(sorted(train)), ds.subset(sorted(test))


def label_count(fraction: float, n: int) -> int:
    # tolerate binary float error such as 0.07 * 100 = 7.000000000000001
    return int(math.floor(fraction * n + 1e-9))


def subsample_labels(ds: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Keep ``floor(fraction * n_c)`` randomly chosen samples of every class."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1:
        return ds
    groups = _by_class(ds)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x1ABE])))
    keep = []
    for c in sorted(groups):
        k = label_count(fraction, len(groups[c]))
        if k < 1:
            raise ValueError(f"fraction {fraction} leaves class {c} ({len(groups[c])} samples) empty")
        idx = np.array(groups[c])
        keep.extend(idx[rng.permutation(len(idx))[:k]].tolist())
    return ds.subset(sorted(keep))


def preprocess(seq: SkeletonSequence, target_T: int, root_joint: int | None = 0) -> SkeletonSequence:
    seq = clip_or_pad(seq, target_T)
    return normalize(seq, root_joint) if root_joint is not None else seq


def preprocess_dataset(ds: Dataset, target_T: int, root_joint: int | None = 0) -> Dataset:
    return Dataset(tuple(preprocess(s, target_T, root_joint) for s in ds.sequences), ds.class_count)


def load_directory(path: str | Path, class_count: int | None = None, target_T: int | None = None,
                   root_joint: int | None = 0) -> Dataset:
    """Load every ``*.skeleton`` or ``*.json`` sequence below ``path`` in name order."""
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.suffix in (".skeleton", ".json") and p.name != "manifest.json")
    seqs = []
    for p in files:
        seq = load_ntu_skeleton(p) if p.suffix == ".skeleton" else load_sequence(p)
        if target_T is not None:
            seq = preprocess(seq, target_T, root_joint)
        seqs.append(seq)
    if not seqs:
        raise ValueError(f"no skeleton sequences found in {path}")
    if class_count is None:
        labels = [s.label for s in seqs if s.label is not None]
        class_count = max(labels) + 1 if labels else 1
    return Dataset(tuple(seqs), class_count)


def class_census(ds: Dataset) -> dict[int, int]:
    return {c: len(idx) for c, idx in sorted(_by_class(ds).items())}


def stack_batch(seqs: Sequence[SkeletonSequence]) -> np.ndarray:
    return np.stack([s.frames for s in seqs])
