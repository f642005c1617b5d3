"""Spatial-temporal masking of skeleton sequences.

Temporal masking removes ``floor(frame_ratio * T)`` whole frames; spatial
masking then hides ``floor(joint_ratio * J)`` joints in every surviving
frame, either drawn independently per frame (``random``) or drawn once and
shared by all frames (``fixed_index``). Survivors keep their original frame
and joint order.

Randomness comes from numpy's PCG64 bit generator seeded through
``SeedSequence``, so a plan is reproducible from its integer key alone.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import SkeletonSequence

STRATEGIES = ("random", "fixed_index")
# Table-style ablation axes: frame ratio descending within each strategy.
GRID_RATIOS = (0.6, 0.5, 0.4)


def make_rng(*key: int) -> np.random.Generator:
    """Portable PCG64 stream for an integer key such as (seed, epoch, sample)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


def mask_count(ratio: float, n: int) -> int:
    # small epsilon guards ratios like 0.6 * 25 = 14.999999999999998
    return int(math.floor(ratio * n + 1e-9))


def _check_ratio(name: str, ratio: float, n: int) -> int:
    if not 0 <= ratio < 1:
        raise ValueError(f"{name} must lie in [0, 1), got {ratio}")
    k = mask_count(ratio, n)
    if k >= n:
        raise ValueError(f"{name}={ratio} would mask all {n} entries")
    return k


@dataclass(frozen=True)
class MaskSpec:
    frame_ratio: float = 0.5
    joint_ratio: float = 0.5
    strategy: str = "random"
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown masking strategy {self.strategy!r}; expected one of {STRATEGIES}")
        for name in ("frame_ratio", "joint_ratio"):
            r = getattr(self, name)
            if not 0 <= r < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {r}")

    def validate(self, T: int, J: int) -> None:
        _check_ratio("frame_ratio", self.frame_ratio, T)
        _check_ratio("joint_ratio", self.joint_ratio, J)

    def visible_shape(self, T: int, J: int) -> tuple[int, int]:
        return T - mask_count(self.frame_ratio, T), J - mask_count(self.joint_ratio, J)

    def to_dict(self) -> dict:
        return {"frame_ratio": self.frame_ratio, "joint_ratio": self.joint_ratio,
                "strategy": self.strategy, "seed": self.seed}


@dataclass(frozen=True)
class MaskPlan:
    """Concrete realisation of a :class:`MaskSpec` for one sequence."""

    T: int
    J: int
    masked_frames: np.ndarray   # sorted, shape (T - T',)
    visible_frames: np.ndarray  # sorted, shape (T',)
    masked_joints: np.ndarray   # sorted per row, shape (T', J - J')
    visible_joints: np.ndarray  # sorted per row, shape (T', J')

    @property
    def visible_shape(self) -> tuple[int, int]:
        return self.visible_joints.shape

    def visible_positions(self) -> np.ndarray:
        """Flat ``frame * J + joint`` index of every visible token, frame-major."""
        return (self.visible_frames[:, None] * self.J + self.visible_joints).reshape(-1)

    def visibility(self) -> np.ndarray:
        """Boolean T x J grid, True where the joint is visible."""
        grid = np.zeros((self.T, self.J), dtype=bool)
        grid[self.visible_frames[:, None], self.visible_joints] = True
        return grid

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "J": self.J,
            "masked_frames": self.masked_frames.tolist(),
            "visible_frames": self.visible_frames.tolist(),
            "masked_joints": self.masked_joints.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "MaskPlan":
        T, J = int(obj["T"]), int(obj["J"])
        vf = np.array(obj["visible_frames"], dtype=np.int64)
        mj = np.array(obj["masked_joints"], dtype=np.int64).reshape(len(vf), -1)
        vj = np.array([np.setdiff1d(np.arange(J), row) for row in mj], dtype=np.int64).reshape(len(vf), -1)
        return cls(T, J, np.array(obj["masked_frames"], dtype=np.int64), vf, mj, vj)


@dataclass(frozen=True)
class MaskedSequence:
    plan: MaskPlan
    visible: np.ndarray  # T' x J' x D


def mask_temporal(T: int, frame_ratio: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Pick ``floor(frame_ratio * T)`` frames uniformly without replacement."""
    k = _check_ratio("frame_ratio", frame_ratio, T)
    masked = np.sort(rng.choice(T, size=k, replace=False)).astype(np.int64)
    visible = np.setdiff1d(np.arange(T, dtype=np.int64), masked)
    return masked, visible


def mask_spatial_random(visible_frames: Sequence[int], J: int, joint_ratio: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Independent joint subset per visible frame, shape (T', k)."""
    k = _check_ratio("joint_ratio", joint_ratio, J)
    n = len(visible_frames)
    if k == 0:
        return np.zeros((n, 0), dtype=np.int64)
    # argsort of iid uniforms is a uniform random permutation per row
    perms = np.argsort(rng.random((n, J)), axis=1)
    return np.sort(perms[:, :k], axis=1).astype(np.int64)


def mask_spatial_fixed(visible_frames: Sequence[int], J: int, joint_ratio: float,
                       rng: np.random.Generator) -> np.ndarray:
    """One joint subset drawn once and repeated for every visible frame."""
    k = _check_ratio("joint_ratio", joint_ratio, J)
    row = np.sort(rng.choice(J, size=k, replace=False)).astype(np.int64)
    return np.tile(row, (len(visible_frames), 1))


def make_plan(T: int, J: int, spec: MaskSpec, rng: np.random.Generator) -> MaskPlan:
    spec.validate(T, J)
    masked_f, visible_f = mask_temporal(T, spec.frame_ratio, rng)
    spatial = mask_spatial_random if spec.strategy == "random" else mask_spatial_fixed
    masked_j = spatial(visible_f, J, spec.joint_ratio, rng)
    all_j = np.arange(J, dtype=np.int64)
    keep = np.ones((len(visible_f), J), dtype=bool)
    np.put_along_axis(keep, masked_j, False, axis=1)
    visible_j = np.broadcast_to(all_j, keep.shape)[keep].reshape(len(visible_f), -1)
    return MaskPlan(T, J, masked_f, visible_f, masked_j, visible_j)


def gather_visible(frames: np.ndarray, plan: MaskPlan) -> np.ndarray:
    """Pick the visible entries only; masked positions are never touched."""
    return frames[plan.visible_frames[:, None], plan.visible_joints]


def scatter_visible(visible: np.ndarray, plan: MaskPlan, fill: float = np.nan) -> np.ndarray:
    out = np.full((plan.T, plan.J) + visible.shape[2:], fill, dtype=np.float64)
    out[plan.visible_frames[:, None], plan.visible_joints] = visible
    return out


def apply_mask(seq: SkeletonSequence, spec: MaskSpec, rng: np.random.Generator | None = None) -> MaskedSequence:
    """Temporal then spatial masking of ``seq``.

    Without an explicit ``rng`` the plan is drawn from ``spec.seed``, so equal
    inputs give equal outputs.
    """
    rng = make_rng(spec.seed) if rng is None else rng
    plan = make_plan(seq.num_frames, seq.num_joints, spec, rng)
    return MaskedSequence(plan, gather_visible(seq.frames, plan))


def mask_grid(pairs: Sequence[tuple] | None = None, strategies: Sequence[str] | None = None,
              seed: int = 0) -> list[MaskSpec]:
    """Build mask specs for an ablation grid.

    With no arguments this is every (frame_ratio, joint_ratio) pair from
    {0.6, 0.5, 0.4}^2, frame ratio descending, under both strategies: 18
    specs. Explicit pairs may carry a third strategy element; bare pairs use
    ``strategies`` if given and ``random`` otherwise.
    """
    if pairs is None:
        pairs = list(itertools.product(GRID_RATIOS, sorted(GRID_RATIOS)))
        strategies = ("fixed_index", "random") if strategies is None else strategies
    if strategies is not None:
        return [MaskSpec(p[0], p[1], s, seed) for s in strategies for p in pairs]
    return [MaskSpec(p[0], p[1], p[2] if len(p) > 2 else "random", seed) for p in pairs]


@dataclass(frozen=True)
class MaskedBatch:
    """Stacked visible joints of several sequences masked with equal ratios."""

    visible: np.ndarray    # (B, T', J', D)
    frame_idx: np.ndarray  # (B, T')
    joint_idx: np.ndarray  # (B, T', J')
    positions: np.ndarray  # (B, T' * J') flat frame * J + joint
    plans: tuple[MaskPlan, ...]
    T: int
    J: int

    @property
    def size(self) -> int:
        return self.visible.shape[0]

    @classmethod
    def from_plans(cls, frames: np.ndarray, plans: Sequence[MaskPlan]) -> "MaskedBatch":
        frames = np.asarray(frames, dtype=np.float64)
        if len({p.visible_shape for p in plans}) != 1:
            raise ValueError("all plans in a batch must share one visible shape")
        visible = np.stack([gather_visible(f, p) for f, p in zip(frames, plans)])
        return cls(visible,
                   np.stack([p.visible_frames for p in plans]),
                   np.stack([p.visible_joints for p in plans]),
                   np.stack([p.visible_positions() for p in plans]),
                   tuple(plans), frames.shape[1], frames.shape[2])

    @classmethod
    def unmasked(cls, frames: np.ndarray) -> "MaskedBatch":
        frames = np.asarray(frames, dtype=np.float64)
        B, T, J, _ = frames.shape
        full = MaskPlan(T, J, np.zeros(0, np.int64), np.arange(T), np.zeros((T, 0), np.int64),
                        np.tile(np.arange(J), (T, 1)))
        return cls.from_plans(frames, [full] * B)

    def position_weights(self, scope: str) -> np.ndarray:
        """(B, T, J) 0/1 weights selecting all positions or only masked ones."""
        w = np.ones((self.size, self.T, self.J))
        if scope == "masked_only":
            for b, p in enumerate(self.plans):
                w[b][p.visibility()] = 0.0
        elif scope != "full_sequence":
            raise ValueError(f"unknown loss scope {scope!r}")
        return w
