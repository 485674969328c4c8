"""Shared domain types: poses, actions, grasp observations, trial records, datasets.

Conventions used throughout the package: world coordinates are metres with the
arena centred on the origin, yaw is a right-handed rotation about vertical in
radians, forces are newtons.  Gripper z refers to the bottom edge of the finger
faces.  All raster observations are float grids in [0, 1].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

# Action bounds: per-step translation / rotation limits and the commanded
# force range the gripper will actually hold.
MAX_TRANSLATION = 0.02
MAX_ROTATION = math.radians(17.0)
FORCE_MIN = 4.0
FORCE_MAX = 25.0

# Arena is the square [-ARENA_HALF, ARENA_HALF]^2; MAX_HEIGHT bounds both
# object height and gripper travel.
ARENA_HALF = 0.15
MAX_HEIGHT = 0.15

VISION_SIZE = 64
TACTILE_SIZE = 32

SCHEMA_VERSION = 1

ACTION_FEATURE_DIM = 12


def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a > math.pi:
        a -= 2.0 * math.pi
    elif a <= -math.pi:
        a += 2.0 * math.pi
    return a


@dataclass(frozen=True)
class Pose:
    """Gripper pose: position of the finger-face bottom centre plus yaw."""

    x: float
    y: float
    z: float
    yaw: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z, self.yaw)):
            raise ValueError("pose components must be finite")
        if self.z < 0.0:
            raise ValueError(f"pose z must be >= 0, got {self.z}")
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.yaw], dtype=float)


@dataclass(frozen=True)
class Action:
    """Relative gripper adjustment: translation, yaw change, force change."""

    dx: float
    dy: float
    dz: float
    dyaw: float
    dforce: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise ValueError("action components must be finite")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.dx, self.dy, self.dz, self.dyaw, self.dforce)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=float)


ZERO_ACTION = Action(0.0, 0.0, 0.0, 0.0, 0.0)


def clamp_action(a: Action, current_force: float) -> Action:
    """Project an action onto the feasible set.

    Translations are clipped per axis, rotation to +/-MAX_ROTATION, and dforce
    so the resulting commanded force stays inside [FORCE_MIN, FORCE_MAX].
    Idempotent for a fixed current_force.
    """
    t = MAX_TRANSLATION
    resulting = min(FORCE_MAX, max(FORCE_MIN, current_force + a.dforce))
    return Action(
        dx=min(t, max(-t, a.dx)),
        dy=min(t, max(-t, a.dy)),
        dz=min(t, max(-t, a.dz)),
        dyaw=min(MAX_ROTATION, max(-MAX_ROTATION, a.dyaw)),
        dforce=resulting - current_force,
    )


def to_gripper_frame(motion: Sequence[float], yaw: float) -> np.ndarray:
    """Rotate a world-frame translation into the gripper frame (yaw only).

    The gripper frame x axis points along the finger faces, y along the jaw
    closing direction; z is unchanged.  Norm-preserving.
    """
    v = np.asarray(motion, dtype=float)
    if v.shape != (3,):
        raise ValueError(f"motion must have 3 components, got shape {v.shape}")
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([c * v[0] + s * v[1], -s * v[0] + c * v[1], v[2]])


def action_to_feature(a: Action, p: Pose) -> np.ndarray:
    """Encode an action plus current pose as the 12-d network input.

    Layout: normalised action deltas (5), normalised pose (4), gripper-frame
    translation (3).  Commanded force is deliberately absent: the tactile
    imprint already encodes it, and the candidate force enters via dforce.
    """
    g = to_gripper_frame((a.dx, a.dy, a.dz), p.yaw)
    return np.array(
        [
            a.dx / MAX_TRANSLATION,
            a.dy / MAX_TRANSLATION,
            a.dz / MAX_TRANSLATION,
            a.dyaw / MAX_ROTATION,
            a.dforce / FORCE_MAX,
            p.x / ARENA_HALF,
            p.y / ARENA_HALF,
            p.z / MAX_HEIGHT,
            p.yaw / math.pi,
            g[0] / MAX_TRANSLATION,
            g[1] / MAX_TRANSLATION,
            g[2] / MAX_TRANSLATION,
        ]
    )


def _check_raster(name: str, arr: np.ndarray, size: int | None) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-d grid, got shape {arr.shape}")
    if size is not None and arr.shape != (size, size):
        raise ValueError(f"{name} must be {size}x{size}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GraspState:
    """One multimodal observation: camera view, two tactile imprints, pose, force."""

    vision: np.ndarray
    tactile_left: np.ndarray
    tactile_right: np.ndarray
    pose: Pose
    force: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "vision", _check_raster("vision", self.vision, VISION_SIZE))
        object.__setattr__(
            self, "tactile_left", _check_raster("tactile_left", self.tactile_left, TACTILE_SIZE)
        )
        object.__setattr__(
            self, "tactile_right", _check_raster("tactile_right", self.tactile_right, TACTILE_SIZE)
        )
        if not (FORCE_MIN <= self.force <= FORCE_MAX):
            raise ValueError(f"force {self.force} outside [{FORCE_MIN}, {FORCE_MAX}]")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GraspState):
            return NotImplemented
        return (
            self.pose == other.pose
            and self.force == other.force
            and np.array_equal(self.vision, other.vision)
            and np.array_equal(self.tactile_left, other.tactile_left)
            and np.array_equal(self.tactile_right, other.tactile_right)
        )

    def __hash__(self) -> int:  # frozen but array-backed; identity hash is enough
        return id(self)


def check_outcome(o: int) -> int:
    """Validate a binary lift outcome."""
    if o not in (0, 1):
        raise ValueError(f"outcome must be 0 or 1, got {o!r}")
    return int(o)


@dataclass(frozen=True, eq=False)
class TrialRecord:
    """One supervised example: state before an action, the action, the lift outcome.

    grip_snapshot / release_snapshot are optional in-memory extras captured
    during collection (state while gripping after the action, and the state
    after reopening the jaws); they feed augmentation and are not serialized.
    """

    state: GraspState
    action: Action
    outcome: int
    object_id: str
    episode_id: str
    grip_snapshot: GraspState | None = None
    release_snapshot: GraspState | None = None

    def __post_init__(self) -> None:
        check_outcome(self.outcome)
        if not self.object_id:
            raise ValueError("object_id must be non-empty")
        if not self.episode_id:
            raise ValueError("episode_id must be non-empty")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TrialRecord):
            return NotImplemented
        return (
            self.state == other.state
            and self.action == other.action
            and self.outcome == other.outcome
            and self.object_id == other.object_id
            and self.episode_id == other.episode_id
        )


def _raster_to_obj(arr: np.ndarray) -> dict:
    return {
        "height": int(arr.shape[0]),
        "width": int(arr.shape[1]),
        "data": [float(v) for v in arr.ravel()],
    }


def _raster_from_obj(obj: dict, name: str) -> np.ndarray:
    arr = np.array(obj["data"], dtype=float).reshape(obj["height"], obj["width"])
    return arr


def record_to_obj(rec: TrialRecord) -> dict:
    """JSON-serializable form of a record (snapshots intentionally dropped)."""
    s = rec.state
    return {
        "schema_version": SCHEMA_VERSION,
        "vision": _raster_to_obj(s.vision),
        "tactile_left": _raster_to_obj(s.tactile_left),
        "tactile_right": _raster_to_obj(s.tactile_right),
        "pose": [s.pose.x, s.pose.y, s.pose.z, s.pose.yaw],
        "force": s.force,
        "action": list(rec.action.as_tuple()),
        "outcome": rec.outcome,
        "object_id": rec.object_id,
        "episode_id": rec.episode_id,
    }


def record_from_obj(obj: dict) -> TrialRecord:
    version = obj.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {version!r}")
    pose = Pose(*obj["pose"])
    state = GraspState(
        vision=_raster_from_obj(obj["vision"], "vision"),
        tactile_left=_raster_from_obj(obj["tactile_left"], "tactile_left"),
        tactile_right=_raster_from_obj(obj["tactile_right"], "tactile_right"),
        pose=pose,
        force=obj["force"],
    )
    return TrialRecord(
        state=state,
        action=Action(*obj["action"]),
        outcome=check_outcome(obj["outcome"]),
        object_id=obj["object_id"],
        episode_id=obj["episode_id"],
    )


@dataclass(frozen=True)
class Dataset:
    """An ordered collection of trial records plus the object registry behind it."""

    records: tuple[TrialRecord, ...]
    registry: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "registry", tuple(self.registry))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TrialRecord]:
        return iter(self.records)

    def validate(self) -> None:
        known = set(self.registry)
        if len(known) != len(self.registry):
            raise ValueError("registry contains duplicate object ids")
        for i, rec in enumerate(self.records):
            if rec.object_id not in known:
                raise ValueError(f"record {i} references unknown object {rec.object_id!r}")

    def label_rate(self) -> float:
        if not self.records:
            return 0.0
        return float(np.mean([r.outcome for r in self.records]))

    def object_ids(self) -> list[str]:
        return sorted({r.object_id for r in self.records})

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(tuple(self.records[i] for i in indices), self.registry)

    def save_jsonl(self, path: str | Path) -> None:
        """Write one JSON record per line; the registry travels in run manifests."""
        path = Path(path)
        with path.open("w") as fh:
            for rec in self.records:
                fh.write(
                    json.dumps(record_to_obj(rec), sort_keys=True, separators=(",", ":")) + "\n"
                )

    @classmethod
    def load_jsonl(cls, path: str | Path, registry: Sequence[str] | None = None) -> "Dataset":
        path = Path(path)
        records: list[TrialRecord] = []
        with path.open() as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(record_from_obj(json.loads(line)))
        if registry is None:
            registry = sorted({r.object_id for r in records})
        ds = cls(tuple(records), tuple(registry))
        ds.validate()
        return ds


def merge_datasets(datasets: Sequence[Dataset]) -> Dataset:
    """Concatenate collections in order; registries are unioned and sorted.

    Used to join a random-probe phase with an on-policy recollection phase
    into one training set.
    """
    if not datasets:
        raise ValueError("merge_datasets needs at least one dataset")
    records: list[TrialRecord] = []
    registry: set[str] = set()
    for ds in datasets:
        records.extend(ds.records)
        registry.update(ds.registry)
    merged = Dataset(tuple(records), tuple(sorted(registry)))
    merged.validate()
    return merged
