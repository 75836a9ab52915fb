"""In-memory data model for bimanual demonstrations.

Arrays are kept in their on-disk representation (uint8 RGB, uint16 millimeter
depth, uint8 masks) so a write/read cycle is byte-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from ..geometry import Pose

ARMS = ("left", "right")
SCHEMA_VERSION = 1


def rgb_to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def rgb_to_float(rgb: np.ndarray) -> np.ndarray:
    return rgb.astype(np.float64) / 255.0


def depth_to_mm(depth_m: np.ndarray) -> np.ndarray:
    mm = np.round(np.asarray(depth_m) * 1000.0)
    return np.clip(mm, 0, 65535).astype(np.uint16)


@dataclass
class ArmObs:
    rgb: np.ndarray
    camera: Pose
    eef: Pose
    joints: np.ndarray
    action: np.ndarray
    gripper: float = 1.0
    depth_mm: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.rgb = np.ascontiguousarray(self.rgb, dtype=np.uint8)
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(6)
        self.action = np.asarray(self.action, dtype=np.float64).reshape(6)
        self.gripper = float(self.gripper)
        if self.depth_mm is not None:
            self.depth_mm = np.ascontiguousarray(self.depth_mm, dtype=np.uint16)
            if self.depth_mm.shape != self.rgb.shape[:2]:
                raise ValueError("depth and rgb dimensions differ")
        if self.mask is not None:
            self.mask = np.ascontiguousarray(self.mask, dtype=np.uint8)
            if self.mask.shape != self.rgb.shape[:2]:
                raise ValueError("mask and rgb dimensions differ")

    @property
    def depth(self) -> np.ndarray | None:
        """Depth in meters (0 = invalid)."""
        return None if self.depth_mm is None else self.depth_mm.astype(np.float64) / 1000.0

    @property
    def image(self) -> np.ndarray:
        return rgb_to_float(self.rgb)


@dataclass
class TimeStep:
    left: ArmObs
    right: ArmObs

    def __post_init__(self):
        if self.left.rgb.shape != self.right.rgb.shape:
            raise ValueError("left and right images differ in size")

    def arm(self, name: str) -> ArmObs:
        return self.left if name == "left" else self.right

    def with_arm(self, name: str, obs: ArmObs) -> "TimeStep":
        return replace(self, **{name: obs})


@dataclass
class Trajectory:
    steps: list
    arms: dict  # "left"/"right" -> ArmModel
    intrinsics: dict  # "left"/"right" -> CameraIntrinsics
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def image_shape(self) -> tuple[int, int]:
        if self.steps:
            return self.steps[0].left.rgb.shape[:2]
        k = self.intrinsics["left"]
        return k.height, k.width

    @property
    def has_depth(self) -> bool:
        return bool(self.steps) and all(
            s.left.depth_mm is not None and s.right.depth_mm is not None for s in self.steps
        )

    def hand_eye_violations(self, tol: float = 1e-6) -> list[tuple[int, str, float]]:
        """Steps whose camera pose disagrees with eef @ hand_eye."""
        bad = []
        for i, s in enumerate(self.steps):
            for name in ARMS:
                obs = s.arm(name)
                expect = (obs.eef @ self.arms[name].hand_eye).matrix()
                err = float(np.max(np.abs(expect - obs.camera.matrix())))
                if err > tol:
                    bad.append((i, name, err))
        return bad


class Dataset(Sequence):
    """An ordered collection of trajectories plus the schema version they follow."""

    def __init__(self, episodes=(), schema_version: int = SCHEMA_VERSION):
        self.episodes = list(episodes)
        self.schema_version = schema_version

    def __len__(self):
        return len(self.episodes)

    def __getitem__(self, i):
        return self.episodes[i]

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.episodes)

    def __repr__(self):
        return f"Dataset({len(self)} episodes, schema {self.schema_version})"

