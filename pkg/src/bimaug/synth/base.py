"""Shared view-synthesis interface.

A synthesizer turns the two wrist-camera images of one timestep into the
images the cameras would see after moving by ``dp_left`` / ``dp_right``.
``dp`` is the source-camera to target-camera transform: a point with
coordinates ``p`` in the source camera has coordinates ``dp^-1 @ p`` in the
target camera. For a perturbation ``C' = C @ T`` this is simply ``T``.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from ..errors import DimensionMismatch
from ..geometry import Pose


@dataclass(frozen=True)
class ImagePair:
    left: np.ndarray  # (H, W, 3) float in [0, 1]
    right: np.ndarray
    depth_left: np.ndarray | None = None  # (H, W) meters, 0 = invalid
    depth_right: np.ndarray | None = None

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise DimensionMismatch(f"left {self.left.shape} vs right {self.right.shape}")
        if self.left.ndim != 3 or self.left.shape[2] != 3:
            raise DimensionMismatch(f"expected (H, W, 3) images, got {self.left.shape}")
        for d in (self.depth_left, self.depth_right):
            if d is not None and d.shape != self.left.shape[:2]:
                raise DimensionMismatch(f"depth {d.shape} vs image {self.left.shape[:2]}")

    def arm(self, name: str) -> np.ndarray:
        return self.left if name == "left" else self.right

    def depth(self, name: str) -> np.ndarray | None:
        return self.depth_left if name == "left" else self.depth_right

    @property
    def has_depth(self) -> bool:
        return self.depth_left is not None and self.depth_right is not None


@dataclass(frozen=True)
class SynthResult:
    images: ImagePair
    valid_left: np.ndarray  # (H, W) bool
    valid_right: np.ndarray

    def valid(self, name: str) -> np.ndarray:
        return self.valid_left if name == "left" else self.valid_right


class Synthesizer(ABC):
    """Common interface of every view-synthesis backend."""

    name: str = ""
    needs_depth: bool = False

    @abstractmethod
    def synthesize(self, src: ImagePair, dp_left: Pose, dp_right: Pose,
                   rng: np.random.Generator | None = None) -> SynthResult:
        """Images as seen from the perturbed cameras."""
