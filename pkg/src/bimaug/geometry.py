"""Rigid-body pose algebra and the pinhole camera model.

Conventions
-----------
* A :class:`Pose` ``P = (R, t)`` maps points from its local frame into the
  parent frame: ``x_parent = R @ x_local + t``.
* Camera poses are camera-to-world. The camera frame is x right, y down,
  z forward (optical axis).
* ``relative_pose(a, b) = a^-1 b`` is the transform taking points expressed in
  camera ``b`` into camera ``a``; a point seen by ``a`` has coordinates
  ``relative_pose(a, b)^-1 @ p`` in ``b``.
* Angles crossing the public boundary are degrees; internally radians.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveDepth

ORTHO_DRIFT_TOL = 1e-7


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def ortho_error(R: np.ndarray) -> float:
    return float(np.max(np.abs(R.T @ R - np.eye(3))))


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if ortho_error(R) > ORTHO_DRIFT_TOL:
            R = orthonormalize(R)
        if np.linalg.det(R) <= 0:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        if T.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {T.shape}")
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_translation(cls, t) -> "Pose":
        return cls(np.eye(3), t)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        """Transform points (..., 3) from the local frame to the parent frame."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.rotation, np.eye(3)) and not self.translation.any())

    def to_bytes(self) -> bytes:
        return self.matrix().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Pose":
        return cls.from_matrix(np.frombuffer(buf, dtype="<f8", count=16).reshape(4, 4))

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __hash__(self):
        return hash(self.to_bytes())

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    """Return ``a @ b``: apply ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(p: Pose) -> Pose:
    Rt = p.rotation.T
    return Pose(Rt, -Rt @ p.translation)


def relative_pose(a: Pose, b: Pose) -> Pose:
    """Transform between two world-frame camera poses, ``a^-1 b``."""
    return compose(invert(a), b)


def perturb_eef(camera: Pose, perturbation: Pose, eef: Pose) -> Pose:
    """End-effector pose after perturbing the wrist camera in its own frame.

    Computes ``C T C^-1 E``. With an identity-rotation perturbation the result
    keeps the rotation of ``eef`` and shifts it by ``R_C t``.
    """
    return compose(compose(compose(camera, perturbation), invert(camera)), eef)


def pose_allclose(a: Pose, b: Pose, atol: float = 1e-9) -> bool:
    return bool(np.allclose(a.matrix(), b.matrix(), rtol=0.0, atol=atol))


def pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    """Position error (m) and geodesic rotation error (rad) between poses."""
    dp = float(np.linalg.norm(a.translation - b.translation))
    return dp, float(np.linalg.norm(log_so3(a.rotation @ b.rotation.T)))


# --- rotations -------------------------------------------------------------

def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def skew(w) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(w) -> np.ndarray:
    """Rodrigues' formula: rotation vector (rad) to matrix."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * K @ K


def axis_angle(axis, angle_deg: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return exp_so3(axis * np.deg2rad(angle_deg))


def log_so3(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to rotation vector (rad), stable near 0 and pi."""
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-6:
        return 0.5 * v
    if np.pi - theta < 1e-4:
        # near pi: recover the axis from the symmetric part
        B = (R + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(B)))
        axis = B[:, i] / np.sqrt(max(B[i, i], 1e-300))
        axis /= np.linalg.norm(axis)
        if np.dot(axis, v) < 0:
            axis = -axis
        return axis * theta
    return theta / (2.0 * np.sin(theta)) * v


def rotation_angle_deg(R: np.ndarray) -> float:
    return float(np.rad2deg(np.linalg.norm(log_so3(R))))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose at ``eye`` with its optical axis toward ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [0.0, 1.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.column_stack([x, y, z]), eye)


# --- pinhole camera ----------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def default(cls, size: int = 128, fov_deg: float = 70.0) -> "CameraIntrinsics":
        f = (size / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
        return cls(f, f, size / 2.0, size / 2.0, size, size)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_bytes(self) -> bytes:
        return struct.pack("<6d", self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "CameraIntrinsics":
        fx, fy, cx, cy, w, h = struct.unpack("<6d", buf[:48])
        return cls(fx, fy, cx, cy, int(w), int(h))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def project(points, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame points (..., 3) to pixel coordinates (..., 2) and depth (...)."""
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise NonPositiveDepth("cannot project points with z <= 0")
    u = k.fx * p[..., 0] / z + k.cx
    v = k.fy * p[..., 1] / z + k.cy
    return np.stack([u, v], axis=-1), z


def unproject(pixels, depth, k: CameraIntrinsics) -> np.ndarray:
    """Pixel coordinates (..., 2) with depth (...) to camera-frame points (..., 3)."""
    uv = np.asarray(pixels, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0):
        raise NonPositiveDepth("depth must be positive")
    x = (uv[..., 0] - k.cx) / k.fx * d
    y = (uv[..., 1] - k.cy) / k.fy * d
    return np.stack([x, y, d * np.ones_like(x)], axis=-1)


def pixel_grid(k: CameraIntrinsics) -> np.ndarray:
    """Integer pixel coordinates (H, W, 2) as (u, v)."""
    v, u = np.mgrid[0 : k.height, 0 : k.width]
    return np.stack([u, v], axis=-1).astype(np.float64)
