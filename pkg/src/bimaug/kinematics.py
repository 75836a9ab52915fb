"""Forward kinematics and Levenberg-Marquardt inverse kinematics for 6-DOF arms.

Arms use standard (distal) Denavit-Hartenberg parameters. Each link transform
is ``Rz(theta + offset) Tz(d) Tx(a) Rx(alpha)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, log_so3, orthonormalize

# UR5 parameters: (a, alpha, d, theta_offset)
UR5_DH = (
    (0.0, np.pi / 2, 0.089159, 0.0),
    (-0.425, 0.0, 0.0, 0.0),
    (-0.39225, 0.0, 0.0, 0.0),
    (0.0, np.pi / 2, 0.10915, 0.0),
    (0.0, -np.pi / 2, 0.09465, 0.0),
    (0.0, 0.0, 0.0823, 0.0),
)

TWO_PI = 2.0 * np.pi
SIM_JOINT_LIMITS = (
    (-TWO_PI, TWO_PI),
    (-np.pi, np.pi),
    (-np.pi, np.pi),
    (-TWO_PI, TWO_PI),
    (-TWO_PI, TWO_PI),
    (-TWO_PI, TWO_PI),
)


@dataclass(frozen=True)
class ArmModel:
    dh_params: np.ndarray
    joint_limits: np.ndarray
    base_pose: Pose = field(default_factory=Pose)
    hand_eye: Pose = field(default_factory=Pose)
    name: str = ""

    def __post_init__(self):
        dh = np.array(self.dh_params, dtype=np.float64).reshape(6, 4)
        lim = np.array(self.joint_limits, dtype=np.float64).reshape(6, 2)
        if np.any(lim[:, 0] >= lim[:, 1]):
            raise ValueError("joint limits must satisfy lo < hi")
        dh.setflags(write=False)
        lim.setflags(write=False)
        object.__setattr__(self, "dh_params", dh)
        object.__setattr__(self, "joint_limits", lim)

    @classmethod
    def ur5(cls, base_pose: Pose | None = None, hand_eye: Pose | None = None, name: str = "") -> "ArmModel":
        return cls(np.array(UR5_DH), np.array(SIM_JOINT_LIMITS), base_pose or Pose(), hand_eye or Pose(), name)

    def within_limits(self, q) -> bool:
        q = np.asarray(q)
        return bool(np.all(q >= self.joint_limits[:, 0]) and np.all(q <= self.joint_limits[:, 1]))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dh_params": {"columns": ["a", "alpha", "d", "theta_offset"], "rows": self.dh_params.tolist()},
            "joint_limits": self.joint_limits.tolist(),
            "base_pose": self.base_pose.matrix().tolist(),
            "hand_eye": self.hand_eye.matrix().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArmModel":
        return cls(
            np.array(d["dh_params"]["rows"]),
            np.array(d["joint_limits"]),
            Pose.from_matrix(d["base_pose"]),
            Pose.from_matrix(d["hand_eye"]),
            d.get("name", ""),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def __eq__(self, other):
        if not isinstance(other, ArmModel):
            return NotImplemented
        return (
            np.array_equal(self.dh_params, other.dh_params)
            and np.array_equal(self.joint_limits, other.joint_limits)
            and self.base_pose == other.base_pose
            and self.hand_eye == other.hand_eye
            and self.name == other.name
        )

    __hash__ = None


def _link(a, alpha, d, theta) -> np.ndarray:
    ct, st = np.cos(theta), np.sin(theta)
    ca, sa = np.cos(alpha), np.sin(alpha)
    return np.array(
        [
            [ct, -st * ca, st * sa, a * ct],
            [st, ct * ca, -ct * sa, a * st],
            [0.0, sa, ca, d],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )


def _chain(arm: ArmModel, q) -> list[np.ndarray]:
    """World-frame transforms of frames 0..6 (frame 0 is the base)."""
    T = arm.base_pose.matrix()
    frames = [T]
    for (a, alpha, d, off), qi in zip(arm.dh_params, q):
        T = T @ _link(a, alpha, d, qi + off)
        frames.append(T)
    return frames


def fk(arm: ArmModel, q) -> Pose:
    """World-frame end-effector pose."""
    q = np.asarray(q, dtype=np.float64)
    T = _chain(arm, q)[-1]
    return Pose(T[:3, :3], T[:3, 3])


def camera_pose(arm: ArmModel, q) -> Pose:
    """World-frame wrist-camera pose, ``fk(q) @ hand_eye``."""
    return fk(arm, q) @ arm.hand_eye


def jacobian(arm: ArmModel, q) -> tuple[np.ndarray, np.ndarray]:
    """Geometric Jacobian (6x6, linear rows first, world frame) and the EEF transform."""
    frames = np.array(_chain(arm, np.asarray(q, dtype=np.float64)))
    z = frames[:6, :3, 2]
    r = frames[6, :3, 3] - frames[:6, :3, 3]
    J = np.empty((6, 6))
    J[0] = z[:, 1] * r[:, 2] - z[:, 2] * r[:, 1]
    J[1] = z[:, 2] * r[:, 0] - z[:, 0] * r[:, 2]
    J[2] = z[:, 0] * r[:, 1] - z[:, 1] * r[:, 0]
    J[3:] = z.T
    return J, frames[6]


@dataclass(frozen=True)
class IKConfig:
    pos_tol: float = 1e-6
    rot_tol: float = 1e-6
    max_iter: int = 200
    lambda_init: float = 1e-3
    max_joint_jump: float = 1.0


def _pose_residual(target: Pose, T: np.ndarray) -> np.ndarray:
    e = np.empty(6)
    e[:3] = target.translation - T[:3, 3]
    e[3:] = log_so3(target.rotation @ T[:3, :3].T)
    return e


def ik_lm(arm: ArmModel, target: Pose, seed, cfg: IKConfig = IKConfig()) -> np.ndarray | None:
    """Solve for joints reaching ``target``; ``None`` marks an invalid solution.

    Damped least squares on the 6-D pose residual (position, rotation log-map).
    Lambda is divided by 10 after an accepted step and multiplied by 10 after a
    rejected one. Iterates are clipped to the joint limits. Solutions that move
    any joint more than ``cfg.max_joint_jump`` from the seed are rejected.
    """
    seed = np.asarray(seed, dtype=np.float64)
    if not np.all(np.isfinite(seed)):
        return None
    lo, hi = arm.joint_limits[:, 0], arm.joint_limits[:, 1]
    q = np.clip(seed, lo, hi)
    J, T = jacobian(arm, q)
    e = _pose_residual(target, T)
    cost = e @ e
    lam = cfg.lambda_init
    converged = False
    for _ in range(cfg.max_iter + 1):
        if np.linalg.norm(e[:3]) <= cfg.pos_tol and np.linalg.norm(e[3:]) <= cfg.rot_tol:
            converged = True
            break
        JtJ = J.T @ J
        g = J.T @ e
        dq = np.linalg.solve(JtJ + lam * np.eye(6), g)
        q_new = np.clip(q + dq, lo, hi)
        J_new, T_new = jacobian(arm, q_new)
        e_new = _pose_residual(target, T_new)
        cost_new = e_new @ e_new
        if cost_new < cost:
            q, J, e, cost = q_new, J_new, e_new, cost_new
            lam = max(lam / 10.0, 1e-12)
        else:
            lam = min(lam * 10.0, 1e10)
    if not converged:
        return None
    if not arm.within_limits(q):
        return None
    if np.any(np.abs(q - seed) > cfg.max_joint_jump):
        return None
    return q


def reorthonormalize_pose(p: Pose) -> Pose:
    return Pose(orthonormalize(p.rotation), p.translation)
