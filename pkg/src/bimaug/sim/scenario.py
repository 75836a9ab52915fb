"""Bimanual tabletop scenario: arms, wrist cameras, gripper proxies, scripted demos."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from ..dataset.model import ARMS, ArmObs, TimeStep, Trajectory, depth_to_mm, rgb_to_uint8
from ..errors import UnreachableWaypoint
from ..geometry import CameraIntrinsics, Pose
from ..kinematics import ArmModel, IKConfig, fk, ik_lm
from .raycast import Box, Scene, Sphere, box_box_distance, render

# gripper pads, EEF frame: z is the approach axis, the pads' front faces lie on z = 0
PAD_HALF = np.array([0.012, 0.02, 0.005])
PAD_MIN_OFFSET = 0.015  # pad center |x| when fully closed
PAD_STROKE = 0.02  # additional |x| when fully open
PAD_ALBEDO = (0.75, 0.75, 0.78)

# wrist camera sits behind and above the pads, looking along the approach axis
HAND_EYE = Pose(np.eye(3), (0.0, -0.05, -0.12))
BASE_Y = 0.5
CONTACT_DIST = 0.002  # m; ground-truth contact proximity

SEARCH_SEEDS = 64


def gripper_boxes(eef: Pose, open_frac: float, arm: str = "") -> tuple[Box, Box]:
    off = PAD_MIN_OFFSET + PAD_STROKE * float(np.clip(open_frac, 0.0, 1.0))
    boxes = []
    for sign in (-1.0, 1.0):
        local = Pose(np.eye(3), (sign * off, 0.0, -PAD_HALF[2]))
        boxes.append(Box(eef @ local, PAD_HALF, PAD_ALBEDO, f"pad:{arm}"))
    return tuple(boxes)


def default_arms() -> dict:
    return {
        "left": ArmModel.ur5(Pose(np.eye(3), (0.0, BASE_Y, 0.0)), HAND_EYE, "left"),
        "right": ArmModel.ur5(Pose(np.eye(3), (0.0, -BASE_Y, 0.0)), HAND_EYE, "right"),
    }


def default_intrinsics(size: int = 128) -> dict:
    k = CameraIntrinsics.default(size)
    return {"left": k, "right": k}


def tool_rotation(approach) -> np.ndarray:
    """EEF orientation with the given approach axis and y pointing down."""
    z = np.asarray(approach, dtype=np.float64)
    z = z / np.linalg.norm(z)
    y = np.array([0.0, 0.0, -1.0])
    y = y - z * (y @ z)
    y /= np.linalg.norm(y)
    return np.column_stack([np.cross(y, z), y, z])


def contact_distance(eefs: dict, grippers: dict, objects) -> float:
    """Smallest pad-to-object surface distance over both arms."""
    best = np.inf
    for arm in eefs:
        for pad in gripper_boxes(eefs[arm], grippers[arm], arm):
            for obj in objects:
                if isinstance(obj, Sphere):
                    d = pad.distance_to_sphere(obj)
                else:
                    d = box_box_distance(pad, obj)
                best = min(best, d)
    return best


# --- scripts -------------------------------------------------------------------

@dataclass(frozen=True)
class Waypoint:
    pose: Pose
    gripper: float = 1.0
    steps: int = 0  # steps spent moving here from the previous waypoint
    dwell: int = 0  # steps held here afterwards
    interpolation: str = "joint"  # or "cartesian"

    def to_dict(self) -> dict:
        return {"pose": self.pose.matrix().tolist(), "gripper": self.gripper, "steps": self.steps,
                "dwell": self.dwell, "interpolation": self.interpolation}

    @classmethod
    def from_dict(cls, d: dict) -> "Waypoint":
        return cls(Pose.from_matrix(d["pose"]), d["gripper"], d["steps"], d["dwell"], d["interpolation"])


@dataclass(frozen=True)
class DemoScript:
    """Per-arm waypoint lists. Both arms must share the same step schedule."""

    left: tuple
    right: tuple
    name: str = ""
    contact_phase: tuple = ()  # (first, last) waypoint indices of the converge segment

    def __post_init__(self):
        if len(self.left) != len(self.right):
            raise ValueError("both arms need the same number of waypoints")
        for a, b in zip(self.left, self.right):
            if (a.steps, a.dwell) != (b.steps, b.dwell):
                raise ValueError("arms must share the step schedule")
        if any(w.steps < 1 for w in self.left[1:]):
            raise ValueError("every waypoint after the first needs at least one step")

    def schedule(self) -> list[int]:
        """Timestep index at which each waypoint is reached."""
        t, out = 0, []
        for i, w in enumerate(self.left):
            t += w.steps if i else 0
            out.append(t)
            t += w.dwell
        return out

    @property
    def n_steps(self) -> int:
        if not self.left:
            return 0
        return self.schedule()[-1] + self.left[-1].dwell + 1

    def to_dict(self) -> dict:
        return {"name": self.name, "contact_phase": list(self.contact_phase),
                "left": [w.to_dict() for w in self.left], "right": [w.to_dict() for w in self.right]}

    @classmethod
    def from_dict(cls, d: dict) -> "DemoScript":
        return cls(tuple(Waypoint.from_dict(w) for w in d["left"]),
                   tuple(Waypoint.from_dict(w) for w in d["right"]),
                   d.get("name", ""), tuple(d.get("contact_phase", ())))


def scene_to_dict(scene: Scene) -> dict:
    objs = []
    for o in scene.objects:
        if isinstance(o, Sphere):
            objs.append({"type": "sphere", "name": o.name, "center": o.center.tolist(),
                         "radius": o.radius, "albedo": list(o.albedo)})
        else:
            objs.append({"type": "box", "name": o.name, "pose": o.pose.matrix().tolist(),
                         "half_extents": o.half_extents.tolist(), "albedo": list(o.albedo)})
    return {"table_height": scene.table_height, "table_albedo": list(scene.table_albedo), "objects": objs}


def scene_from_dict(d: dict) -> Scene:
    objs = []
    for o in d["objects"]:
        if o["type"] == "sphere":
            objs.append(Sphere(o["center"], o["radius"], tuple(o["albedo"]), o["name"]))
        elif o["type"] == "box":
            objs.append(Box(Pose.from_matrix(o["pose"]), o["half_extents"], tuple(o["albedo"]), o["name"]))
        else:
            raise ValueError(f"unknown object type {o['type']!r}")
    return Scene(d["table_height"], tuple(objs), {}, tuple(d.get("table_albedo", (0.55, 0.5, 0.42))))


class Task(str, Enum):
    LIFT_BALL = "lift-ball"
    PUSH_BLOCK = "push-block"


BALL_RADIUS = 0.06
SQUEEZE = 0.5  # gripper opening held while lifting the ball
BLOCK_HALF = np.array([0.03, 0.12, 0.04])


def lift_ball_setup(center_xy, table_height: float = 0.0) -> tuple[Scene, DemoScript]:
    """Approach, descend beside the ball, converge until the pads touch, squeeze, lift.

    The squeeze closes the pads halfway into the (compliant) ball, so the ball
    covers part of each pad in the wrist view once contact is made.
    """
    r = BALL_RADIUS
    c = np.array([center_xy[0], center_xy[1], table_height + r])
    # pads touch the sphere along their inner edges
    inner = PAD_MIN_OFFSET + PAD_STROKE - PAD_HALF[0]
    reach = np.sqrt(r**2 - inner**2)
    left, right = [], []
    for name, sign, out in (("left", 1.0, left), ("right", -1.0, right)):
        R = tool_rotation((0.0, -sign, 0.0))
        side = np.array([0.0, sign, 0.0])
        touch = c + side * reach
        out.extend([
            Waypoint(Pose(R, c + side * (reach + 0.15) + [0, 0, 0.10]), 1.0, 0, 0, "joint"),
            Waypoint(Pose(R, c + side * (reach + 0.05)), 1.0, 24, 0, "joint"),
            Waypoint(Pose(R, touch), 1.0, 10, 0, "cartesian"),
            Waypoint(Pose(R, touch), SQUEEZE, 2, 1, "cartesian"),
            Waypoint(Pose(R, touch + [0, 0, 0.12]), SQUEEZE, 22, 0, "cartesian"),
        ])
    scene = Scene(table_height, (Sphere(c, r, (0.85, 0.3, 0.2), "ball"),))
    return scene, DemoScript(tuple(left), tuple(right), Task.LIFT_BALL.value, (1, 2))


def push_block_setup(center_xy, table_height: float = 0.0) -> tuple[Scene, DemoScript]:
    """Both pads approach the block's rear face, touch it, and push it forward."""
    h = BLOCK_HALF
    c = np.array([center_xy[0], center_xy[1], table_height + h[2]])
    R = tool_rotation((1.0, 0.0, 0.0))
    left, right = [], []
    for sign, out in ((1.0, left), (-1.0, right)):
        touch = np.array([c[0] - h[0], c[1] + sign * 0.06, c[2]])
        out.extend([
            Waypoint(Pose(R, touch + [-0.15, 0.0, 0.10]), 1.0, 0, 0, "joint"),
            Waypoint(Pose(R, touch + [-0.05, 0.0, 0.0]), 1.0, 24, 0, "joint"),
            Waypoint(Pose(R, touch), 1.0, 10, 3, "cartesian"),
            Waypoint(Pose(R, touch + [0.12, 0.0, 0.0]), 1.0, 22, 0, "cartesian"),
        ])
    block = Box(Pose(np.eye(3), c), h, (0.2, 0.45, 0.8), "block")
    scene = Scene(table_height, (block,))
    return scene, DemoScript(tuple(left), tuple(right), Task.PUSH_BLOCK.value, (1, 2))


# --- running demos ----------------------------------------------------------------

IKFn = Callable[[ArmModel, Pose, np.ndarray], "np.ndarray | None"]


def _multistart(arm: ArmModel, target: Pose, ik: IKFn) -> np.ndarray | None:
    rng = np.random.default_rng(12345)
    lo, hi = arm.joint_limits[:, 0], arm.joint_limits[:, 1]
    best = None
    relaxed = IKConfig(max_joint_jump=np.inf)
    for _ in range(SEARCH_SEEDS):
        seed = rng.uniform(np.maximum(lo, -np.pi), np.minimum(hi, np.pi))
        q = ik(arm, target, seed, relaxed)
        if q is None:
            continue
        # prefer configurations away from the limits and close to zero
        score = float(np.max(np.abs(q)))
        if best is None or score < best[0]:
            best = (score, q)
    return None if best is None else best[1]


_anchor_cache: dict = {}


def _solve_first(arm: ArmModel, target: Pose, ik: IKFn) -> np.ndarray | None:
    """Solve the first waypoint of a script deterministically.

    A multi-start search runs once per (arm, orientation) on a canonical target
    in front of the arm; the actual target is then solved from that anchor.
    Results therefore do not depend on which demos were generated before.
    """
    key = (arm.to_json(), target.rotation.tobytes())
    if key not in _anchor_cache:
        canonical = Pose(target.rotation, (0.45, 0.3 * np.sign(arm.base_pose.translation[1] or 1.0), 0.15))
        _anchor_cache[key] = _multistart(arm, canonical, ik)
    anchor = _anchor_cache[key]
    if anchor is not None:
        q = ik(arm, target, anchor, IKConfig(max_joint_jump=np.inf))
        if q is not None:
            return q
    return _multistart(arm, target, ik)


def gripper_schedule(waypoints) -> list[float]:
    """Per-step gripper opening, linearly interpolated over each segment."""
    out = [waypoints[0].gripper] * (1 + waypoints[0].dwell)
    for w in waypoints[1:]:
        g0 = out[-1]
        out.extend(g0 + (w.gripper - g0) * (j / w.steps) for j in range(1, w.steps + 1))
        out.extend([w.gripper] * w.dwell)
    return out


def _interp_joint(qa, qb, n):
    return [qa + (qb - qa) * (i / n) for i in range(1, n + 1)]


@dataclass
class DemoResult:
    trajectory: Trajectory
    contact: np.ndarray  # per-step bool ground truth
    contact_distance: np.ndarray  # per-step meters
    object_poses: list  # per-step list of object centers (spheres) or poses (boxes)
    scenes: list = field(default_factory=list)


def _carry(objects, offset):
    out = []
    for o in objects:
        if isinstance(o, Sphere):
            out.append(o.moved(o.center + offset))
        else:
            out.append(o.moved(Pose(o.pose.rotation, o.pose.translation + offset)))
    return tuple(out)


def plan_joints(script: DemoScript, arms: dict, ik: IKFn = ik_lm) -> dict:
    """Joint trajectory per arm following the script's interpolation modes."""
    plans = {}
    for name in ARMS:
        wps = getattr(script, name)
        arm = arms[name]
        q = _solve_first(arm, wps[0].pose, ik)
        if q is None:
            raise UnreachableWaypoint(0, name)
        qs = [q] * (1 + wps[0].dwell)
        for i, w in enumerate(wps[1:], start=1):
            prev = qs[-1]
            if w.interpolation == "cartesian":
                start = fk(arm, prev)
                seg = []
                for j in range(1, w.steps + 1):
                    s = j / w.steps
                    pose = Pose(w.pose.rotation, start.translation + (w.pose.translation - start.translation) * s)
                    qj = ik(arm, pose, seg[-1] if seg else prev)
                    if qj is None:
                        raise UnreachableWaypoint(i, name)
                    seg.append(qj)
            else:
                q_end = ik(arm, w.pose, prev, IKConfig(max_joint_jump=np.inf))
                if q_end is None:
                    raise UnreachableWaypoint(i, name)
                seg = _interp_joint(prev, q_end, w.steps)
            qs.extend(seg)
            qs.extend([qs[-1]] * w.dwell)
        plans[name] = qs
    return plans


def run_demo(scene: Scene, script: DemoScript, arms: dict | None = None, ik: IKFn = ik_lm,
             n_steps: int | None = None, intrinsics: dict | None = None,
             static_if_empty: bool = False, render_frames: bool = True) -> DemoResult:
    """Execute a script kinematically, rendering both wrist cameras at every step.

    Objects touched by the pads (ground-truth contact) are carried rigidly with
    the mean end-effector displacement from the moment of first contact.
    """
    arms = arms or default_arms()
    intrinsics = intrinsics or default_intrinsics()
    if not script.left:
        if not static_if_empty:
            raise UnreachableWaypoint(0, "empty script")
        return DemoResult(Trajectory([], arms, intrinsics, {"task": script.name}), np.zeros(0, bool),
                          np.zeros(0), [])
    plans = plan_joints(script, arms, ik)
    total = len(plans["left"])
    if n_steps is not None:
        total = min(total, n_steps)
    grip = {name: gripper_schedule(getattr(script, name))[:total] for name in ARMS}

    steps, contact, dists, obj_poses, scenes = [], [], [], [], []
    objects = scene.objects
    anchor = None
    for t in range(total):
        q = {name: plans[name][t] for name in ARMS}
        eef = {name: fk(arms[name], q[name]) for name in ARMS}
        mid = 0.5 * (eef["left"].translation + eef["right"].translation)
        if anchor is not None:
            objects = _carry(anchor[1], mid - anchor[0])
        g = {name: grip[name][t] for name in ARMS}
        d = contact_distance(eef, g, objects)
        if anchor is None and d <= CONTACT_DIST:
            anchor = (mid, objects)
        contact.append(d <= CONTACT_DIST)
        dists.append(d)
        obj_poses.append([o.center.copy() if isinstance(o, Sphere) else o.pose for o in objects])
        grippers = {name: gripper_boxes(eef[name], g[name], name) for name in ARMS}
        sc = scene.with_objects(objects).with_grippers(grippers)
        scenes.append(sc)
        obs = {}
        for name in ARMS:
            cam = eef[name] @ arms[name].hand_eye
            nxt = plans[name][min(t + 1, total - 1)]
            if render_frames:
                r = render(sc, cam, intrinsics[name])
                obs[name] = ArmObs(rgb_to_uint8(r.rgb), cam, eef[name], q[name], nxt, g[name],
                                   depth_to_mm(r.depth), r.gripper_mask(name).astype(np.uint8))
            else:
                k = intrinsics[name]
                blank = np.zeros((k.height, k.width, 3), np.uint8)
                obs[name] = ArmObs(blank, cam, eef[name], q[name], nxt, g[name])
        steps.append(TimeStep(obs["left"], obs["right"]))
    meta = {"task": script.name, "sim": True, "calibrated": True}
    traj = Trajectory(steps, arms, intrinsics, meta)
    return DemoResult(traj, np.array(contact, bool), np.array(dists), obj_poses, scenes)


@dataclass(frozen=True)
class SpawnRegion:
    x: tuple = (0.40, 0.50)
    y: tuple = (-0.05, 0.05)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([rng.uniform(*self.x), rng.uniform(*self.y)])


def task_setup(task: Task | str, center_xy, table_height: float = 0.0):
    task = Task(task)
    if task is Task.LIFT_BALL:
        return lift_ball_setup(center_xy, table_height)
    return push_block_setup(center_xy, table_height)


def _demo_job(args) -> DemoResult:
    task, seed, i, ss, region, size = args
    rng = np.random.default_rng(ss)
    scene, script = task_setup(task, region.sample(rng))
    res = run_demo(scene, script, intrinsics=default_intrinsics(size))
    res.trajectory.metadata.update({"seed": seed, "episode": i, "provenance": "original",
                                    "scene": scene_to_dict(scene),
                                    "gt_contact": [bool(c) for c in res.contact]})
    return res


def generate_demos(task: Task | str, n_demos: int, seed: int, region: SpawnRegion = SpawnRegion(),
                   size: int = 128, workers: int = 1) -> list[DemoResult]:
    """Randomized demonstrations, one child seed per episode (identical for any ``workers``)."""
    children = np.random.SeedSequence(seed).spawn(n_demos)
    jobs = [(Task(task), seed, i, ss, region, size) for i, ss in enumerate(children)]
    if workers > 1 and n_demos > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(workers, n_demos)) as pool:
            return list(pool.map(_demo_job, jobs))
    return [_demo_job(j) for j in jobs]


def generate_dataset(task: Task | str, n_demos: int, seed: int, out_dir, region: SpawnRegion = SpawnRegion(),
                     size: int = 128, workers: int = 1):
    """Generate demonstrations and write them as a dataset directory."""
    from ..dataset.io import write_dataset

    demos = generate_demos(task, n_demos, seed, region, size, workers)
    return write_dataset([d.trajectory for d in demos], out_dir)


def dump_setup(scene: Scene, script: DemoScript) -> str:
    return json.dumps({"scene": scene_to_dict(scene), "script": script.to_dict()}, indent=2)
