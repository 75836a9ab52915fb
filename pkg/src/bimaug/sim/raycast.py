"""Ray-cast RGB-D renderer over closed-form primitives.

One ray per pixel through the pixel center. Nearest hit wins. Depth is the
camera-frame z of the hit point; background pixels get depth 0 and instance 0.
Shading is ambient plus Lambertian under a fixed sun. It deliberately has no
view-dependent term, so a surface point has the same color from every camera
and reprojected views can be compared with fresh renders pixel for pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import CameraIntrinsics, Pose, pixel_grid

BACKGROUND_RGB = np.array([0.05, 0.05, 0.08])
SUN_DIR = np.array([0.3, -0.2, 1.0]) / np.linalg.norm([0.3, -0.2, 1.0])
AMBIENT = 0.35
SUN_GAIN = 0.65

TABLE_ID = 1


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    albedo: tuple = (0.85, 0.25, 0.2)
    name: str = "sphere"

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))

    def moved(self, center) -> "Sphere":
        return Sphere(center, self.radius, self.albedo, self.name)

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Signed distance of points (..., 3) to the surface."""
        return np.linalg.norm(points - self.center, axis=-1) - self.radius


@dataclass(frozen=True)
class Box:
    pose: Pose
    half_extents: np.ndarray
    albedo: tuple = (0.2, 0.5, 0.85)
    name: str = "box"

    def __post_init__(self):
        h = np.asarray(self.half_extents, dtype=np.float64)
        if np.any(h <= 0):
            raise ValueError("half extents must be positive")
        object.__setattr__(self, "half_extents", h)

    def moved(self, pose: Pose) -> "Box":
        return Box(pose, self.half_extents, self.albedo, self.name)

    def closest_point(self, point) -> np.ndarray:
        local = (np.asarray(point) - self.pose.translation) @ self.pose.rotation
        local = np.clip(local, -self.half_extents, self.half_extents)
        return self.pose.apply(local)

    def distance_to_sphere(self, s: Sphere) -> float:
        return float(np.linalg.norm(self.closest_point(s.center) - s.center) - s.radius)

    def corners(self) -> np.ndarray:
        signs = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], dtype=float)
        return self.pose.apply(signs * self.half_extents)


def box_box_distance(a: Box, b: Box) -> float:
    """Separation between two boxes (0 when touching or overlapping).

    Exact for the axis-aligned-relative cases the simulator produces
    (face-to-face contact); computed by alternating closest-point projection.
    """
    p = a.pose.translation.copy()
    for _ in range(64):
        qb = b.closest_point(p)
        pa = a.closest_point(qb)
        if np.linalg.norm(pa - p) < 1e-12:
            break
        p = pa
    return float(np.linalg.norm(a.closest_point(b.closest_point(p)) - b.closest_point(p)))


@dataclass(frozen=True)
class Scene:
    table_height: float = 0.0
    objects: tuple = ()
    grippers: dict = field(default_factory=dict)  # arm name -> tuple[Box, ...]
    table_albedo: tuple = (0.55, 0.5, 0.42)

    def __post_init__(self):
        for o in self.objects:
            if isinstance(o, Sphere) and o.center[2] - o.radius < self.table_height - 1e-9:
                raise ValueError(f"object {o.name} penetrates the table")
            if isinstance(o, Box) and np.min(o.corners()[:, 2]) < self.table_height - 1e-9:
                raise ValueError(f"object {o.name} penetrates the table")

    def with_grippers(self, grippers: dict) -> "Scene":
        return Scene(self.table_height, self.objects, grippers, self.table_albedo)

    def with_objects(self, objects) -> "Scene":
        return Scene(self.table_height, tuple(objects), self.grippers, self.table_albedo)

    def primitives(self):
        """Yield (instance id, primitive); ids: 1 table, 2.. objects, then gripper parts."""
        yield TABLE_ID, None
        nid = 2
        for o in self.objects:
            yield nid, o
            nid += 1
        for arm in sorted(self.grippers):
            for part in self.grippers[arm]:
                yield nid, part
                nid += 1

    def instance_ids(self) -> dict:
        """Map instance id to a label: 'table', object name, or 'gripper:<arm>'."""
        out = {0: "background", TABLE_ID: "table"}
        nid = 2
        for o in self.objects:
            out[nid] = o.name
            nid += 1
        for arm in sorted(self.grippers):
            for _ in self.grippers[arm]:
                out[nid] = f"gripper:{arm}"
                nid += 1
        return out


@dataclass
class RenderResult:
    rgb: np.ndarray  # (H, W, 3) float in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 = no hit
    instance: np.ndarray  # (H, W) int32
    labels: dict

    def mask_of(self, label: str) -> np.ndarray:
        ids = [i for i, name in self.labels.items() if name == label]
        return np.isin(self.instance, ids)

    def gripper_mask(self, arm: str) -> np.ndarray:
        return self.mask_of(f"gripper:{arm}")


def _hit_plane(o, d, height):
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (height - o[2]) / d[..., 2]
    s = np.where(np.isfinite(s) & (s > 0), s, np.inf)
    n = np.broadcast_to(np.array([0.0, 0.0, 1.0]), d.shape)
    return s, n


def _hit_sphere(o, d, sph: Sphere):
    oc = o - sph.center
    b = d @ oc
    c = oc @ oc - sph.radius**2
    disc = b * b - c
    sq = np.sqrt(np.maximum(disc, 0.0))
    s0 = -b - sq
    s1 = -b + sq
    s = np.where(s0 > 1e-12, s0, s1)
    s = np.where((disc >= 0) & (s > 1e-12), s, np.inf)
    p = o + d * np.where(np.isfinite(s), s, 0.0)[..., None]
    n = (p - sph.center) / sph.radius
    return s, n


def _hit_box(o, d, box: Box):
    s = np.full(d.shape[0], np.inf)
    n = np.zeros(d.shape)
    # cull rays that miss the bounding sphere
    oc = o - box.pose.translation
    b = d @ oc
    disc = b * b - (oc @ oc - box.half_extents @ box.half_extents)
    cand = np.nonzero(disc >= 0)[0]
    if cand.size == 0:
        return s, n
    R = box.pose.rotation
    ol = R.T @ oc
    dl = d[cand] @ R
    h = box.half_extents
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dl
        t1 = (-h - ol) * inv
        t2 = (h - ol) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tnear = tmin.max(axis=-1)
    tfar = tmax.min(axis=-1)
    sc = np.where(tnear > 1e-12, tnear, tfar)
    sc = np.where((tnear <= tfar) & (sc > 1e-12), sc, np.inf)
    axis = np.where(tnear > 1e-12, np.argmax(tmin, axis=-1), np.argmin(tmax, axis=-1))
    nl = np.zeros(dl.shape)
    idx = np.arange(dl.shape[0])
    nl[idx, axis] = -np.sign(dl[idx, axis])
    s[cand] = sc
    n[cand] = nl @ R.T
    return s, n


def _table_texture(p: np.ndarray, albedo) -> np.ndarray:
    # gentle low-frequency variation so views are not featureless
    w = 0.9 + 0.1 * np.sin(6.0 * p[:, 0]) * np.cos(5.0 * p[:, 1])
    return np.asarray(albedo)[None, :] * w[:, None]


def render(scene: Scene, camera: Pose, intrinsics: CameraIntrinsics) -> RenderResult:
    k = intrinsics
    uv = pixel_grid(k).reshape(-1, 2) + 0.0
    dirs_cam = np.stack([(uv[:, 0] - k.cx) / k.fx, (uv[:, 1] - k.cy) / k.fy, np.ones(len(uv))], axis=-1)
    dirs_cam /= np.linalg.norm(dirs_cam, axis=-1, keepdims=True)
    d = dirs_cam @ camera.rotation.T
    o = camera.translation

    n_rays = d.shape[0]
    best = np.full(n_rays, np.inf)
    inst = np.zeros(n_rays, dtype=np.int32)
    normal = np.zeros((n_rays, 3))
    albedo = np.zeros((n_rays, 3))
    prims = {}
    for pid, prim in scene.primitives():
        if prim is None:
            s, n = _hit_plane(o, d, scene.table_height)
        elif isinstance(prim, Sphere):
            s, n = _hit_sphere(o, d, prim)
        else:
            s, n = _hit_box(o, d, prim)
        closer = s < best
        if not closer.any():
            continue
        best[closer] = s[closer]
        inst[closer] = pid
        normal[closer] = np.broadcast_to(n, d.shape)[closer]
        prims[pid] = prim

    hit = np.isfinite(best)
    p = o + d * np.where(hit, best, 0.0)[:, None]
    for pid, prim in prims.items():
        sel = inst == pid
        if prim is None:
            albedo[sel] = _table_texture(p[sel], scene.table_albedo)
        else:
            albedo[sel] = prim.albedo
    # face normals toward the viewer
    flip = np.einsum("ij,ij->i", normal, d) > 0
    normal[flip] *= -1
    sun = np.clip(normal @ SUN_DIR, 0.0, None)
    shade = AMBIENT + SUN_GAIN * sun
    rgb = np.where(hit[:, None], np.clip(albedo * shade[:, None], 0.0, 1.0), BACKGROUND_RGB[None, :])

    depth_cam = np.where(hit, best * dirs_cam[:, 2], 0.0)
    H, W = k.height, k.width
    return RenderResult(rgb.reshape(H, W, 3), depth_cam.reshape(H, W), inst.reshape(H, W), scene.instance_ids())
