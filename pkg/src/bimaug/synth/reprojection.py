"""Depth-based reprojection: the deterministic view-synthesis backend.

Each source pixel with valid depth is lifted to 3-D, moved into the target
camera (``p_target = dp^-1 @ p_source``) and splatted to its nearest target
pixel; a z-buffer keeps the closest surface. Every splatted target pixel is
then traced back into the source image at the splatted depth and its color
is bilinearly interpolated there.

Pixels are marked invalid (and set to zero) when nothing lands on them, when
their bilinear footprint in the source touches a depth discontinuity or an
invalid depth, or when they sit on a far surface right next to a much nearer
one (background leaking through cracks of a foreground surface).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..errors import DimensionMismatch, MissingDepth
from ..geometry import CameraIntrinsics, Pose, invert
from .base import ImagePair, SynthResult, Synthesizer


@dataclass(frozen=True)
class ReprojectionConfig:
    edge_ratio: float = 0.03  # relative depth jump treated as a discontinuity
    min_depth: float = 1e-4  # m; warped points closer than this are dropped


def warp_coordinates(depth: np.ndarray, k: CameraIntrinsics, dp: Pose):
    """Where every source pixel lands in the target camera.

    Returns ``(uv, z, ok)``: target pixel coordinates (H, W, 2), target depth
    (H, W) and a mask of pixels that had valid depth (others hold NaN).
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    ok = depth > 0
    x = (u - k.cx) / k.fx * depth
    y = (v - k.cy) / k.fy * depth
    p = np.stack([x, y, depth], axis=-1)
    inv = invert(dp)
    q = p @ inv.rotation.T + inv.translation
    with np.errstate(divide="ignore", invalid="ignore"):
        ut = k.fx * q[..., 0] / q[..., 2] + k.cx
        vt = k.fy * q[..., 1] / q[..., 2] + k.cy
    uv = np.stack([ut, vt], axis=-1)
    uv[~ok] = np.nan
    z = np.where(ok, q[..., 2], np.nan)
    return uv, z, ok


def depth_edges(depth: np.ndarray, ratio: float) -> np.ndarray:
    """Pixels at a depth discontinuity or next to invalid depth.

    Inverse depth is affine in pixel coordinates on any plane, so its second
    differences vanish on planar surfaces and stay small on smooth curved
    ones; a jump shows up as a second difference above ``ratio`` relative to
    the local inverse depth.
    """
    d = np.asarray(depth, dtype=np.float64)
    valid = d > 0
    inv = np.where(valid, 1.0 / np.where(valid, d, 1.0), 0.0)
    jump = np.zeros(d.shape, dtype=bool)
    for axis in (0, 1):
        lap = np.abs(ndimage.correlate1d(inv, [1.0, -2.0, 1.0], axis=axis, mode="nearest"))
        jump |= lap > ratio * inv
    jump = ndimage.binary_dilation(jump, structure=np.ones((3, 3), bool))
    invalid_near = ndimage.minimum_filter(valid.astype(np.uint8), size=3, mode="constant", cval=0) == 0
    return invalid_near | jump


_DIRECTIONS = ((0, 1), (1, 0), (1, 1), (1, -1))


def _shift(a: np.ndarray, dy: int, dx: int, fill=0.0) -> np.ndarray:
    """``out[y, x] = a[y + dy, x + dx]`` with ``fill`` outside the image."""
    h, w = a.shape
    out = np.full_like(a, fill)
    ys, yd = slice(max(dy, 0), h + min(dy, 0)), slice(max(-dy, 0), h + min(-dy, 0))
    xs, xd = slice(max(dx, 0), w + min(dx, 0)), slice(max(-dx, 0), w + min(-dx, 0))
    out[yd, xd] = a[ys, xs]
    return out


def _behind_neighbours(zbuf: np.ndarray, hit: np.ndarray, ratio: float) -> np.ndarray:
    """Splats lying clearly behind both opposite neighbours along some direction."""
    inv = np.where(hit, 1.0 / np.where(hit, zbuf, 1.0), 0.0)
    out = np.zeros(zbuf.shape, dtype=bool)
    for dy, dx in _DIRECTIONS:
        a, b = _shift(inv, dy, dx), _shift(inv, -dy, -dx)
        both = (a > 0) & (b > 0)
        out |= hit & both & (0.5 * (a + b) - inv > ratio * inv)
    return out


def _fill_cracks(zbuf: np.ndarray, ratio: float) -> np.ndarray:
    """Give empty pixels flanked on opposite sides by one smooth surface that surface's depth."""
    hit = zbuf > 0
    inv = np.where(hit, 1.0 / np.where(hit, zbuf, 1.0), 0.0)
    fill = np.zeros_like(zbuf)
    for dy, dx in _DIRECTIONS:
        a, b = _shift(inv, dy, dx), _shift(inv, -dy, -dx)
        ok = ~hit & (fill == 0) & (a > 0) & (b > 0) & (np.abs(a - b) <= ratio * np.maximum(a, b))
        fill[ok] = 2.0 / (a[ok] + b[ok])
    return np.where(hit, zbuf, fill)


def _bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    return ((1 - fu) * (1 - fv) * img[v0, u0] + fu * (1 - fv) * img[v0, u0 + 1]
            + (1 - fu) * fv * img[v0 + 1, u0] + fu * fv * img[v0 + 1, u0 + 1])


def reproject_image(img: np.ndarray, depth: np.ndarray, k: CameraIntrinsics, dp: Pose,
                    cfg: ReprojectionConfig = ReprojectionConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Warp one RGB image into the camera displaced by ``dp``; returns (image, valid mask)."""
    img = np.asarray(img, dtype=np.float64)
    if depth is None:
        raise MissingDepth("reprojection needs a depth image")
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    if img.shape[:2] != (h, w) or (k.height, k.width) != (h, w):
        raise DimensionMismatch(f"image {img.shape}, depth {depth.shape}, intrinsics {(k.height, k.width)}")
    if dp.is_identity():
        return img.copy(), np.ones((h, w), dtype=bool)

    uv, z, ok = warp_coordinates(depth, k, dp)
    src_edge = depth_edges(depth, cfg.edge_ratio)
    with np.errstate(invalid="ignore"):
        ui = np.rint(uv[..., 0])
        vi = np.rint(uv[..., 1])
        use = ok & (z > cfg.min_depth) & (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
    tgt = (vi[use] * w + ui[use]).astype(np.int64)
    zs = z[use]
    # z-buffer: per target pixel keep the nearest splat
    order = np.lexsort((zs, tgt))
    tgt, zs = tgt[order], zs[order]
    first = np.ones(tgt.size, dtype=bool)
    first[1:] = tgt[1:] != tgt[:-1]
    zbuf = np.zeros(h * w)
    zbuf[tgt[first]] = zs[first]
    zbuf = zbuf.reshape(h, w)
    hit = zbuf > 0
    hit &= ~_behind_neighbours(zbuf, hit, cfg.edge_ratio)
    zbuf = _fill_cracks(np.where(hit, zbuf, 0.0), cfg.edge_ratio)
    hit = zbuf > 0

    # trace target pixels back into the source at their splatted depth
    vt, ut = np.nonzero(hit)
    zt = zbuf[vt, ut]
    pts = np.stack([(ut - k.cx) / k.fx * zt, (vt - k.cy) / k.fy * zt, zt], axis=-1)
    ps = pts @ dp.rotation.T + dp.translation
    good = ps[:, 2] > cfg.min_depth
    us = np.full(len(ps), -1.0)
    vs = np.full(len(ps), -1.0)
    us[good] = k.fx * ps[good, 0] / ps[good, 2] + k.cx
    vs[good] = k.fy * ps[good, 1] / ps[good, 2] + k.cy
    inside = good & (us >= 0) & (us <= w - 1) & (vs >= 0) & (vs <= h - 1)
    # all four bilinear taps must lie on a continuous, valid surface
    u0 = np.clip(np.floor(us).astype(int), 0, w - 2)
    v0 = np.clip(np.floor(vs).astype(int), 0, h - 2)
    smooth = ~(src_edge[v0, u0] | src_edge[v0, u0 + 1] | src_edge[v0 + 1, u0] | src_edge[v0 + 1, u0 + 1])
    # the traced point must be the surface the source camera actually sees there
    d_src = _bilinear(depth[..., None], np.clip(us, 0, w - 1.000001), np.clip(vs, 0, h - 1.000001))[:, 0]
    consistent = np.abs(d_src - ps[:, 2]) <= cfg.edge_ratio * ps[:, 2]
    keep = inside & smooth & consistent

    out = np.zeros_like(img)
    valid = np.zeros((h, w), dtype=bool)
    out[vt[keep], ut[keep]] = _bilinear(img, us[keep], vs[keep])
    valid[vt[keep], ut[keep]] = True
    return out, valid


def synthesize_reprojection(src: ImagePair, intrinsics, dp_left: Pose, dp_right: Pose,
                            cfg: ReprojectionConfig = ReprojectionConfig()) -> SynthResult:
    """Reproject both arms' images; ``intrinsics`` is one camera model or a per-arm dict."""
    if not src.has_depth:
        raise MissingDepth("reprojection needs depth for both arms")
    ks = intrinsics if isinstance(intrinsics, dict) else {"left": intrinsics, "right": intrinsics}
    li, lv = reproject_image(src.left, src.depth_left, ks["left"], dp_left, cfg)
    ri, rv = reproject_image(src.right, src.depth_right, ks["right"], dp_right, cfg)
    return SynthResult(ImagePair(li, ri), lv, rv)


class ReprojectionSynthesizer(Synthesizer):
    name = "reproject"
    needs_depth = True

    def __init__(self, intrinsics, cfg: ReprojectionConfig = ReprojectionConfig()):
        self.intrinsics = intrinsics
        self.cfg = cfg

    def synthesize(self, src, dp_left, dp_right, rng=None) -> SynthResult:
        return synthesize_reprojection(src, self.intrinsics, dp_left, dp_right, self.cfg)
