"""Contact-phase labeling from gripper masks and wrist-camera frames.

Two detectors share one trajectory-level labeler:

* depth path: fill holes in the gripper mask, look at a ring of pixels just
  outside it, reject depth outliers in the ring by z-score, and flag contact
  when the nearest remaining ring depth sits within ``contact_gap`` of the
  gripper's median depth;
* SSIM path (no depth available): compare crops around each gripper finger
  against the same crops of a template frame in which the gripper is fully
  visible; the lowest per-finger score decides.

Per-arm decisions are OR-ed and the sequence is median filtered.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy import ndimage
from scipy.signal import medfilt

from .errors import DegenerateDepth, DimensionMismatch, EmptyMask, FrameError

_STRUCT = np.ones((3, 3), dtype=bool)


class Phase(IntEnum):
    CONTACTLESS = 0
    CONTACT_RICH = 1


@dataclass(frozen=True)
class DepthContactConfig:
    z_max: float = 2.5
    contact_gap: float = 0.01  # m
    min_mask_pixels: int = 50
    fill_iterations: int = 2
    ring_width: int = 4  # px
    max_invalid_fraction: float = 0.9


@dataclass(frozen=True)
class SSIMConfig:
    window: int = 7
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0


@dataclass(frozen=True)
class SSIMContactConfig:
    ssim_threshold: float = 0.75
    roi_margin: int = 4  # px added around each finger's bounding box in the template mask
    min_part_pixels: int = 20  # mask components smaller than this are ignored
    template_index: int = 0
    ssim: SSIMConfig = field(default_factory=SSIMConfig)


@dataclass(frozen=True)
class LabelConfig:
    method: str = "auto"  # "auto" | "depth" | "ssim"
    smoothing_window: int = 5
    depth: DepthContactConfig = field(default_factory=DepthContactConfig)
    ssim: SSIMContactConfig = field(default_factory=SSIMContactConfig)


@dataclass
class ContactLabel:
    labels: np.ndarray  # uint8 per timestep, values of Phase
    raw: np.ndarray | None = None  # unsmoothed per-step decision

    @property
    def onset_index(self) -> int | None:
        idx = np.flatnonzero(self.labels == Phase.CONTACT_RICH)
        return int(idx[0]) if idx.size else None

    def __len__(self):
        return len(self.labels)

    def runs(self) -> list[tuple[int, int, int]]:
        """Phase runs as (phase, start, length)."""
        out = []
        for i, v in enumerate(self.labels):
            if out and out[-1][0] == v:
                out[-1][2] += 1
            else:
                out.append([int(v), i, 1])
        return [tuple(r) for r in out]

    def to_bytes(self) -> bytes:
        return self.labels.astype(np.uint8).tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ContactLabel":
        return cls(np.frombuffer(buf, dtype=np.uint8).copy())

    def summary(self) -> dict:
        return {
            "length": len(self),
            "onset_index": self.onset_index,
            "runs": [{"phase": Phase(p).name.lower(), "start": s, "length": n} for p, s, n in self.runs()],
        }


# --- depth path -------------------------------------------------------------------

def fill_mask(mask: np.ndarray, iterations: int = 2) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    closed = ndimage.binary_closing(m, structure=_STRUCT, iterations=iterations, border_value=0)
    return ndimage.binary_fill_holes(closed | m)


def detect_contact_depth(depth: np.ndarray, mask: np.ndarray, cfg: DepthContactConfig = DepthContactConfig()) -> bool:
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask)
    if depth.shape != mask.shape:
        raise DimensionMismatch(f"depth {depth.shape} vs mask {mask.shape}")
    grip = fill_mask(mask, cfg.fill_iterations)
    if grip.sum() < cfg.min_mask_pixels:
        raise EmptyMask(f"gripper mask has {int(grip.sum())} pixels, need {cfg.min_mask_pixels}")
    ring = ndimage.binary_dilation(grip, structure=_STRUCT, iterations=cfg.ring_width) & ~grip
    ring_d = depth[ring]
    valid = ring_d > 0
    if ring_d.size == 0 or (1.0 - valid.mean()) > cfg.max_invalid_fraction:
        raise DegenerateDepth("too few valid depth pixels around the gripper")
    grip_d = depth[grip]
    grip_d = grip_d[grip_d > 0]
    if grip_d.size == 0:
        raise DegenerateDepth("no valid depth on the gripper")
    ring_d = ring_d[valid]
    sd = ring_d.std()
    if sd > 0:
        ring_d = ring_d[np.abs(ring_d - ring_d.mean()) / sd <= cfg.z_max]
    gap = ring_d.min() - np.median(grip_d)
    return bool(gap < cfg.contact_gap)


# --- SSIM -------------------------------------------------------------------------

def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    return img


def ssim(a: np.ndarray, b: np.ndarray, cfg: SSIMConfig = SSIMConfig()) -> float:
    """Mean structural similarity over all fully-contained 7x7 windows.

    Uniform window, sample covariance (N-1 normalization), constants
    ``(K1 L)^2`` and ``(K2 L)^2``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    w = cfg.window
    if min(a.shape) < w:
        raise DimensionMismatch(f"images smaller than the {w}x{w} window")
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    n = w * w
    cov_norm = n / (n - 1.0)

    def box(x):
        return ndimage.uniform_filter(x, size=w, mode="reflect")

    ux, uy = box(a), box(b)
    vx = cov_norm * (box(a * a) - ux * ux)
    vy = cov_norm * (box(b * b) - uy * uy)
    vxy = cov_norm * (box(a * b) - ux * uy)
    num = (2 * ux * uy + c1) * (2 * vxy + c2)
    den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    s = num / den
    pad = (w - 1) // 2
    s = s[pad : s.shape[0] - pad, pad : s.shape[1] - pad]
    return float(s.mean())


def gripper_roi(mask: np.ndarray, margin: int) -> tuple[slice, slice]:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise EmptyMask("template gripper mask is empty")
    h, w = mask.shape
    return (slice(max(ys.min() - margin, 0), min(ys.max() + margin + 1, h)),
            slice(max(xs.min() - margin, 0), min(xs.max() + margin + 1, w)))


def gripper_rois(mask: np.ndarray, margin: int, min_pixels: int = 1) -> list[tuple[slice, slice]]:
    """One crop per connected gripper part (finger) in the mask."""
    lab, n = ndimage.label(np.asarray(mask).astype(bool), structure=_STRUCT)
    rois = [gripper_roi(lab == i, margin) for i in range(1, n + 1) if (lab == i).sum() >= min_pixels]
    if not rois:
        raise EmptyMask("template gripper mask has no usable parts")
    return rois


def _as_roi_list(roi) -> list:
    if isinstance(roi, tuple) and len(roi) == 2 and all(isinstance(r, slice) for r in roi):
        return [roi]
    return list(roi)


def gripper_similarity(frame: np.ndarray, template: np.ndarray, roi, cfg: SSIMConfig = SSIMConfig()) -> float:
    """Lowest SSIM over the gripper crops; ``roi`` is one crop or a list of crops."""
    fa = np.asarray(frame)
    ta = np.asarray(template)
    if fa.shape != ta.shape:
        raise DimensionMismatch(f"{fa.shape} vs {ta.shape}")
    ga, gt = to_gray(fa), to_gray(ta)
    return min(ssim(ga[r], gt[r], cfg) for r in _as_roi_list(roi))


def detect_contact_ssim(frame: np.ndarray, template: np.ndarray, roi,
                        cfg: SSIMContactConfig = SSIMContactConfig()) -> bool:
    """Contact when the gripper region no longer looks like the template."""
    return bool(gripper_similarity(frame, template, roi, cfg.ssim) < cfg.ssim_threshold)


# --- trajectory labeling ---------------------------------------------------------

def smooth_labels(raw: np.ndarray, window: int = 5) -> np.ndarray:
    if raw.size == 0 or window <= 1:
        return raw.astype(np.uint8)
    # medfilt zero-pads; replicate the edges instead so runs touching the ends survive
    pad = window // 2
    padded = np.concatenate([np.repeat(raw[:1], pad), raw, np.repeat(raw[-1:], pad)])
    return medfilt(padded.astype(np.float64), window)[pad : pad + raw.size].astype(np.uint8)


def _resolve_method(traj, method: str) -> str:
    if method == "auto":
        return "depth" if traj.has_depth else "ssim"
    if method not in ("depth", "ssim"):
        raise ValueError(f"unknown contact method {method!r}")
    return method


def label_trajectory(traj, cfg: LabelConfig = LabelConfig()) -> ContactLabel:
    """Per-timestep contact phase for a trajectory."""
    n = len(traj.steps)
    if n == 0:
        return ContactLabel(np.zeros(0, np.uint8), np.zeros(0, np.uint8))
    method = _resolve_method(traj, cfg.method)
    raw = np.zeros(n, dtype=np.uint8)
    if method == "depth":
        for i, step in enumerate(traj.steps):
            hit = False
            for obs in (step.left, step.right):
                if obs.depth_mm is None or obs.mask is None:
                    raise FrameError(i, ValueError("depth path needs depth and mask"))
                try:
                    hit |= detect_contact_depth(obs.depth, obs.mask, cfg.depth)
                except (EmptyMask, DegenerateDepth, DimensionMismatch) as exc:
                    raise FrameError(i, exc) from exc
            raw[i] = hit
    else:
        # template: first frame at or after template_index that carries both
        # gripper masks (augmented steps have none)
        t0 = next((i for i in range(cfg.ssim.template_index, n)
                   if traj.steps[i].left.mask is not None and traj.steps[i].right.mask is not None),
                  cfg.ssim.template_index)
        templates = {}
        for name in ("left", "right"):
            tobs = traj.steps[t0].arm(name)
            if tobs.mask is None:
                raise FrameError(t0, ValueError("SSIM path needs a template gripper mask"))
            try:
                roi = gripper_rois(tobs.mask, cfg.ssim.roi_margin, cfg.ssim.min_part_pixels)
            except EmptyMask as exc:
                raise FrameError(t0, exc) from exc
            templates[name] = (tobs.image, roi)
        for i, step in enumerate(traj.steps):
            hit = False
            for name in ("left", "right"):
                tmpl, roi = templates[name]
                try:
                    hit |= detect_contact_ssim(step.arm(name).image, tmpl, roi, cfg.ssim)
                except DimensionMismatch as exc:
                    raise FrameError(i, exc) from exc
            raw[i] = hit
    return ContactLabel(smooth_labels(raw, cfg.smoothing_window), raw)
