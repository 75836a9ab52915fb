import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bimaug.contact import (
    ContactLabel,
    LabelConfig,
    Phase,
    SSIMConfig,
    detect_contact_depth,
    detect_contact_ssim,
    gripper_rois,
    label_trajectory,
    smooth_labels,
    ssim,
)
from bimaug.dataset.model import Trajectory
from bimaug.errors import DegenerateDepth, DimensionMismatch, EmptyMask, FrameError


def ssim_oracle(a, b, w=7, k1=0.01, k2=0.03, L=1.0):
    """Window-by-window SSIM with sample statistics, averaged over valid windows."""
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    vals = []
    for i in range(a.shape[0] - w + 1):
        for j in range(a.shape[1] - w + 1):
            x = a[i : i + w, j : j + w].ravel()
            y = b[i : i + w, j : j + w].ravel()
            mx, my = x.mean(), y.mean()
            vx, vy = x.var(ddof=1), y.var(ddof=1)
            cxy = np.cov(x, y, ddof=1)[0, 1]
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.5))
def test_ssim_matches_window_oracle(seed, noise):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, (16, 19))
    b = np.clip(a + noise * rng.standard_normal(a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-10)


def test_ssim_identical_images_is_one():
    a = np.random.default_rng(0).uniform(0, 1, (20, 20))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_rejects_mismatched_or_tiny_images():
    with pytest.raises(DimensionMismatch):
        ssim(np.zeros((10, 10)), np.zeros((10, 11)))
    with pytest.raises(DimensionMismatch):
        ssim(np.zeros((5, 5)), np.zeros((5, 5)))


def _scene(gap):
    """Flat background at 0.5 m, a gripper block at 0.4 m, an object touching its side."""
    depth = np.full((64, 64), 0.5)
    mask = np.zeros((64, 64), np.uint8)
    mask[20:40, 20:30] = 1
    depth[20:40, 20:30] = 0.40
    depth[20:40, 30:40] = 0.40 + gap  # object just right of the gripper
    return depth, mask


def test_depth_detector_flags_adjacent_surface():
    depth, mask = _scene(0.002)
    assert detect_contact_depth(depth, mask)


def test_depth_detector_ignores_distant_background():
    depth, mask = _scene(0.1)
    assert not detect_contact_depth(depth, mask)


def test_depth_detector_errors():
    depth, mask = _scene(0.0)
    with pytest.raises(EmptyMask):
        detect_contact_depth(depth, np.zeros_like(mask))
    with pytest.raises(DegenerateDepth):
        detect_contact_depth(np.zeros_like(depth), mask)
    with pytest.raises(DimensionMismatch):
        detect_contact_depth(depth[:10], mask)


def test_ssim_detector_on_occluded_finger():
    rng = np.random.default_rng(1)
    tmpl = rng.uniform(0, 1, (48, 48, 3))
    mask = np.zeros((48, 48), np.uint8)
    mask[10:20, 5:15] = 1
    mask[10:20, 30:40] = 1
    rois = gripper_rois(mask, 2)
    assert len(rois) == 2
    assert not detect_contact_ssim(tmpl, tmpl, rois)
    occluded = tmpl.copy()
    occluded[8:22, 28:42] = 0.5  # one finger covered
    assert detect_contact_ssim(occluded, tmpl, rois)


@pytest.mark.parametrize(
    "raw, expect",
    [
        ([0, 0, 1, 0, 0, 0], [0, 0, 0, 0, 0, 0]),
        ([0, 0, 1, 1, 1, 1], [0, 0, 1, 1, 1, 1]),
        ([1, 1, 0, 1, 1, 1], [1, 1, 1, 1, 1, 1]),
    ],
)
def test_smoothing_removes_isolated_flips(raw, expect):
    assert smooth_labels(np.array(raw, np.uint8), 5).tolist() == expect


def test_label_bytes_round_trip():
    lab = ContactLabel(np.array([0, 0, 1, 1, 0], np.uint8))
    assert ContactLabel.from_bytes(lab.to_bytes()).labels.tolist() == [0, 0, 1, 1, 0]
    assert lab.onset_index == 2
    assert lab.runs() == [(0, 0, 2), (1, 2, 2), (0, 4, 1)]


def test_depth_path_onset_matches_geometry(lift_demos):
    for demo in lift_demos:
        lab = label_trajectory(demo.trajectory, LabelConfig(method="depth"))
        gt = int(np.flatnonzero(demo.contact)[0])
        assert abs(lab.onset_index - gt) <= 2


def test_ssim_path_onset_near_geometry(lift_demos):
    for demo in lift_demos:
        lab = label_trajectory(demo.trajectory, LabelConfig(method="ssim"))
        gt = int(np.flatnonzero(demo.contact)[0])
        assert abs(lab.onset_index - gt) <= 4
        assert np.all(lab.labels[:gt - 4] == Phase.CONTACTLESS)


def test_auto_routes_to_ssim_without_depth(lift_demo):
    t = lift_demo.trajectory
    steps = [s.__class__(*(o.__class__(o.rgb, o.camera, o.eef, o.joints, o.action, o.gripper, None, o.mask)
                           for o in (s.left, s.right))) for s in t.steps]
    no_depth = Trajectory(steps, t.arms, t.intrinsics)
    auto = label_trajectory(no_depth)
    ssim_lab = label_trajectory(t, LabelConfig(method="ssim"))
    assert auto.labels.tolist() == ssim_lab.labels.tolist()
    with pytest.raises(FrameError):
        label_trajectory(no_depth, LabelConfig(method="depth"))


def test_empty_trajectory_labels_empty(lift_demo):
    t = lift_demo.trajectory
    assert len(label_trajectory(Trajectory([], t.arms, t.intrinsics))) == 0


def test_unknown_method_rejected(lift_demo):
    with pytest.raises(ValueError):
        label_trajectory(lift_demo.trajectory, LabelConfig(method="vibes"))
