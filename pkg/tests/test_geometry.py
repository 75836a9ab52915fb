import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from bimaug.geometry import (
    CameraIntrinsics,
    Pose,
    axis_angle,
    compose,
    exp_so3,
    invert,
    log_so3,
    orthonormalize,
    perturb_eef,
    pose_allclose,
    project,
    relative_pose,
    rotation_angle_deg,
    unproject,
)

seeds = st.integers(0, 2**32 - 1)


def random_pose(rng, scale=1.0):
    R = Rotation.random(random_state=rng).as_matrix()
    return Pose(R, rng.uniform(-scale, scale, 3))


def as_h(p: Pose) -> np.ndarray:
    """4x4 built by hand, independent of Pose.matrix."""
    T = np.eye(4)
    T[:3, :3] = p.rotation
    T[:3, 3] = p.translation
    return T


@given(seeds)
def test_compose_matches_matrix_product(seed):
    rng = np.random.default_rng(seed)
    a, b = random_pose(rng), random_pose(rng)
    np.testing.assert_allclose(compose(a, b).matrix(), as_h(a) @ as_h(b), atol=1e-12)
    np.testing.assert_allclose((a @ b).matrix(), as_h(a) @ as_h(b), atol=1e-12)


@given(seeds)
def test_invert_matches_linalg_inverse(seed):
    p = random_pose(np.random.default_rng(seed), 5.0)
    np.testing.assert_allclose(invert(p).matrix(), np.linalg.inv(as_h(p)), atol=1e-12)


@given(seeds)
def test_relative_pose_recovers_target(seed):
    rng = np.random.default_rng(seed)
    a, b = random_pose(rng), random_pose(rng)
    assert pose_allclose(compose(a, relative_pose(a, b)), b, atol=1e-9)


def test_relative_pose_of_identical_poses_is_identity():
    p = random_pose(np.random.default_rng(3))
    assert pose_allclose(relative_pose(p, p), Pose.identity(), atol=1e-12)


@given(seeds)
def test_perturb_eef_is_conjugation(seed):
    rng = np.random.default_rng(seed)
    C, T, E = random_pose(rng), random_pose(rng, 0.02), random_pose(rng)
    expect = as_h(C) @ as_h(T) @ np.linalg.inv(as_h(C)) @ as_h(E)
    np.testing.assert_allclose(perturb_eef(C, T, E).matrix(), expect, atol=1e-12)


@given(seeds)
def test_pure_translation_perturbation_keeps_orientation(seed):
    rng = np.random.default_rng(seed)
    C, E = random_pose(rng), random_pose(rng)
    t = rng.uniform(-0.02, 0.02, 3)
    out = perturb_eef(C, Pose.from_translation(t), E)
    np.testing.assert_allclose(out.rotation, E.rotation, atol=1e-12)
    np.testing.assert_allclose(out.translation - E.translation, C.rotation @ t, atol=1e-12)


def test_perturb_eef_with_identity_is_noop():
    rng = np.random.default_rng(0)
    C, E = random_pose(rng), random_pose(rng)
    assert pose_allclose(perturb_eef(C, Pose.identity(), E), E, atol=1e-12)


@given(st.floats(-179.0, 179.0), seeds)
def test_axis_angle_matches_rotvec(deg, seed):
    axis = np.random.default_rng(seed).standard_normal(3)
    axis /= np.linalg.norm(axis)
    expect = Rotation.from_rotvec(np.radians(deg) * axis).as_matrix()
    np.testing.assert_allclose(axis_angle(axis, deg), expect, atol=1e-12)
    assert rotation_angle_deg(axis_angle(axis, deg)) == pytest.approx(abs(deg), abs=1e-6)


@given(seeds)
def test_log_inverts_exp(seed):
    w = np.random.default_rng(seed).uniform(-1.0, 1.0, 3)
    np.testing.assert_allclose(log_so3(exp_so3(w)), w, atol=1e-9)
    np.testing.assert_allclose(exp_so3(w), Rotation.from_rotvec(w).as_matrix(), atol=1e-12)


def test_orthonormalize_repairs_drift():
    R = Rotation.from_euler("xyz", [0.3, -0.2, 1.1]).as_matrix()
    bad = R + 1e-5 * np.random.default_rng(0).standard_normal((3, 3))
    fixed = orthonormalize(bad)
    np.testing.assert_allclose(fixed.T @ fixed, np.eye(3), atol=1e-12)
    assert np.linalg.det(fixed) == pytest.approx(1.0)
    np.testing.assert_allclose(fixed, R, atol=1e-4)


def test_long_composition_chain_stays_orthonormal():
    rng = np.random.default_rng(1)
    p = Pose.identity()
    for _ in range(5000):
        p = p @ random_pose(rng, 0.01)
    np.testing.assert_allclose(p.rotation.T @ p.rotation, np.eye(3), atol=1e-7)


def test_pose_rejects_non_rotation():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_pose_bytes_round_trip():
    p = random_pose(np.random.default_rng(2))
    assert Pose.from_bytes(p.to_bytes()) == p


def test_project_unproject_round_trip():
    k = CameraIntrinsics.default(128)
    rng = np.random.default_rng(4)
    pts = np.column_stack([rng.uniform(-0.3, 0.3, (50, 2)), rng.uniform(0.2, 2.0, 50)])
    uv, z = project(pts, k)
    np.testing.assert_allclose(z, pts[:, 2])
    # pinhole by hand
    np.testing.assert_allclose(uv[:, 0], k.fx * pts[:, 0] / pts[:, 2] + k.cx)
    np.testing.assert_allclose(uv[:, 1], k.fy * pts[:, 1] / pts[:, 2] + k.cy)
    np.testing.assert_allclose(unproject(uv, z, k), pts, atol=1e-12)
