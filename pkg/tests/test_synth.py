import numpy as np
import pytest

from bimaug.errors import DimensionMismatch, InsufficientLength, MissingDepth
from bimaug.geometry import CameraIntrinsics, Pose, axis_angle
from bimaug.sim import render
from bimaug.synth.base import ImagePair
from bimaug.synth.diffusion import (
    DenoiserModel,
    DiffusionSynthesizer,
    NoiseSchedule,
    PatchEncoder,
    TrainConfig,
    _EncodedTrajectory,
    forward_diffuse,
    load_model,
    loss,
    loss_and_grad,
    pose_features,
    sample_batch,
    save_model,
    train,
)
from bimaug.synth.reprojection import ReprojectionSynthesizer, depth_edges, reproject_image, warp_coordinates

K = CameraIntrinsics.default(64)


def textured(h, w, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (h, w, 3))


def masked_psnr(a, b, mask):
    mse = np.mean((a[mask] - b[mask]) ** 2)
    return 10 * np.log10(1.0 / mse)


# --- reprojection ----------------------------------------------------------------

def test_identity_reprojection_is_pixel_exact():
    img = textured(64, 64)
    depth = np.full((64, 64), 0.7)
    out, valid = reproject_image(img, depth, K, Pose.identity())
    assert np.array_equal(out, img) and valid.all()


def test_fronto_parallel_shift_matches_hand_oracle():
    """Sideways motion over a plane at depth d shifts the image by fx * tx / d pixels."""
    d, shift = 0.8, 3
    tx = shift * d / K.fx
    img = textured(64, 64, 1)
    out, valid = reproject_image(img, np.full((64, 64), d), K, Pose.from_translation([tx, 0.0, 0.0]))
    expect = np.zeros_like(img)
    expect[:, : 64 - shift] = img[:, shift:]
    assert valid.mean() > 0.8
    assert not valid[:, 64 - shift :].any()
    np.testing.assert_allclose(out[valid], expect[valid], atol=1e-9)


def test_forward_motion_over_plane_matches_hand_oracle():
    d, dz = 1.0, 0.1
    img = textured(64, 64, 2)
    out, valid = reproject_image(img, np.full((64, 64), d), K, Pose.from_translation([0.0, 0.0, dz]))
    v, u = np.nonzero(valid)
    # target pixel (u, v) at depth d - dz sees source pixel c + (u - c) * (d - dz) / d
    us = K.cx + (u - K.cx) * (d - dz) / d
    vs = K.cy + (v - K.cy) * (d - dz) / d
    u0, v0 = np.floor(us).astype(int), np.floor(vs).astype(int)
    fu, fv = (us - u0)[:, None], (vs - v0)[:, None]
    expect = ((1 - fu) * (1 - fv) * img[v0, u0] + fu * (1 - fv) * img[v0, u0 + 1]
              + (1 - fu) * fv * img[v0 + 1, u0] + fu * fv * img[v0 + 1, u0 + 1])
    assert valid.mean() > 0.8
    np.testing.assert_allclose(out[v, u], expect, atol=1e-9)


def test_warp_coordinates_by_hand():
    depth = np.zeros((64, 64))
    depth[10, 20] = 2.0
    dp = Pose(axis_angle([0, 1, 0], 5.0), [0.01, -0.02, 0.03])
    uv, z, ok = warp_coordinates(depth, K, dp)
    p = np.array([(20 - K.cx) / K.fx * 2.0, (10 - K.cy) / K.fy * 2.0, 2.0])
    q = dp.rotation.T @ (p - dp.translation)
    np.testing.assert_allclose(uv[10, 20], [K.fx * q[0] / q[2] + K.cx, K.fy * q[1] / q[2] + K.cy], atol=1e-12)
    assert z[10, 20] == pytest.approx(q[2])
    assert ok.sum() == 1 and np.isnan(z[0, 0])


def test_depth_edges_ignore_tilted_planes_but_flag_steps():
    v, u = np.mgrid[0:64, 0:64]
    plane = 1.0 / (1.0 + 0.004 * u + 0.002 * v)  # inverse depth affine in pixels
    assert not depth_edges(plane, 0.03)[2:-2, 2:-2].any()
    step = np.where(u < 32, 0.5, 1.0)
    assert depth_edges(step, 0.03)[10, 31]


def test_occluding_step_never_leaks_background():
    depth = np.where(np.arange(64)[None, :] < 32, 0.5, 1.0) * np.ones((64, 1))
    img = np.zeros((64, 64, 3))
    img[:, :32] = 1.0  # near surface white, far surface black
    out, valid = reproject_image(img, depth, K, Pose.from_translation([0.02, 0, 0]))
    # every valid pixel is either clearly near (white) or clearly far (black): no smeared mix
    vals = out[valid][:, 0]
    assert np.all((vals < 1e-9) | (vals > 1 - 1e-9))


def test_reprojection_against_fresh_render(lift_demo):
    traj = lift_demo.trajectory
    synth = ReprojectionSynthesizer(traj.intrinsics)
    T = Pose.from_translation([0.0, 0.01, 0.0])
    for t in (5, 30, 45):
        s = traj.steps[t]
        res = synth.synthesize(ImagePair(s.left.image, s.right.image, s.left.depth, s.right.depth), T, T)
        for name in ("left", "right"):
            truth = render(lift_demo.scenes[t], s.arm(name).camera @ T, traj.intrinsics[name]).rgb
            mask = res.valid_left if name == "left" else res.valid_right
            assert masked_psnr(res.images.arm(name), truth, mask) >= 30.0


def test_reprojection_requires_depth():
    img = textured(64, 64)
    with pytest.raises(MissingDepth):
        ReprojectionSynthesizer(K).synthesize(ImagePair(img, img), Pose.identity(), Pose.identity())
    with pytest.raises(DimensionMismatch):
        reproject_image(img, np.ones((32, 32)), K, Pose.identity())


# --- diffusion -------------------------------------------------------------------

def test_schedule_matches_closed_form():
    s = NoiseSchedule()
    betas = 1e-4 + (0.02 - 1e-4) * np.arange(100) / 99
    prod, expect = 1.0, [1.0]
    for b in betas:
        prod *= 1 - b
        expect.append(prod)
    np.testing.assert_allclose(s.alpha_bars, expect, rtol=1e-12)
    assert s.betas[0] == 0.0 and s.betas[1] == pytest.approx(1e-4) and s.betas[100] == pytest.approx(0.02)


def test_forward_diffuse_formula():
    rng = np.random.default_rng(0)
    z0, eps = rng.standard_normal((8, 8, 4)), rng.standard_normal((8, 8, 4))
    ab = NoiseSchedule().alpha_bars[37]
    np.testing.assert_allclose(forward_diffuse(z0, 37, eps), np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps)
    np.testing.assert_array_equal(forward_diffuse(z0, 0, eps), z0)


def test_encoder_round_trip_is_patch_mean():
    enc = PatchEncoder()
    img = textured(128, 128, 3)
    means = img.reshape(8, 16, 8, 16, 3).mean(axis=(1, 3))
    np.testing.assert_allclose(enc.decode(enc.encode(img)), np.repeat(np.repeat(means, 16, 0), 16, 1), atol=1e-12)
    np.testing.assert_allclose(enc.basis.T @ enc.basis, np.eye(3), atol=1e-12)
    with pytest.raises(DimensionMismatch):
        enc.encode(textured(100, 128))


def test_pose_features_of_identity():
    f = pose_features(Pose.identity(), Pose.identity())
    block = np.hstack([np.eye(3), np.zeros((3, 1))]).ravel()
    np.testing.assert_array_equal(f, np.tile(block, 4))
    g = pose_features(Pose.from_translation([0.02, 0, 0]), Pose.identity())
    assert g[3] == pytest.approx(2.0)  # 2 cm
    assert g[12 + 3] == pytest.approx(-2.0)


@pytest.fixture(scope="module")
def small_batch(lift_demos):
    model = DenoiserModel(hidden=32, seed=1)
    data = [_EncodedTrajectory(d.trajectory, model.encoder) for d in lift_demos]
    batch, _ = sample_batch(model, data, TrainConfig(batch=4), np.random.default_rng(0))
    return model, batch


def test_gradient_matches_central_differences(small_batch):
    model, batch = small_batch
    from bimaug.synth.diffusion import batch_inputs

    rng = np.random.default_rng(5)
    params = model.params + 0.05 * rng.standard_normal(model.params.shape)  # make skip/gate paths active
    _, grad = loss_and_grad(model, batch, params)
    x, anchor, target = batch_inputs(model, batch)
    b, h = x.shape[0], 1e-5
    idx = rng.choice(params.size, 200, replace=False)
    for i in idx:
        # extended precision keeps rounding error far below the 1e-4 budget
        p_plus, p_minus = params.astype(np.longdouble), params.astype(np.longdouble)
        p_plus[i] += h
        p_minus[i] -= h
        op, om = model.forward(x, anchor, p_plus), model.forward(x, anchor, p_minus)
        # difference of squared errors in factored form avoids cancellation
        fd = float(np.sum((op - om) * (op + om - 2 * target)) / b / (2 * h))
        rel = abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-8)
        assert rel <= 1e-4, (i, fd, grad[i])


def test_loss_and_grad_agree_on_loss(small_batch):
    model, batch = small_batch
    l, _ = loss_and_grad(model, batch)
    assert l == pytest.approx(loss(model, batch), rel=1e-12)


def test_training_reduces_loss_and_is_deterministic(lift_demos):
    trajs = [d.trajectory for d in lift_demos]
    cfg = TrainConfig(steps=60, seed=3)
    a = train(DenoiserModel(hidden=64), trajs, cfg)
    b = train(DenoiserModel(hidden=64), trajs, cfg)
    assert a.losses == b.losses
    assert np.mean(a.losses[-10:]) < 0.5 * np.mean(a.losses[:10])
    assert a.loss_csv().startswith("step,loss\n0,")


def test_training_needs_long_enough_trajectories(lift_demo):
    short = lift_demo.trajectory.__class__(lift_demo.trajectory.steps[:10], lift_demo.trajectory.arms,
                                           lift_demo.trajectory.intrinsics)
    with pytest.raises(InsufficientLength):
        train(DenoiserModel(hidden=8), [short], TrainConfig(steps=1))
    with pytest.raises(InsufficientLength):
        train(DenoiserModel(hidden=8), [], TrainConfig(steps=1))


def test_model_file_round_trip(tmp_path):
    m = DenoiserModel(hidden=16, seed=4)
    save_model(m, tmp_path / "m.bmdn")
    back = load_model(tmp_path / "m.bmdn")
    assert back.to_bytes() == m.to_bytes()
    with pytest.raises(Exception):
        DenoiserModel.from_bytes(b"XXXX" + m.to_bytes()[4:])


def test_diffusion_synthesizer_is_seeded(lift_demo):
    s = lift_demo.trajectory.steps[0]
    src = ImagePair(s.left.image, s.right.image)
    synth = DiffusionSynthesizer(DenoiserModel(hidden=16))
    dp = Pose.from_translation([0.01, 0, 0])
    a = synth.synthesize(src, dp, dp, np.random.default_rng(9))
    b = synth.synthesize(src, dp, dp, np.random.default_rng(9))
    assert np.array_equal(a.images.left, b.images.left)
    assert a.images.left.shape == src.left.shape and a.valid_left.all()
    assert 0.0 <= a.images.left.min() and a.images.left.max() <= 1.0
