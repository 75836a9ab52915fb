import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bimaug.contact import ContactLabel, Phase, label_trajectory
from bimaug.dataset.augment import (
    AugmentConfig,
    KeepReason,
    StepStatus,
    augment_dataset,
    augment_trajectory,
    merge,
)
from bimaug.dataset.io import encode_episode, read_dataset, trajectories_identical, write_dataset
from bimaug.dataset.model import Dataset, Trajectory
from bimaug.errors import (
    CorruptFrame,
    FormatVersionMismatch,
    LabelLengthMismatch,
    MissingManifest,
    SchemaMismatch,
)
from bimaug.geometry import perturb_eef
from bimaug.kinematics import fk
from bimaug.sampler import Infeasible, PerturbationSampler
from bimaug.synth.reprojection import ReprojectionSynthesizer


class NeverFeasible(PerturbationSampler):
    def contactless(self, rng):
        return Infeasible("forced")

    def contact(self, ctx, arms, rng):
        return Infeasible("forced")


def keep_seed_ik(arm, target, seed):
    return np.asarray(seed, dtype=np.float64).copy()


def never_ik(arm, target, seed):
    return None


class Broken(ReprojectionSynthesizer):
    def synthesize(self, src, dp_left, dp_right, rng=None):
        raise ValueError("boom")


@pytest.fixture(scope="module")
def traj(lift_demo):
    return lift_demo.trajectory


@pytest.fixture(scope="module")
def labels(traj):
    return label_trajectory(traj)


def synth_for(traj):
    return ReprojectionSynthesizer(traj.intrinsics)


# --- storage ---------------------------------------------------------------------

def test_round_trip_is_byte_identical(tmp_path, lift_demos):
    trajs = [d.trajectory for d in lift_demos]
    write_dataset(trajs, tmp_path / "ds")
    back = read_dataset(tmp_path / "ds")
    assert len(back) == len(trajs)
    for a, b in zip(trajs, back):
        assert trajectories_identical(a, b)
    write_dataset(back, tmp_path / "ds2")
    for f in ("manifest.json", "episode_00000.bmag"):
        assert (tmp_path / "ds" / f).read_bytes() == (tmp_path / "ds2" / f).read_bytes()


def test_header_magic_and_version(tmp_path, traj):
    data = encode_episode(traj)
    assert data[:4] == b"BMAG"
    assert int.from_bytes(data[4:8], "little") == 1


def test_truncated_episode_reports_failing_frame(tmp_path, traj):
    write_dataset([traj], tmp_path)
    f = tmp_path / "episode_00000.bmag"
    data = f.read_bytes()
    record = (len(data) - 8 - 8) // len(traj)  # roughly one step's bytes
    f.write_bytes(data[: len(data) - 25 * record])
    with pytest.raises(CorruptFrame) as exc:
        read_dataset(tmp_path)
    assert 30 <= exc.value.index <= 36


def test_empty_manifest_gives_empty_dataset(tmp_path):
    write_dataset([], tmp_path)
    assert len(read_dataset(tmp_path)) == 0


def test_missing_manifest(tmp_path):
    with pytest.raises(MissingManifest):
        read_dataset(tmp_path)


def test_future_schema_rejected(tmp_path):
    write_dataset([], tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["schema_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(FormatVersionMismatch):
        read_dataset(tmp_path)


def test_simulated_trajectory_is_hand_eye_consistent(traj):
    assert traj.hand_eye_violations(1e-6) == []


# --- augmentation ----------------------------------------------------------------

def test_contactless_demo_gets_ten_replacements(traj):
    labels = ContactLabel(np.zeros(len(traj), np.uint8))
    _, steps, report = augment_trajectory(traj, labels, AugmentConfig(k=6), PerturbationSampler(),
                                          synth_for(traj), keep_seed_ik)
    assert [s.index for s in steps if s.status is StepStatus.REPLACED] == list(range(0, 60, 6))
    assert report.replaced == 10 and report.attempts == 10


def test_forced_infeasible_keeps_everything(traj, labels):
    out, steps, report = augment_trajectory(traj, labels, AugmentConfig(k=1), NeverFeasible(), synth_for(traj))
    assert report.replaced == 0
    assert all(s.reason is KeepReason.SAMPLER_INFEASIBLE for s in steps)
    assert report.kept[KeepReason.SAMPLER_INFEASIBLE.value] == 60
    assert encode_episode(out) == encode_episode(traj)


def test_ik_and_synth_failures_are_recorded(traj, labels):
    _, steps, _ = augment_trajectory(traj, labels, AugmentConfig(k=20), PerturbationSampler(),
                                     synth_for(traj), never_ik)
    assert all(s.reason is KeepReason.IK_INVALID for s in steps)
    _, steps, _ = augment_trajectory(traj, labels, AugmentConfig(k=20), PerturbationSampler(),
                                     Broken(traj.intrinsics), keep_seed_ik)
    assert all(s.reason is KeepReason.SYNTH_ERROR for s in steps)


def test_contact_phase_replacements_are_coordinated(traj, labels):
    out, steps, _ = augment_trajectory(traj, labels, AugmentConfig(k=3), PerturbationSampler(), synth_for(traj))
    contact = [s for s in steps if labels.labels[s.index] == Phase.CONTACT_RICH and s.status is StepStatus.REPLACED]
    assert contact
    for s in contact:
        assert s.perturbation.left == s.perturbation.right
        assert np.array_equal(s.perturbation.left.rotation, np.eye(3))
        for n in ("left", "right"):
            np.testing.assert_allclose(out.steps[s.index].arm(n).eef.rotation,
                                       traj.steps[s.index].arm(n).eef.rotation, atol=1e-9)


def test_replaced_step_contents(traj, labels):
    out, steps, _ = augment_trajectory(traj, labels, AugmentConfig(k=6), PerturbationSampler(), synth_for(traj))
    for s in steps:
        if s.status is not StepStatus.REPLACED:
            continue
        for n in ("left", "right"):
            src, new = traj.steps[s.index].arm(n), out.steps[s.index].arm(n)
            expect = perturb_eef(src.camera, s.perturbation.arm(n), src.eef)
            # label consistency: fk of the perturbed joints reaches the perturbed EEF
            got = fk(traj.arms[n], new.joints)
            assert np.linalg.norm(got.translation - expect.translation) <= 1e-6
            np.testing.assert_allclose(new.camera.matrix(), (src.camera @ s.perturbation.arm(n)).matrix(), atol=1e-12)
            assert np.array_equal(new.action, src.action)  # original action is the corrective target
            assert new.depth_mm is None and new.mask is None
    assert out.hand_eye_violations(1e-6) == []
    assert out.metadata["provenance"] == "augmented"
    assert len(out.metadata["augmentation"]["steps"]) == 10


def test_pass_through_steps_are_byte_identical(traj, labels):
    out, _, _ = augment_trajectory(traj, labels, AugmentConfig(k=6, offset=2), PerturbationSampler(), synth_for(traj))
    from bimaug.dataset.io import encode_step

    for t in range(len(traj)):
        if (t - 2) % 6 != 0 or t < 2:
            assert encode_step(out.steps[t]) == encode_step(traj.steps[t])


def test_label_length_mismatch(traj):
    with pytest.raises(LabelLengthMismatch):
        augment_trajectory(traj, ContactLabel(np.zeros(5, np.uint8)), AugmentConfig(), PerturbationSampler(),
                           synth_for(traj))


@given(st.integers(1, 12), st.integers(0, 7))
@settings(max_examples=15)
def test_attempt_count_is_ceil_length_over_k(traj, k, offset):
    labels = ContactLabel(np.zeros(len(traj), np.uint8))
    cfg = AugmentConfig(k=k, offset=offset)
    _, _, report = augment_trajectory(traj, labels, cfg, NeverFeasible(), synth_for(traj))
    assert report.replaced + report.kept_total == report.attempts == math.ceil((len(traj) - offset) / k)


def test_invalid_config():
    with pytest.raises(ValueError):
        AugmentConfig(k=0)
    with pytest.raises(ValueError):
        AugmentConfig(synth="magic")
    with pytest.raises(ValueError):
        AugmentConfig.from_dict({"kk": 3})


def test_output_independent_of_worker_count(lift_demos):
    trajs = [d.trajectory for d in lift_demos]
    labels = [label_trajectory(t) for t in trajs]
    args = (AugmentConfig(run_seed=5), PerturbationSampler(), synth_for(trajs[0]))
    a, ra = augment_dataset(trajs, labels, *args, workers=1)
    b, rb = augment_dataset(trajs, labels, *args, workers=3)
    assert ra.to_dict() == rb.to_dict()
    assert all(trajectories_identical(x, y) for x, y in zip(a, b))
    c, _ = augment_dataset(trajs, labels, AugmentConfig(run_seed=6), *args[1:], workers=1)
    assert not all(trajectories_identical(x, y) for x, y in zip(a, c))


# --- merge -----------------------------------------------------------------------

def test_merge_counts_provenance_and_round_trip(tmp_path, lift_demos):
    trajs = [d.trajectory for d in lift_demos[:2]]
    labels = [label_trajectory(t) for t in trajs]
    aug, _ = augment_dataset(trajs, labels, AugmentConfig(k=12), PerturbationSampler(), synth_for(trajs[0]))
    orig = Dataset(trajs)
    merged = merge(orig, aug)
    assert len(merged) == len(orig) + len(aug)
    assert [t.metadata["provenance"] for t in merged] == ["original"] * 2 + ["augmented"] * 2
    write_dataset(merged, tmp_path)
    back = read_dataset(tmp_path)
    assert all(trajectories_identical(a, b) for a, b in zip(merged, back))


def test_merge_with_empty_is_identity(lift_demos):
    orig = Dataset([d.trajectory for d in lift_demos])
    merged = merge(orig, Dataset([]))
    assert len(merged) == len(orig)
    assert all(trajectories_identical(a, b) for a, b in zip(orig, merged))


def test_merge_schema_mismatch(traj):
    with pytest.raises(SchemaMismatch):
        merge(Dataset([traj]), Dataset([], schema_version=2))


def test_trajectory_without_steps_round_trips(tmp_path, traj):
    empty = Trajectory([], traj.arms, traj.intrinsics, {"task": "none"})
    write_dataset([empty], tmp_path)
    assert trajectories_identical(read_dataset(tmp_path)[0], empty)
